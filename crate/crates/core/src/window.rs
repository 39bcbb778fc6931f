//! Whole-volume synthesis by sliding windows with Gaussian blending.

#[allow(unused_imports)]
use num_traits::Float as _;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, Result};
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::volume::Volume;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Window layout over one volume plus the shared blending weights.
#[derive(Clone, Debug)]
pub struct SlidingWindowPlan {
    pub patch: [usize; 3],
    pub stride: [usize; 3],
    pub origins: Vec<[usize; 3]>,
    /// Per-voxel blend weight, peak 1 at the patch center, x-fastest.
    pub weights: Vec<f32>,
}

/// Window origins at stride multiples with the final origin clamped flush to
/// the boundary; every voxel is covered at least once.
pub fn plan_windows(
    volume: [usize; 3],
    patch: [usize; 3],
    overlap: f64,
) -> Result<SlidingWindowPlan> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(arg_err!("overlap {overlap} outside [0, 1)"));
    }
    let mut stride = [0usize; 3];
    let mut per_axis: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for a in 0..3 {
        if patch[a] == 0 || patch[a] > volume[a] {
            return Err(arg_err!(
                "patch {patch:?} does not fit volume {volume:?} on axis {a}"
            ));
        }
        let s = ((patch[a] as f64 * (1.0 - overlap)).round() as usize).max(1);
        stride[a] = s;
        let last = volume[a] - patch[a];
        let mut pos = 0;
        while pos < last {
            per_axis[a].push(pos);
            pos += s;
        }
        per_axis[a].push(last);
    }
    let mut origins = Vec::new();
    for &z in &per_axis[2] {
        for &y in &per_axis[1] {
            for &x in &per_axis[0] {
                origins.push([x, y, z]);
            }
        }
    }
    Ok(SlidingWindowPlan {
        patch,
        stride,
        origins,
        weights: gaussian_mask(patch, 1.0 / 8.0).data().to_vec(),
    })
}

/// Separable Gaussian blend mask over a patch, peak value 1 at the center,
/// with per-axis sigma `extent * sigma_frac`.
pub fn gaussian_mask(patch: [usize; 3], sigma_frac: f64) -> Tensor<f32> {
    assert!(sigma_frac > 0.0, "sigma fraction must be positive");
    let axis = |e: usize| -> Vec<f64> {
        let sigma = e as f64 * sigma_frac;
        let c = (e as f64 - 1.0) / 2.0;
        (0..e)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
            .collect()
    };
    let (wx, wy, wz) = (axis(patch[0]), axis(patch[1]), axis(patch[2]));
    let mut data = Vec::with_capacity(patch[0] * patch[1] * patch[2]);
    for z in 0..patch[2] {
        for y in 0..patch[1] {
            for x in 0..patch[0] {
                data.push((wx[x] * wy[y] * wz[z]) as f32);
            }
        }
    }
    Tensor::from_vec(&[patch[2], patch[1], patch[0]], data).expect("mask shape")
}

/// Blends per-window patches into one volume:
/// `voxel = sum(weight * value) / sum(weight)`.
///
/// Windows are accumulated in ascending origin order regardless of input
/// order, so the result is bit-identical under any window permutation.
pub fn stitch(
    plan: &SlidingWindowPlan,
    volume_extents: [usize; 3],
    spacing: [f32; 3],
    outputs: &[Volume],
) -> Result<Volume> {
    if outputs.len() != plan.origins.len() {
        return Err(arg_err!(
            "{} window outputs for {} planned windows",
            outputs.len(),
            plan.origins.len()
        ));
    }
    for o in outputs {
        if o.extents() != plan.patch {
            return Err(arg_err!(
                "window output extents {:?} differ from patch {:?}",
                o.extents(),
                plan.patch
            ));
        }
    }
    let mut order: Vec<usize> = (0..outputs.len()).collect();
    order.sort_by_key(|&i| {
        let o = plan.origins[i];
        (o[2], o[1], o[0])
    });

    let [vx, vy, vz] = volume_extents;
    let mut num = vec![0.0f64; vx * vy * vz];
    let mut den = vec![0.0f64; vx * vy * vz];
    let [px, py, pz] = plan.patch;
    for &i in &order {
        let org = plan.origins[i];
        let out = &outputs[i];
        for z in 0..pz {
            for y in 0..py {
                let vrow = (org[0]) + vx * ((org[1] + y) + vy * (org[2] + z));
                let prow = px * (y + py * z);
                for x in 0..px {
                    let w = plan.weights[prow + x] as f64;
                    num[vrow + x] += w * out.data()[prow + x] as f64;
                    den[vrow + x] += w;
                }
            }
        }
    }
    let mut data = Vec::with_capacity(num.len());
    for (n, d) in num.iter().zip(den.iter()) {
        if *d <= 0.0 {
            return Err(arg_err!("uncovered voxel in stitch (coverage hole)"));
        }
        data.push((n / d) as f32);
    }
    Volume::new(volume_extents, spacing, data)
}

/// Runs a per-window sampler over the plan and stitches the outputs.
///
/// Every window gets its own derived seed (`derive_seed(seed, [index])`), so
/// windows are independent and the result does not depend on evaluation
/// order or parallelism.
pub fn predict_volume<F>(
    source: &Volume,
    plan: &SlidingWindowPlan,
    seed: u64,
    sampler: F,
) -> Result<Volume>
where
    F: Fn(&Volume, u64) -> Result<Volume> + Sync,
{
    let crops: Vec<(usize, Volume)> = plan
        .origins
        .iter()
        .enumerate()
        .map(|(i, &org)| Ok((i, source.crop(org, plan.patch)?)))
        .collect::<Result<_>>()?;

    let run = |(i, window): &(usize, Volume)| sampler(window, derive_seed(seed, &[*i as u64]));

    #[cfg(feature = "parallel")]
    let outputs: Result<Vec<Volume>> = crops.par_iter().map(run).collect();
    #[cfg(not(feature = "parallel"))]
    let outputs: Result<Vec<Volume>> = crops.iter().map(run).collect();

    stitch(plan, source.extents(), source.spacing(), &outputs?)
}
