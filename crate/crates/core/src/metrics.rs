//! Image-quality metrics and Monte-Carlo sampling consistency.
//!
//! Multi-scale SSIM conventions, fixed here and matched by the brute-force
//! oracle in the test suite:
//! - data range 2.0 (volumes live in `[-1, 1]`), k1 = 0.01, k2 = 0.03;
//! - Gaussian window, sigma 1.5, size 11 clipped per axis to the extent,
//!   weights normalized to sum 1; statistics over fully-interior positions;
//! - scale count limited by the smallest axis (each scale must keep >= 4
//!   voxels per axis); the standard five exponent weights are truncated and
//!   renormalized;
//! - dyadic downsampling is non-overlapping 2x2x2 mean pooling;
//! - exponent weights apply through sign-preserving powers
//!   (`sign(x) * |x|^w`), so anti-correlated inputs score negative instead
//!   of producing a NaN.

#[allow(unused_imports)]
use num_traits::Float as _;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, shape_err, Result};
use crate::volume::Volume;

/// Standard five-scale exponent weights.
pub const MSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const DATA_RANGE: f64 = 2.0;

/// Mean absolute error over voxels.
pub fn mae(a: &Volume, b: &Volume) -> Result<f64> {
    check_same(a, b)?;
    let mut acc = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        acc += (x as f64 - y as f64).abs();
    }
    Ok(acc / a.numel() as f64)
}

/// Peak signal-to-noise ratio in dB; identical volumes report infinity.
pub fn psnr(a: &Volume, b: &Volume, data_range: f64) -> Result<f64> {
    check_same(a, b)?;
    if data_range <= 0.0 {
        return Err(arg_err!("data range {data_range} must be positive"));
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    let mse = acc / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

fn check_same(a: &Volume, b: &Volume) -> Result<()> {
    if a.extents() != b.extents() {
        return Err(shape_err!(
            "volumes differ: {:?} vs {:?}",
            a.extents(),
            b.extents()
        ));
    }
    Ok(())
}

/// Normalized 1D Gaussian window clipped to `len` taps.
fn gaussian_taps(len: usize) -> Vec<f64> {
    let c = (len as f64 - 1.0) / 2.0;
    let mut taps: Vec<f64> = (0..len)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in taps.iter_mut() {
        *t /= sum;
    }
    taps
}

/// Valid-mode separable 3D filtering along x, then y, then z.
fn separable_valid(
    data: &[f64],
    ext: [usize; 3],
    taps: [&[f64]; 3],
) -> (Vec<f64>, [usize; 3]) {
    let mut cur = data.to_vec();
    let mut cur_ext = ext;
    for axis in 0..3 {
        let k = taps[axis];
        let klen = k.len();
        let out_len = cur_ext[axis] - klen + 1;
        let mut next_ext = cur_ext;
        next_ext[axis] = out_len;
        let mut next = vec![0.0f64; next_ext[0] * next_ext[1] * next_ext[2]];
        let (ex, ey, _ez) = (cur_ext[0], cur_ext[1], cur_ext[2]);
        let (nx, ny, nz) = (next_ext[0], next_ext[1], next_ext[2]);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let mut acc = 0.0;
                    for (t, &kv) in k.iter().enumerate() {
                        let (sx, sy, sz) = match axis {
                            0 => (x + t, y, z),
                            1 => (x, y + t, z),
                            _ => (x, y, z + t),
                        };
                        acc += kv * cur[sx + ex * (sy + ey * sz)];
                    }
                    next[x + nx * (y + ny * z)] = acc;
                }
            }
        }
        cur = next;
        cur_ext = next_ext;
    }
    (cur, cur_ext)
}

/// Non-overlapping 2x2x2 mean pooling (trailing odd voxels dropped).
fn mean_pool_2x(data: &[f64], ext: [usize; 3]) -> (Vec<f64>, [usize; 3]) {
    let out = [ext[0] / 2, ext[1] / 2, ext[2] / 2];
    let mut pooled = vec![0.0f64; out[0] * out[1] * out[2]];
    for z in 0..out[2] {
        for y in 0..out[1] {
            for x in 0..out[0] {
                let mut acc = 0.0;
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += data[(2 * x + dx) + ext[0] * ((2 * y + dy) + ext[1] * (2 * z + dz))];
                        }
                    }
                }
                pooled[x + out[0] * (y + out[1] * z)] = acc / 8.0;
            }
        }
    }
    (pooled, out)
}

/// Mean luminance (`l`) and contrast-structure (`cs`) over valid positions
/// at one scale.
fn ssim_scale(a: &[f64], b: &[f64], ext: [usize; 3]) -> (f64, f64) {
    let taps: Vec<Vec<f64>> = (0..3)
        .map(|ax| gaussian_taps(SSIM_WINDOW.min(ext[ax])))
        .collect();
    let t: [&[f64]; 3] = [&taps[0], &taps[1], &taps[2]];
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
    let (mu_a, _) = separable_valid(a, ext, t);
    let (mu_b, _) = separable_valid(b, ext, t);
    let (e_aa, _) = separable_valid(&aa, ext, t);
    let (e_bb, _) = separable_valid(&bb, ext, t);
    let (e_ab, out_ext) = separable_valid(&ab, ext, t);

    let c1 = (SSIM_K1 * DATA_RANGE).powi(2);
    let c2 = (SSIM_K2 * DATA_RANGE).powi(2);
    let n = out_ext[0] * out_ext[1] * out_ext[2];
    let mut l_acc = 0.0;
    let mut cs_acc = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        l_acc += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs_acc += (2.0 * cov + c2) / (va + vb + c2);
    }
    (l_acc / n as f64, cs_acc / n as f64)
}

fn signed_pow(x: f64, w: f64) -> f64 {
    x.signum() * x.abs().powf(w)
}

/// Number of usable dyadic scales for these extents (each scale needs at
/// least 4 voxels per axis).
pub fn usable_scales(ext: [usize; 3], requested: usize) -> usize {
    let min_ext = ext.iter().copied().min().unwrap_or(0);
    let mut m = 0;
    let mut e = min_ext;
    while m < requested && e >= 4 {
        m += 1;
        e /= 2;
    }
    m
}

/// Multi-scale structural similarity with the conventions in the module docs.
pub fn mssim(a: &Volume, b: &Volume, scales: usize, weights: &[f64]) -> Result<f64> {
    check_same(a, b)?;
    if scales == 0 || weights.len() < scales {
        return Err(arg_err!(
            "requested {scales} scales with {} weights",
            weights.len()
        ));
    }
    let ext = a.extents();
    let m = usable_scales(ext, scales);
    if m == 0 {
        return Err(arg_err!(
            "volume {ext:?} too small for one SSIM scale (needs >= 4 per axis)"
        ));
    }
    let wsum: f64 = weights[..m].iter().sum();
    let w: Vec<f64> = weights[..m].iter().map(|x| x / wsum).collect();

    let mut da: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let mut db: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let mut cur_ext = ext;
    let mut total = 1.0f64;
    for (j, &wj) in w.iter().enumerate() {
        let (l, cs) = ssim_scale(&da, &db, cur_ext);
        if j + 1 == m {
            total *= signed_pow(l * cs, wj);
        } else {
            total *= signed_pow(cs, wj);
            let (pa, ea) = mean_pool_2x(&da, cur_ext);
            let (pb, _) = mean_pool_2x(&db, cur_ext);
            da = pa;
            db = pb;
            cur_ext = ea;
        }
    }
    Ok(total)
}

/// MSSIM with the default scale count and weights.
pub fn mssim_default(a: &Volume, b: &Volume) -> Result<f64> {
    mssim(a, b, MSSIM_WEIGHTS.len(), &MSSIM_WEIGHTS)
}

/// Monte-Carlo consistency analysis of repeated sampling runs.
#[derive(Clone, Debug)]
pub struct MCReport {
    pub runs: usize,
    /// Mean voxelwise population standard deviation across runs.
    pub uncertainty: f64,
    /// MSSIM of the first-n-run average vs truth, normalized by the max.
    pub n_mssim: Vec<f64>,
    /// Population standard deviation of the normalized values.
    pub inconsistency: f64,
    pub mae: f64,
    pub psnr: f64,
    pub mssim: f64,
}

/// Builds the consistency report. Uses the population standard deviation
/// (divide by n) in both the uncertainty and the inconsistency.
pub fn mc_consistency(runs: &[Volume], truth: &Volume) -> Result<MCReport> {
    if runs.is_empty() {
        return Err(arg_err!("consistency needs at least one run"));
    }
    for r in runs {
        check_same(r, truth)?;
    }
    let n = runs.len();
    let numel = truth.numel();

    // voxelwise std over runs
    let mut uncertainty = 0.0f64;
    for i in 0..numel {
        let mut mean = 0.0f64;
        for r in runs {
            mean += r.data()[i] as f64;
        }
        mean /= n as f64;
        let mut var = 0.0f64;
        for r in runs {
            let d = r.data()[i] as f64 - mean;
            var += d * d;
        }
        uncertainty += (var / n as f64).sqrt();
    }
    uncertainty /= numel as f64;

    // running averages of the first n runs
    let mut acc = vec![0.0f64; numel];
    let mut raw = Vec::with_capacity(n);
    let mut means = Vec::with_capacity(n);
    for (k, r) in runs.iter().enumerate() {
        for (a, &v) in acc.iter_mut().zip(r.data()) {
            *a += v as f64;
        }
        let mean_vol = Volume::new(
            truth.extents(),
            truth.spacing(),
            acc.iter().map(|&v| (v / (k + 1) as f64) as f32).collect(),
        )?;
        raw.push(mssim_default(&mean_vol, truth)?);
        means.push(mean_vol);
    }
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n_mssim: Vec<f64> = if max != 0.0 {
        raw.iter().map(|&v| v / max).collect()
    } else {
        raw.clone()
    };
    let mean_norm = n_mssim.iter().sum::<f64>() / n as f64;
    let inconsistency = (n_mssim
        .iter()
        .map(|&v| (v - mean_norm) * (v - mean_norm))
        .sum::<f64>()
        / n as f64)
        .sqrt();

    let final_mean = means.last().expect("at least one run");
    Ok(MCReport {
        runs: n,
        uncertainty,
        n_mssim,
        inconsistency,
        mae: mae(final_mean, truth)?,
        psnr: psnr(final_mean, truth, DATA_RANGE)?,
        mssim: raw[n - 1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(ext: [usize; 3], f: impl Fn(usize) -> f32) -> Volume {
        let n = ext[0] * ext[1] * ext[2];
        Volume::new(ext, [1.0; 3], (0..n).map(f).collect()).unwrap()
    }

    #[test]
    fn mae_basics() {
        let a = vol([4, 4, 4], |i| (i % 7) as f32 * 0.1 - 0.3);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        let b = Volume::new(a.extents(), a.spacing(), a.data().iter().map(|v| v + 0.5).collect())
            .unwrap();
        assert!((mae(&a, &b).unwrap() - 0.5).abs() < 1e-6);
        let c = vol([4, 4, 2], |_| 0.0);
        assert!(mae(&a, &c).is_err());
    }

    #[test]
    fn psnr_hand_case_and_sentinel() {
        // constant difference 0.1 -> MSE 0.01, range 2 -> 10 log10(400)
        let a = vol([8, 8, 4], |_| 0.2);
        let b = vol([8, 8, 4], |_| 0.3);
        let p = psnr(&a, &b, 2.0).unwrap();
        assert!((p - 26.020599913279625).abs() < 1e-5);
        assert!(psnr(&a, &a, 2.0).unwrap().is_infinite());
    }

    #[test]
    fn mssim_identity_is_one() {
        let a = vol([16, 16, 16], |i| ((i * 31 % 101) as f32) / 50.0 - 1.0);
        let v = mssim_default(&a, &a).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mssim_negated_zero_mean_is_negative() {
        // checkerboard: zero mean inside every window, so luminance ~ 1 and
        // the anti-correlated structure term carries the sign
        let a = vol([16, 16, 16], |i| {
            let x = i % 16;
            let y = (i / 16) % 16;
            let z = i / 256;
            if (x + y + z) % 2 == 0 {
                0.6
            } else {
                -0.6
            }
        });
        let b = Volume::new(a.extents(), a.spacing(), a.data().iter().map(|v| -v).collect())
            .unwrap();
        let v = mssim_default(&a, &b).unwrap();
        assert!(v < 0.0, "anti-correlated inputs must score negative, got {v}");
    }

    #[test]
    fn mssim_rejects_tiny_volumes() {
        let a = vol([3, 3, 3], |_| 0.0);
        assert!(mssim_default(&a, &a).is_err());
    }

    #[test]
    fn usable_scales_respects_smallest_axis() {
        assert_eq!(usable_scales([64, 64, 16], 5), 3);
        assert_eq!(usable_scales([16, 16, 16], 5), 3);
        assert_eq!(usable_scales([256, 256, 256], 5), 5);
        assert_eq!(usable_scales([4, 64, 64], 5), 1);
        assert_eq!(usable_scales([2, 64, 64], 5), 0);
    }

    #[test]
    fn mc_consistency_identical_runs_zero_report() {
        let a = vol([16, 16, 8], |i| ((i * 13 % 31) as f32) / 20.0 - 0.5);
        let runs = alloc::vec![a.clone(), a.clone(), a.clone()];
        let truth = vol([16, 16, 8], |i| ((i * 7 % 29) as f32) / 20.0 - 0.5);
        let rep = mc_consistency(&runs, &truth).unwrap();
        assert_eq!(rep.uncertainty, 0.0);
        assert!(rep.n_mssim.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(rep.inconsistency < 1e-12);
    }

    #[test]
    fn mc_consistency_two_scalar_like_runs() {
        // two constant volumes 0 and 1: population std at each voxel is 0.5
        let z = vol([8, 8, 4], |_| 0.0);
        let o = vol([8, 8, 4], |_| 1.0);
        let truth = vol([8, 8, 4], |_| 0.5);
        let rep = mc_consistency(&[z, o], &truth).unwrap();
        assert!((rep.uncertainty - 0.5).abs() < 1e-9);
        assert_eq!(rep.runs, 2);
        assert_eq!(rep.n_mssim.len(), 2);
    }

    #[test]
    fn mc_consistency_monotone_improvement() {
        // runs are truth plus independent-ish perturbations; averaging more
        // runs cancels them, so n_mssim should not decrease
        let truth = vol([16, 16, 8], |i| {
            let x = i % 16;
            let y = (i / 16) % 16;
            (((x + y) % 9) as f32) / 8.0 - 0.5
        });
        let runs: Vec<Volume> = (0..4)
            .map(|r| {
                Volume::new(
                    truth.extents(),
                    truth.spacing(),
                    truth
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| {
                            let h = (i * 2654435761usize.wrapping_mul(r + 1)) % 1000;
                            (v + (h as f32 / 1000.0 - 0.5) * 0.3).clamp(-1.0, 1.0)
                        })
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let rep = mc_consistency(&runs, &truth).unwrap();
        for w in rep.n_mssim.windows(2) {
            assert!(w[1] >= w[0] - 0.02, "n_mssim strongly decreasing: {:?}", rep.n_mssim);
        }
        assert!(rep.uncertainty > 0.0);
    }
}
