//! Volume-patch samplers.
//!
//! Three reverse processes over a respaced schedule, all conditioned on the
//! clean source patch:
//! - cycle-guided: the source-side network walks a freshly generated noisy
//!   source chain and its standardized residuals (reverse latent codes) are
//!   injected into the target-side reparameterized steps, replacing fresh
//!   noise; the trace of injected codes is returned and can be replayed;
//! - ancestral: fresh Gaussian noise per step, none at the final step;
//! - implicit: deterministic update from the clean-image estimate (eta = 0).

#[allow(unused_imports)]
use num_traits::Float as _;

use alloc::vec::Vec;

use crate::diffusion::{
    extract_latent, model_mean, model_variance, predict_x0_from_eps, reverse_step, DenoiserOutput,
    ReverseMoments,
};
use crate::error::{arg_err, Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::schedule::{DiffusionSchedule, TimestepMap};
use crate::tensor::Tensor;

/// A conditional denoiser evaluable outside any tape.
pub trait ConditionalDenoiser<T: Scalar>: Sync {
    /// `x` and `cond` are `[B, 1, D, H, W]`; `n` is an original timestep.
    fn denoise(&self, x: &Tensor<T>, cond: &Tensor<T>, n: usize) -> Result<DenoiserOutput<T>>;
}

impl<T: Scalar> ConditionalDenoiser<T> for crate::denoiser::Denoiser<T> {
    fn denoise(&self, x: &Tensor<T>, cond: &Tensor<T>, n: usize) -> Result<DenoiserOutput<T>> {
        crate::denoiser::Denoiser::denoise(self, x, cond, n)
    }
}

/// Reverse latent codes `[z at s_K, ..., z at s_1]`, timesteps strictly
/// decreasing.
#[derive(Clone, Debug)]
pub struct LatentTrace<T: Scalar> {
    steps: Vec<(usize, Tensor<T>)>,
}

impl<T: Scalar> LatentTrace<T> {
    pub fn new(steps: Vec<(usize, Tensor<T>)>) -> Result<Self> {
        for w in steps.windows(2) {
            if w[1].0 >= w[0].0 {
                return Err(arg_err!(
                    "trace timesteps must strictly decrease, got {} then {}",
                    w[0].0,
                    w[1].0
                ));
            }
        }
        for (n, z) in &steps {
            if !z.is_all_finite() {
                return Err(Error::NonFinite(alloc::format!("latent code at step {n}")));
            }
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[(usize, Tensor<T>)] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Output of one cycle-guided run: the synthesized patch, the injected
/// latent codes, and the shared starting noise image (the last element of
/// the source chain), which together determine the reverse path exactly.
#[derive(Clone, Debug)]
pub struct CycleSample<T: Scalar> {
    pub output: Tensor<T>,
    pub trace: LatentTrace<T>,
    pub start: Tensor<T>,
}

fn moments_at<T: Scalar>(
    x: &Tensor<T>,
    out: &DenoiserOutput<T>,
    k: usize,
    s: &DiffusionSchedule,
) -> Result<ReverseMoments<T>> {
    Ok(ReverseMoments {
        mean: model_mean(x, &out.eps, k, s)?,
        var: model_variance(&out.v, k, s)?,
    })
}

/// Cycle-guided sampling of the target modality from a clean source patch.
///
/// `net_target` denoises the synthesized modality conditioned on `cond`;
/// `net_source` denoises the source modality conditioned on the running
/// clean-target estimate. The noisy source chain is generated under the
/// respaced schedule; the final chain element doubles as the target start.
pub fn sample_cycle_guided<T: Scalar>(
    cond: &Tensor<T>,
    net_target: &dyn ConditionalDenoiser<T>,
    net_source: &dyn ConditionalDenoiser<T>,
    respaced: &DiffusionSchedule,
    map: &TimestepMap,
    seed: u64,
) -> Result<CycleSample<T>> {
    check_map(respaced, map)?;
    let k_steps = respaced.len();
    let chain = crate::diffusion::forward_chain(cond, respaced, rng::derive_seed(seed, &[0x11]));
    let start = chain[k_steps - 1].clone();
    let mut x = start.clone();
    let mut steps = Vec::with_capacity(k_steps);
    for k in (1..=k_steps).rev() {
        let n = map.original(k);
        let out_t = net_target.denoise(&x, cond, n)?;
        let x0_est = predict_x0_from_eps(&x, &out_t.eps, k, respaced)?;
        let y_k = &chain[k - 1];
        let out_s = net_source.denoise(y_k, &x0_est, n)?;
        let m_source = moments_at(y_k, &out_s, k, respaced)?;
        let y_prev = if k == 1 { cond } else { &chain[k - 2] };
        let z = extract_latent(y_prev, &m_source)?;
        let m_target = moments_at(&x, &out_t, k, respaced)?;
        x = reverse_step(&m_target, &z)?;
        steps.push((n, z));
    }
    Ok(CycleSample {
        output: x.clamp(-T::one(), T::one()),
        trace: LatentTrace::new(steps)?,
        start,
    })
}

/// Re-runs the target-side reverse path from a saved trace and start image;
/// bit-identical to the run that produced them.
pub fn replay_cycle_trace<T: Scalar>(
    cond: &Tensor<T>,
    net_target: &dyn ConditionalDenoiser<T>,
    respaced: &DiffusionSchedule,
    map: &TimestepMap,
    trace: &LatentTrace<T>,
    start: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_map(respaced, map)?;
    let k_steps = respaced.len();
    if trace.len() != k_steps {
        return Err(arg_err!(
            "trace has {} steps, schedule has {k_steps}",
            trace.len()
        ));
    }
    let mut x = start.clone();
    for (i, k) in (1..=k_steps).rev().enumerate() {
        let (n_rec, z) = &trace.steps()[i];
        let n = map.original(k);
        if *n_rec != n {
            return Err(arg_err!("trace step {n_rec} does not match schedule step {n}"));
        }
        let out_t = net_target.denoise(&x, cond, n)?;
        let m = moments_at(&x, &out_t, k, respaced)?;
        x = reverse_step(&m, z)?;
    }
    Ok(x.clamp(-T::one(), T::one()))
}

/// Ancestral sampling: start from pure noise, add fresh noise each step
/// except the last.
pub fn sample_ancestral<T: Scalar>(
    cond: &Tensor<T>,
    net: &dyn ConditionalDenoiser<T>,
    respaced: &DiffusionSchedule,
    map: &TimestepMap,
    seed: u64,
) -> Result<Tensor<T>> {
    check_map(respaced, map)?;
    let k_steps = respaced.len();
    let mut x = rng::normal_tensor::<T>(&mut rng::stream(seed, &[0x21]), cond.shape());
    for k in (1..=k_steps).rev() {
        let n = map.original(k);
        let out = net.denoise(&x, cond, n)?;
        if k == 1 {
            x = model_mean(&x, &out.eps, k, respaced)?;
        } else {
            let m = moments_at(&x, &out, k, respaced)?;
            let z = rng::normal_tensor::<T>(&mut rng::stream(seed, &[0x22, k as u64]), cond.shape());
            x = reverse_step(&m, &z)?;
        }
    }
    Ok(x.clamp(-T::one(), T::one()))
}

/// Deterministic implicit reverse path from an explicit start image.
pub fn ddim_reverse_from<T: Scalar>(
    start: &Tensor<T>,
    cond: &Tensor<T>,
    net: &dyn ConditionalDenoiser<T>,
    respaced: &DiffusionSchedule,
    map: &TimestepMap,
) -> Result<Tensor<T>> {
    check_map(respaced, map)?;
    let k_steps = respaced.len();
    let mut x = start.clone();
    for k in (1..=k_steps).rev() {
        let n = map.original(k);
        let out = net.denoise(&x, cond, n)?;
        let x0_est = predict_x0_from_eps(&x, &out.eps, k, respaced)?;
        let ab_prev = respaced.alpha_bar(k - 1);
        let c0 = T::of_f64(ab_prev.sqrt());
        let c1 = T::of_f64((1.0 - ab_prev).sqrt());
        x = x0_est.zip_map(&out.eps, |x0, e| x0 * c0 + e * c1)?;
    }
    Ok(x.clamp(-T::one(), T::one()))
}

/// Implicit sampling: seeded Gaussian start, then a fully deterministic
/// reverse path (no stochastic term).
pub fn sample_ddim<T: Scalar>(
    cond: &Tensor<T>,
    net: &dyn ConditionalDenoiser<T>,
    respaced: &DiffusionSchedule,
    map: &TimestepMap,
    seed: u64,
) -> Result<Tensor<T>> {
    let start = rng::normal_tensor::<T>(&mut rng::stream(seed, &[0x21]), cond.shape());
    ddim_reverse_from(&start, cond, net, respaced, map)
}

fn check_map(respaced: &DiffusionSchedule, map: &TimestepMap) -> Result<()> {
    if respaced.len() != map.len() {
        return Err(arg_err!(
            "respaced schedule has {} steps, timestep map {}",
            respaced.len(),
            map.len()
        ));
    }
    Ok(())
}

/// Runs a seeded sampler `runs` times with per-run derived seeds and returns
/// the voxelwise mean plus every run.
pub fn mc_sample<T: Scalar, F>(
    sampler: F,
    runs: usize,
    master_seed: u64,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)>
where
    F: Fn(u64) -> Result<Tensor<T>>,
{
    if runs == 0 {
        return Err(arg_err!("need at least one run"));
    }
    let mut outputs = Vec::with_capacity(runs);
    for r in 0..runs {
        outputs.push(sampler(rng::derive_seed(master_seed, &[r as u64]))?);
    }
    let inv = T::of_f64(1.0 / runs as f64);
    let mut acc = Tensor::zeros(outputs[0].shape());
    for o in &outputs {
        acc = acc.add(o)?;
    }
    Ok((acc.map(|v| v * inv), outputs))
}
