//! Forward and reverse diffusion process math.
//!
//! These are the plain (non-differentiated) forms used by the samplers and
//! by tests; the training losses rebuild the same formulas from tape
//! primitives in [`crate::loss`].

#[allow(unused_imports)]
use num_traits::Float as _;

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::rng::normal_tensor;
use crate::scalar::Scalar;
use crate::schedule::DiffusionSchedule;
use crate::tensor::Tensor;

/// Standard-deviation floor inside [`extract_latent`], guarding the
/// degenerate first-step posterior variance.
pub const LATENT_STD_FLOOR: f64 = 1e-10;

/// Network output for one conditioned patch: noise prediction and the
/// variance interpolation coefficient in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct DenoiserOutput<T: Scalar> {
    pub eps: Tensor<T>,
    pub v: Tensor<T>,
}

/// Gaussian moments of one reverse step; `var` holds the variance.
#[derive(Clone, Debug)]
pub struct ReverseMoments<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

fn check_step(s: &DiffusionSchedule, n: usize) -> Result<()> {
    if !s.contains_step(n) {
        return Err(arg_err!("timestep {n} outside 1..={}", s.len()));
    }
    Ok(())
}

/// Noisy image at step `n` from a clean image and a fixed noise draw:
/// `sqrt(alpha_bar[n]) * x0 + sqrt(1 - alpha_bar[n]) * eps`.
pub fn q_sample<T: Scalar>(
    x0: &Tensor<T>,
    n: usize,
    eps: &Tensor<T>,
    s: &DiffusionSchedule,
) -> Result<Tensor<T>> {
    check_step(s, n)?;
    if x0.shape() != eps.shape() {
        return Err(shape_err!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape()));
    }
    let ab = s.alpha_bar(n);
    let c0 = T::of_f64(ab.sqrt());
    let c1 = T::of_f64((1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| x * c0 + e * c1)
}

/// Step-by-step forward chain `x_n = sqrt(1 - beta_n) x_{n-1} + sqrt(beta_n) e_n`
/// with a fresh independent draw per step. Returns `[x_1 ... x_N]`.
///
/// Per-step noise comes from a sub-stream derived from the step index, so the
/// draw at step `n` does not depend on how many values earlier steps used.
pub fn forward_chain<T: Scalar>(
    x0: &Tensor<T>,
    s: &DiffusionSchedule,
    seed: u64,
) -> Vec<Tensor<T>> {
    let mut chain = Vec::with_capacity(s.len());
    let mut prev = x0.clone();
    for n in 1..=s.len() {
        let mut rng: ChaCha8Rng = crate::rng::stream(seed, &[n as u64]);
        let noise = normal_tensor::<T>(&mut rng, x0.shape());
        let keep = T::of_f64((1.0 - s.beta(n)).sqrt());
        let add = T::of_f64(s.beta(n).sqrt());
        let next = prev
            .zip_map(&noise, |p, e| p * keep + e * add)
            .expect("same shape by construction");
        chain.push(next.clone());
        prev = next;
    }
    chain
}

/// True forward-posterior moments `q(x_{n-1} | x_n, x_0)`:
/// mean `= c0 * x0 + c1 * xn`, variance `= beta_tilde[n]` everywhere.
pub fn posterior_moments<T: Scalar>(
    x0: &Tensor<T>,
    xn: &Tensor<T>,
    n: usize,
    s: &DiffusionSchedule,
) -> Result<ReverseMoments<T>> {
    check_step(s, n)?;
    if x0.shape() != xn.shape() {
        return Err(shape_err!("x0 {:?} vs xn {:?}", x0.shape(), xn.shape()));
    }
    let (c0, c1) = posterior_mean_coeffs(s, n);
    let c0t = T::of_f64(c0);
    let c1t = T::of_f64(c1);
    let mean = x0.zip_map(xn, |a, b| a * c0t + b * c1t)?;
    let var = Tensor::full(x0.shape(), T::of_f64(s.beta_tilde(n)));
    Ok(ReverseMoments { mean, var })
}

/// Coefficients `(on_x0, on_xn)` of the posterior mean.
pub fn posterior_mean_coeffs(s: &DiffusionSchedule, n: usize) -> (f64, f64) {
    let ab_prev = s.alpha_bar(n - 1);
    let ab = s.alpha_bar(n);
    let c0 = ab_prev.sqrt() * s.beta(n) / (1.0 - ab);
    let c1 = s.alpha(n).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    (c0, c1)
}

/// Model mean from a noise prediction:
/// `(xn - beta_n / sqrt(1 - alpha_bar[n]) * eps) / sqrt(alpha_n)`.
///
/// The radical uses the cumulative product, matching the noising identity it
/// inverts.
pub fn model_mean<T: Scalar>(
    xn: &Tensor<T>,
    eps_pred: &Tensor<T>,
    n: usize,
    s: &DiffusionSchedule,
) -> Result<Tensor<T>> {
    check_step(s, n)?;
    if xn.shape() != eps_pred.shape() {
        return Err(shape_err!("xn {:?} vs eps {:?}", xn.shape(), eps_pred.shape()));
    }
    let (inv_sqrt_a, coeff) = model_mean_coeffs(s, n);
    let c = T::of_f64(coeff);
    let inv = T::of_f64(inv_sqrt_a);
    xn.zip_map(eps_pred, |x, e| (x - e * c) * inv)
}

/// Coefficients `(1/sqrt(alpha_n), beta_n / sqrt(1 - alpha_bar[n]))`.
pub fn model_mean_coeffs(s: &DiffusionSchedule, n: usize) -> (f64, f64) {
    (
        1.0 / s.alpha(n).sqrt(),
        s.beta(n) / (1.0 - s.alpha_bar(n)).sqrt(),
    )
}

/// Learned variance from the interpolation coefficient:
/// `exp(v * log beta_n + (1 - v) * log beta_tilde_clipped[n])`.
pub fn model_variance<T: Scalar>(
    v: &Tensor<T>,
    n: usize,
    s: &DiffusionSchedule,
) -> Result<Tensor<T>> {
    check_step(s, n)?;
    if !v
        .data()
        .iter()
        .all(|&x| x >= T::zero() && x <= T::one())
    {
        return Err(arg_err!("variance coefficient outside [0, 1]"));
    }
    let lb = s.log_beta(n);
    let lbt = s.log_beta_tilde_clipped(n);
    Ok(v.map(|vi| {
        let vi = vi.to_f64_val();
        T::of_f64((vi * lb + (1.0 - vi) * lbt).exp())
    }))
}

/// Clean-image estimate `(xn - sqrt(1 - alpha_bar[n]) * eps) / sqrt(alpha_bar[n])`,
/// clamped to `[-1, 1]`.
pub fn predict_x0_from_eps<T: Scalar>(
    xn: &Tensor<T>,
    eps_pred: &Tensor<T>,
    n: usize,
    s: &DiffusionSchedule,
) -> Result<Tensor<T>> {
    check_step(s, n)?;
    if xn.shape() != eps_pred.shape() {
        return Err(shape_err!("xn {:?} vs eps {:?}", xn.shape(), eps_pred.shape()));
    }
    let ab = s.alpha_bar(n);
    let c = T::of_f64((1.0 - ab).sqrt());
    let inv = T::of_f64(1.0 / ab.sqrt());
    let one = T::one();
    xn.zip_map(eps_pred, |x, e| {
        let v = (x - e * c) * inv;
        if v < -one {
            -one
        } else if v > one {
            one
        } else {
            v
        }
    })
}

/// Reparameterized draw `mean + sqrt(var) * z`.
pub fn reverse_step<T: Scalar>(moments: &ReverseMoments<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    if moments.mean.shape() != z.shape() {
        return Err(shape_err!(
            "mean {:?} vs latent {:?}",
            moments.mean.shape(),
            z.shape()
        ));
    }
    if !moments.var.data().iter().all(|&v| v > T::zero()) {
        return Err(arg_err!("reverse step variance must be positive"));
    }
    let std = moments.var.map(|v| v.sqrt());
    let scaled = z.mul(&std)?;
    moments.mean.add(&scaled)
}

/// Standardized residual `(x_prev - mean) / max(sqrt(var), floor)`; the exact
/// inverse of [`reverse_step`] whenever the floor is inactive.
pub fn extract_latent<T: Scalar>(
    x_prev: &Tensor<T>,
    moments: &ReverseMoments<T>,
) -> Result<Tensor<T>> {
    if moments.mean.shape() != x_prev.shape() {
        return Err(shape_err!(
            "mean {:?} vs x_prev {:?}",
            moments.mean.shape(),
            x_prev.shape()
        ));
    }
    let floor = T::of_f64(LATENT_STD_FLOOR);
    let diff = x_prev.sub(&moments.mean)?;
    let z = diff.zip_map(&moments.var, |d, v| {
        let std = v.sqrt();
        d / if std < floor { floor } else { std }
    })?;
    if !z.is_all_finite() {
        return Err(Error::NonFinite(alloc::format!(
            "latent extraction produced non-finite values"
        )));
    }
    Ok(z)
}

/// Voxel-averaged KL divergence between two diagonal Gaussians:
/// `mean over voxels of 0.5 (log(var2/var1) + (var1 + (mu1-mu2)^2)/var2 - 1)`.
pub fn kl_normal<T: Scalar>(
    mu1: &Tensor<T>,
    var1: &Tensor<T>,
    mu2: &Tensor<T>,
    var2: &Tensor<T>,
) -> Result<Tensor<T>> {
    if mu1.shape() != mu2.shape() || mu1.shape() != var1.shape() || mu1.shape() != var2.shape() {
        return Err(shape_err!(
            "kl operands: mu1 {:?} var1 {:?} mu2 {:?} var2 {:?}",
            mu1.shape(),
            var1.shape(),
            mu2.shape(),
            var2.shape()
        ));
    }
    if !var1.data().iter().all(|&v| v > T::zero()) || !var2.data().iter().all(|&v| v > T::zero()) {
        return Err(arg_err!("kl variances must be positive"));
    }
    let half = T::of_f64(0.5);
    // elementwise expansion, then deterministic mean
    let data: Vec<T> = mu1
        .data()
        .iter()
        .zip(var1.data().iter())
        .zip(mu2.data().iter().zip(var2.data().iter()))
        .map(|((&m1, &v1), (&m2, &v2))| {
            let d = m1 - m2;
            half * ((v2 / v1).ln() + (v1 + d * d) / v2 - T::one())
        })
        .collect();
    let acc = Tensor::from_vec(mu1.shape(), data)?;
    Ok(Tensor::scalar(acc.mean()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::DiffusionSchedule;
    use alloc::vec;

    fn toy() -> DiffusionSchedule {
        DiffusionSchedule::from_betas(vec![0.1, 0.2, 0.3, 0.4]).unwrap()
    }

    fn c<T: Scalar>(v: f64) -> Tensor<T> {
        Tensor::full(&[2, 2], T::of_f64(v))
    }

    #[test]
    fn q_sample_toy_values() {
        let s = toy();
        let x0 = c::<f64>(1.0);
        let z = c::<f64>(0.0);
        let y = q_sample(&x0, 2, &z, &s).unwrap();
        assert!((y.data()[0] - 0.8485281374238570).abs() < 1e-12);

        let y2 = q_sample(&c::<f64>(0.0), 2, &c::<f64>(1.0), &s).unwrap();
        assert!((y2.data()[0] - 0.5291502622129181).abs() < 1e-12);
    }

    #[test]
    fn q_sample_rejects_bad_step() {
        let s = toy();
        assert!(q_sample(&c::<f64>(0.0), 0, &c::<f64>(0.0), &s).is_err());
        assert!(q_sample(&c::<f64>(0.0), 5, &c::<f64>(0.0), &s).is_err());
    }

    #[test]
    fn posterior_mean_toy_value() {
        let s = toy();
        let m = posterior_moments(&c::<f64>(0.0), &c::<f64>(0.5291502622129181), 2, &s).unwrap();
        assert!((m.mean.data()[0] - 0.1690308509457033).abs() < 1e-9);
        assert!((m.var.data()[0] - 0.1 / 0.28 * 0.2).abs() < 1e-12);
    }

    #[test]
    fn posterior_mean_at_step_one_is_x0() {
        let s = toy();
        let x0 = Tensor::<f64>::from_vec(&[3], vec![0.3, -0.2, 0.9]).unwrap();
        let xn = Tensor::<f64>::from_vec(&[3], vec![0.5, 0.1, -0.4]).unwrap();
        let m = posterior_moments(&x0, &xn, 1, &s).unwrap();
        assert!(m.mean.max_abs_diff(&x0).unwrap() < 1e-12);
        assert_eq!(m.var.data()[0], 0.0);
    }

    #[test]
    fn model_mean_toy_value_and_identity() {
        let s = toy();
        // hand value: xn = 0.5291503, eps = 1, n = 2
        let mm = model_mean(&c::<f64>(0.5291502622129181), &c::<f64>(1.0), 2, &s).unwrap();
        assert!((mm.data()[0] - 0.1690308509457033).abs() < 1e-9);

        // with the true eps, model mean equals the posterior mean of the true x0
        let x0 = Tensor::<f64>::from_vec(&[4], vec![0.3, -0.5, 0.8, 0.0]).unwrap();
        let eps = Tensor::<f64>::from_vec(&[4], vec![0.7, -1.1, 0.2, 1.5]).unwrap();
        for n in 1..=4 {
            let xn = q_sample(&x0, n, &eps, &s).unwrap();
            let mm = model_mean(&xn, &eps, n, &s).unwrap();
            let pm = posterior_moments(&x0, &xn, n, &s).unwrap();
            assert!(mm.max_abs_diff(&pm.mean).unwrap() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn model_variance_endpoints_and_midpoint() {
        let s = toy();
        let v1 = model_variance(&c::<f64>(1.0), 2, &s).unwrap();
        assert!((v1.data()[0] - 0.2).abs() < 1e-12);
        let v0 = model_variance(&c::<f64>(0.0), 2, &s).unwrap();
        assert!((v0.data()[0] - 0.0714285714285714).abs() < 1e-12);
        let vh = model_variance(&c::<f64>(0.5), 2, &s).unwrap();
        assert!((vh.data()[0] - (0.2f64 * 0.0714285714285714).sqrt()).abs() < 1e-9);
        assert!(model_variance(&c::<f64>(1.5), 2, &s).is_err());
    }

    #[test]
    fn predict_x0_inverts_q_sample() {
        let s = toy();
        let x0 = Tensor::<f64>::from_fn(&[8], |i| (i as f64 / 7.0) - 0.5);
        let eps = Tensor::<f64>::from_fn(&[8], |i| ((i * 3 % 7) as f64 - 3.0) * 0.4);
        for n in 1..=4 {
            let xn = q_sample(&x0, n, &eps, &s).unwrap();
            let rec = predict_x0_from_eps(&xn, &eps, n, &s).unwrap();
            assert!(rec.max_abs_diff(&x0).unwrap() < 1e-6, "n={n}");
        }
        // constant xn = sqrt(alpha_bar), eps = 0 -> 1
        let xn = c::<f64>(s.alpha_bar(3).sqrt());
        let rec = predict_x0_from_eps(&xn, &c::<f64>(0.0), 3, &s).unwrap();
        assert!((rec.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reverse_step_and_extract_are_inverse() {
        let s = toy();
        let m = posterior_moments(&c::<f64>(0.0), &c::<f64>(0.5291502622129181), 2, &s).unwrap();
        let one = c::<f64>(1.0);
        let x = reverse_step(&m, &one).unwrap();
        assert!((x.data()[0] - 0.4362920928581277).abs() < 1e-9);
        let z = extract_latent(&x, &m).unwrap();
        assert!(z.max_abs_diff(&one).unwrap() < 1e-9);

        // zero latent returns the mean; extracting the mean returns zero
        let x0 = reverse_step(&m, &c::<f64>(0.0)).unwrap();
        assert!(x0.max_abs_diff(&m.mean).unwrap() < 1e-12);
        let z0 = extract_latent(&m.mean.clone(), &m).unwrap();
        assert!(z0.max_abs_diff(&c::<f64>(0.0)).unwrap() < 1e-12);
    }

    #[test]
    fn reverse_step_rejects_nonpositive_variance() {
        let m = ReverseMoments {
            mean: c::<f64>(0.0),
            var: c::<f64>(0.0),
        };
        assert!(reverse_step(&m, &c::<f64>(1.0)).is_err());
    }

    #[test]
    fn kl_normal_hand_values() {
        let z = c::<f64>(0.0);
        let o = c::<f64>(1.0);
        let same = kl_normal(&z, &o, &z, &o).unwrap();
        assert!(same.item().abs() < 1e-15);

        let shifted = kl_normal(&z, &o, &o, &o).unwrap();
        assert!((shifted.item() - 0.5).abs() < 1e-12);

        let e2 = c::<f64>(core::f64::consts::E.powi(2));
        let wide = kl_normal(&z, &o, &z, &e2).unwrap();
        assert!((wide.item() - 0.5676676416183064).abs() < 1e-12);

        assert!(kl_normal(&z, &z, &z, &o).is_err());
    }

    #[test]
    fn forward_chain_zero_noise_limit_and_determinism() {
        let s = toy();
        let x0 = Tensor::<f32>::from_fn(&[4], |i| i as f32 * 0.1);
        let a = forward_chain(&x0, &s, 99);
        let b = forward_chain(&x0, &s, 99);
        for (ta, tb) in a.iter().zip(b.iter()) {
            assert_eq!(ta, tb);
        }
        let c2 = forward_chain(&x0, &s, 100);
        assert!(a[0].max_abs_diff(&c2[0]).unwrap() > 0.0);
    }
}
