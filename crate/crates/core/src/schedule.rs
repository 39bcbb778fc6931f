//! Noise schedules and timestep respacing.
//!
//! A schedule over `N` steps stores, per step `n` in `1..=N` (1-based):
//! `beta[n]`, `alpha[n] = 1 - beta[n]`, the running product `alpha_bar[n]`,
//! the forward-posterior variance
//! `beta_tilde[n] = (1 - alpha_bar[n-1]) / (1 - alpha_bar[n]) * beta[n]`
//! (zero at `n = 1` since `alpha_bar[0] = 1`), and log tables. The clipped
//! log table replaces the infinite `log beta_tilde[1]` with the `n = 2`
//! entry so learned-variance interpolation stays finite at the first step.
//!
//! All tables are kept in `f64`; respacing must preserve `alpha_bar` at kept
//! steps to 1e-12.

#[allow(unused_imports)]
use num_traits::Float as _;

use alloc::vec::Vec;

use crate::error::{arg_err, Result};

/// Shape of the beta progression.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ScheduleKind {
    /// Betas interpolate `1e-4 * (1000/N)` to `0.02 * (1000/N)`, capped at 0.999.
    Linear,
    /// Squared-cosine `alpha_bar` profile with betas capped at 0.999.
    Cosine,
}

/// Precomputed diffusion tables for `N` steps.
#[derive(Clone, Debug)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
    log_beta: Vec<f64>,
    log_beta_tilde_clipped: Vec<f64>,
}

/// Kept original timesteps `s_1 < ... < s_K` of a respaced schedule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimestepMap {
    kept: Vec<usize>,
}

impl TimestepMap {
    /// Original timestep for respaced index `k` in `1..=K`.
    pub fn original(&self, k: usize) -> usize {
        self.kept[k - 1]
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }
}

impl DiffusionSchedule {
    /// Builds all tables from raw betas. Every beta must lie in (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(arg_err!("schedule needs at least one step"));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(arg_err!("beta[{}] = {b} outside (0, 1)", i + 1));
            }
        }
        let n = betas.len();
        let alpha: Vec<f64> = betas.iter().map(|&b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(n);
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let mut beta_tilde = Vec::with_capacity(n);
        for i in 0..n {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            beta_tilde.push((1.0 - prev) / (1.0 - alpha_bar[i]) * betas[i]);
        }
        let log_beta: Vec<f64> = betas.iter().map(|&b| b.ln()).collect();
        let mut log_beta_tilde_clipped: Vec<f64> = beta_tilde.iter().map(|&b| b.ln()).collect();
        log_beta_tilde_clipped[0] = if n > 1 {
            beta_tilde[1].ln()
        } else {
            // One-step schedule has no second entry; beta is the only finite
            // stand-in.
            betas[0].ln()
        };
        debug_assert!(log_beta.iter().all(|l| l.is_finite()));
        debug_assert!(log_beta_tilde_clipped.iter().all(|l| l.is_finite()));
        Ok(Self {
            beta: betas,
            alpha,
            alpha_bar,
            beta_tilde,
            log_beta,
            log_beta_tilde_clipped,
        })
    }

    /// Standard schedule of the given kind. Requires `n >= 2`.
    pub fn new(kind: ScheduleKind, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(arg_err!("schedule length {n} < 2"));
        }
        let betas = match kind {
            ScheduleKind::Linear => {
                let scale = 1000.0 / n as f64;
                let (lo, hi) = (1e-4 * scale, 0.02 * scale);
                (0..n)
                    .map(|i| {
                        let t = i as f64 / (n - 1) as f64;
                        (lo + (hi - lo) * t).min(0.999)
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| {
                    ((t / n as f64 + s) / (1.0 + s) * core::f64::consts::FRAC_PI_2)
                        .cos()
                        .powi(2)
                };
                let f0 = f(0.0);
                (1..=n)
                    .map(|i| {
                        let ab = f(i as f64) / f0;
                        let ab_prev = f((i - 1) as f64) / f0;
                        (1.0 - ab / ab_prev).min(0.999)
                    })
                    .collect()
            }
        };
        Self::from_betas(betas)
    }

    /// Number of steps `N`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// `beta[n]`, `n` in `1..=N`.
    pub fn beta(&self, n: usize) -> f64 {
        self.beta[n - 1]
    }

    pub fn alpha(&self, n: usize) -> f64 {
        self.alpha[n - 1]
    }

    /// Cumulative `alpha_bar[n]`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, n: usize) -> f64 {
        if n == 0 {
            1.0
        } else {
            self.alpha_bar[n - 1]
        }
    }

    /// Forward-posterior variance; zero at `n = 1`.
    pub fn beta_tilde(&self, n: usize) -> f64 {
        self.beta_tilde[n - 1]
    }

    pub fn log_beta(&self, n: usize) -> f64 {
        self.log_beta[n - 1]
    }

    /// Log posterior variance with the `n = 1` entry replaced by `n = 2`'s.
    pub fn log_beta_tilde_clipped(&self, n: usize) -> f64 {
        self.log_beta_tilde_clipped[n - 1]
    }

    pub fn contains_step(&self, n: usize) -> bool {
        n >= 1 && n <= self.len()
    }

    /// Compresses to `K` kept steps, evenly spaced and always including `N`.
    ///
    /// The respaced schedule satisfies `alpha_bar'[k] = alpha_bar[s_k]`
    /// exactly up to rounding, because `beta'[k] = 1 - alpha_bar[s_k] /
    /// alpha_bar[s_{k-1}]` telescopes.
    pub fn respace(&self, k: usize) -> Result<(Self, TimestepMap)> {
        let n = self.len();
        if k < 1 || k > n {
            return Err(arg_err!("respace target {k} outside 1..={n}"));
        }
        let mut kept = Vec::with_capacity(k);
        for j in 1..=k {
            let s = ((j as f64 * n as f64) / k as f64).round() as usize;
            kept.push(s.clamp(1, n));
        }
        debug_assert!(kept.windows(2).all(|w| w[0] < w[1]), "kept steps not increasing");
        debug_assert_eq!(*kept.last().unwrap(), n);
        let mut betas = Vec::with_capacity(k);
        let mut prev_bar = 1.0;
        for &s in &kept {
            let bar = self.alpha_bar(s);
            betas.push(1.0 - bar / prev_bar);
            prev_bar = bar;
        }
        let respaced = Self::from_betas(betas)?;
        Ok((respaced, TimestepMap { kept }))
    }
}
