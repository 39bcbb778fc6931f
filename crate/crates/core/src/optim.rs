//! Stochastic optimizer with decoupled weight decay.

#[allow(unused_imports)]
use num_traits::Float as _;

use alloc::vec::Vec;

use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-parameter-set optimizer state: first/second moment accumulators and a
/// step counter, plus the hyper-parameters.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Scalar> {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    /// State for a parameter list, accumulators zeroed.
    pub fn new(params: &[Tensor<T>], learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn with_defaults(params: &[Tensor<T>]) -> Self {
        Self::new(params, 4e-5, 1e-3)
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.first_moment, &self.second_moment)
    }

    /// Restores accumulators (used when resuming from a checkpoint).
    pub fn restore(&mut self, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<()> {
        if m.len() != self.first_moment.len() || v.len() != self.second_moment.len() {
            return Err(arg_err!(
                "restore expects {} accumulator pairs, got {} / {}",
                self.first_moment.len(),
                m.len(),
                v.len()
            ));
        }
        for (cur, new) in self.first_moment.iter().zip(m.iter()) {
            if cur.shape() != new.shape() {
                return Err(shape_err!("moment shape {:?} vs {:?}", cur.shape(), new.shape()));
            }
        }
        self.step = step;
        self.first_moment = m;
        self.second_moment = v;
        Ok(())
    }
}

/// One update: bias-corrected moment estimates drive the adaptive step, and
/// decoupled weight decay `-lr * wd * theta` is added on top.
///
/// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta`
pub fn adamw_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(arg_err!(
            "parameter/gradient/state counts differ: {} / {} / {}",
            params.len(),
            grads.len(),
            state.first_moment.len()
        ));
    }
    for (p, g) in params.iter().zip(grads.iter()) {
        if p.shape() != g.shape() {
            return Err(shape_err!(
                "parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            ));
        }
    }
    state.step += 1;
    let t = state.step;
    let b1 = T::of_f64(state.beta1);
    let b2 = T::of_f64(state.beta2);
    let one_m_b1 = T::of_f64(1.0 - state.beta1);
    let one_m_b2 = T::of_f64(1.0 - state.beta2);
    let corr1 = T::of_f64(1.0 / (1.0 - state.beta1.powi(t as i32)));
    let corr2 = T::of_f64(1.0 / (1.0 - state.beta2.powi(t as i32)));
    let lr = T::of_f64(state.learning_rate);
    let lr_wd = T::of_f64(state.learning_rate * state.weight_decay);
    let eps = T::of_f64(state.epsilon);

    for i in 0..params.len() {
        let g = grads[i].data();
        let m_new: Vec<T> = state.first_moment[i]
            .data()
            .iter()
            .zip(g.iter())
            .map(|(&m, &gv)| m * b1 + gv * one_m_b1)
            .collect();
        let v_new: Vec<T> = state.second_moment[i]
            .data()
            .iter()
            .zip(g.iter())
            .map(|(&v, &gv)| v * b2 + gv * gv * one_m_b2)
            .collect();
        let updated: Vec<T> = params[i]
            .data()
            .iter()
            .zip(m_new.iter().zip(v_new.iter()))
            .map(|(&p, (&m, &v))| {
                let m_hat = m * corr1;
                let v_hat = v * corr2;
                p - lr * m_hat / (v_hat.sqrt() + eps) - lr_wd * p
            })
            .collect();
        state.first_moment[i] = Tensor::from_vec(params[i].shape(), m_new)?;
        state.second_moment[i] = Tensor::from_vec(params[i].shape(), v_new)?;
        params[i] = Tensor::from_vec(params[i].shape(), updated)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_only_decay() {
        let mut params = alloc::vec![Tensor::<f64>::scalar(1.0)];
        let grads = alloc::vec![Tensor::<f64>::scalar(0.0)];
        let mut state = OptimizerState::new(&params, 4e-5, 1e-3);
        adamw_step(&mut params, &grads, &mut state).unwrap();
        let expect = 1.0 - 4e-5 * 1e-3;
        assert!((params[0].item() - expect).abs() < 1e-16);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn constant_gradient_update_approaches_lr() {
        // With wd = 0 and a constant gradient, bias-corrected m_hat -> g and
        // v_hat -> g^2, so the step magnitude tends to lr * sign(g).
        let mut params = alloc::vec![Tensor::<f64>::scalar(0.0)];
        let grads = alloc::vec![Tensor::<f64>::scalar(-2.5)];
        let mut state = OptimizerState::new(&params, 1e-3, 0.0);
        let mut prev = params[0].item();
        let mut last_step = 0.0;
        for _ in 0..500 {
            adamw_step(&mut params, &grads, &mut state).unwrap();
            last_step = params[0].item() - prev;
            prev = params[0].item();
        }
        // gradient negative -> parameter increases by ~lr
        assert!((last_step - 1e-3).abs() < 1e-6, "step {last_step}");
    }

    #[test]
    fn two_steps_match_hand_evaluation() {
        let g1 = 0.5;
        let g2 = -0.25;
        let (lr, wd, b1, b2, eps) = (1e-2, 1e-2, 0.9, 0.999, 1e-8);
        let mut theta: f64 = 0.7;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in [g1, g2].iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - f64::powi(b1, t));
            let v_hat = v / (1.0 - f64::powi(b2, t));
            theta = theta - lr * m_hat / (v_hat.sqrt() + eps) - lr * wd * theta;
        }

        let mut params = alloc::vec![Tensor::<f64>::scalar(0.7)];
        let mut state = OptimizerState::new(&params, lr, wd);
        state.epsilon = eps;
        adamw_step(&mut params, &[Tensor::scalar(g1)], &mut state).unwrap();
        adamw_step(&mut params, &[Tensor::scalar(g2)], &mut state).unwrap();
        assert!((params[0].item() - theta).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = alloc::vec![Tensor::<f64>::zeros(&[2])];
        let grads = alloc::vec![Tensor::<f64>::zeros(&[3])];
        let mut state = OptimizerState::with_defaults(&params);
        assert!(adamw_step(&mut params, &grads, &mut state).is_err());
    }
}
