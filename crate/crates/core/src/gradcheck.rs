//! Finite-difference verification of tape gradients.

#[allow(unused_imports)]
use num_traits::Float as _;

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{arg_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A scalar-valued function rebuilt on a fresh tape per evaluation. The
/// closure receives parameter leaves in the same order as the input tensors.
pub trait ScalarFn<T: Scalar> {
    fn build(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var>;
}

impl<T: Scalar, F> ScalarFn<T> for F
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    fn build(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        self(tape, inputs)
    }
}

fn eval<T: Scalar>(f: &impl ScalarFn<T>, points: &[Tensor<T>]) -> Result<T> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f.build(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(arg_err!("grad_check function must be scalar-valued"));
    }
    let val = v.item();
    if !val.is_finite() {
        return Err(Error::NonFinite(alloc::format!(
            "function value {val} during gradient check"
        )));
    }
    Ok(val)
}

fn analytic_grads<T: Scalar>(f: &impl ScalarFn<T>, points: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f.build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(points.iter())
        .map(|(&v, p)| grads.wrt_or_zeros(v, p.shape()))
        .collect())
}

fn perturbed<T: Scalar>(points: &[Tensor<T>], which: usize, coord: usize, delta: T) -> Vec<Tensor<T>> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if i == which {
                let mut data = p.data().to_vec();
                data[coord] += delta;
                Tensor::from_vec(p.shape(), data).expect("same shape")
            } else {
                p.clone()
            }
        })
        .collect()
}

/// Relative error between analytic and central-difference derivatives:
/// `|a - n| / max(|a|, |n|, 1e-8)`.
fn rel_err<T: Scalar>(a: T, n: T) -> f64 {
    let (a, n) = (a.to_f64_val(), n.to_f64_val());
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Max relative error over every coordinate of every input tensor.
///
/// Central differences with the given step; the function must be evaluable at
/// all perturbed points.
pub fn grad_check<T: Scalar>(f: &impl ScalarFn<T>, points: &[Tensor<T>], step: f64) -> Result<f64> {
    let coords: Vec<Vec<usize>> = points.iter().map(|p| (0..p.numel()).collect()).collect();
    grad_check_coords(f, points, step, &coords)
}

/// Like [`grad_check`] but restricted to chosen coordinates per input, for
/// functions too expensive to probe exhaustively.
pub fn grad_check_coords<T: Scalar>(
    f: &impl ScalarFn<T>,
    points: &[Tensor<T>],
    step: f64,
    coords: &[Vec<usize>],
) -> Result<f64> {
    let analytic = analytic_grads(f, points)?;
    let h = T::of_f64(step);
    let two_h = 2.0 * step;
    let mut worst = 0.0f64;
    for (which, coord_list) in coords.iter().enumerate() {
        for &coord in coord_list {
            let plus = eval(f, &perturbed(points, which, coord, h))?;
            let minus = eval(f, &perturbed(points, which, coord, -h))?;
            let numeric = (plus.to_f64_val() - minus.to_f64_val()) / two_h;
            let err = rel_err(analytic[which].data()[coord], T::of_f64(numeric));
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// Compares analytic gradients from one engine precision against central
/// differences evaluated in `f64`, coordinate by coordinate. This is the
/// headroom mode: the reference difference quotient is computed in wide
/// precision so that the check measures gradient correctness rather than
/// evaluation roundoff.
///
/// The per-coordinate denominator is floored at a thousandth of that input's
/// largest gradient magnitude: coordinates whose true derivative is
/// negligible relative to the tensor's gradient scale carry only roundoff in
/// narrow precision and would otherwise dominate the ratio.
pub fn grad_check_vs_f64<T, Ff, Fd>(
    f_narrow: &Ff,
    f_wide: &Fd,
    points: &[Tensor<T>],
    step: f64,
    max_coords_per_input: usize,
) -> Result<f64>
where
    T: Scalar,
    Ff: ScalarFn<T>,
    Fd: ScalarFn<f64>,
{
    let analytic = analytic_grads(f_narrow, points)?;
    let wide_points: Vec<Tensor<f64>> = points.iter().map(|p| p.cast::<f64>()).collect();
    let h = step;
    let mut worst = 0.0f64;
    for which in 0..points.len() {
        let scale = analytic[which]
            .data()
            .iter()
            .map(|g| g.to_f64_val().abs())
            .fold(0.0f64, f64::max);
        let floor = (1e-3 * scale).max(1e-8);
        let n = points[which].numel();
        let stride = n.div_ceil(max_coords_per_input).max(1);
        let mut coord = 0;
        while coord < n {
            let plus = eval(f_wide, &perturbed(&wide_points, which, coord, h))?;
            let minus = eval(f_wide, &perturbed(&wide_points, which, coord, -h))?;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[which].data()[coord].to_f64_val();
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err > worst {
                worst = err;
            }
            coord += stride;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let f = |tape: &mut Tape<f64>, vars: &[Var]| {
            let c = tape.mul_scalar(vars[0], 3.5);
            Ok(tape.sum_all(c))
        };
        let x = Tensor::from_vec(&[4], alloc::vec![0.3, -1.0, 2.0, 0.7]).unwrap();
        let err = grad_check(&f, &[x], 1e-4).unwrap();
        assert!(err < 1e-10, "err {err}");
    }

    #[test]
    fn cubic_matches_taylor() {
        // f(x) = sum(x^3); analytic derivative at x=1 is 3, central
        // difference is 3 + step^2 (exact for a cubic).
        let f = |tape: &mut Tape<f64>, vars: &[Var]| {
            let sq = tape.mul(vars[0], vars[0])?;
            let cu = tape.mul(sq, vars[0])?;
            Ok(tape.sum_all(cu))
        };
        let x = Tensor::scalar(1.0f64);
        let step = 1e-4;
        let err = grad_check(&f, &[x], step).unwrap();
        // relative error should be ~ step^2 / 3
        assert!(err < 1e-7, "err {err}");
        assert!(err > 1e-10, "central difference should carry O(step^2) bias, err {err}");
    }

    #[test]
    fn non_finite_function_is_rejected() {
        let f = |tape: &mut Tape<f64>, vars: &[Var]| {
            let l = tape.log(vars[0]);
            Ok(tape.sum_all(l))
        };
        let x = Tensor::scalar(-1.0f64); // log of negative -> NaN
        assert!(grad_check(&f, &[x], 1e-5).is_err());
    }
}
