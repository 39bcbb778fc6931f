//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Tape`] records every primitive application in order; [`Var`] is an
//! index into that record. Calling [`Tape::backward`] on a scalar output
//! walks the record in reverse and accumulates gradients for every node that
//! (transitively) depends on a parameter leaf.
//!
//! Differentiable primitives: add, sub, mul, div, scalar affine, neg, abs,
//! exp, log, sqrt, tanh, sigmoid, silu, clamp-min, sum, mean, reshape,
//! permute, concat, slice, batched matmul, softmax (last axis), conv3d,
//! group norm, nearest-neighbor up/down-sampling by 2, cyclic spatial roll,
//! channel/per-sample/trailing broadcast adds, and per-sample affine
//! rescaling. `stop_grad` blocks flow without copying.

pub(crate) mod kernels;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{strides_of, Tensor};

use kernels::*;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    #[inline]
    fn i(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Abs,
    Exp,
    Log,
    Sqrt,
    Tanh,
    Sigmoid,
    Silu,
}

enum Op<T: Scalar> {
    Leaf,
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    ClampMin {
        x: Var,
        min: f64,
    },
    AddScalar {
        x: Var,
        #[allow(dead_code)]
        c: f64,
    },
    MulScalar {
        x: Var,
        c: f64,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    Softmax(Var),
    Conv3d {
        x: Var,
        k: Var,
        dims: ConvDims,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Upsample2x(Var),
    Downsample2x(Var),
    AddChan {
        x: Var,
        b: Var,
    },
    AddChanPerSample {
        x: Var,
        b: Var,
    },
    AddTrailing {
        x: Var,
        b: Var,
    },
    PerSampleAffine {
        x: Var,
        scale: Vec<T>,
        #[allow(dead_code)]
        bias: Vec<T>,
    },
    Roll {
        x: Var,
        shift: [i64; 3],
    },
    StopGrad(#[allow(dead_code)] Var),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation; owns all intermediate values.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the output w.r.t. `v`, if `v` was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.i()).and_then(|g| g.as_ref())
    }

    /// Gradient of the output w.r.t. `v`; zeros when `v` was not reached.
    pub fn wrt_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        match self.wrt(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value held by a node.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.i()].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(idx)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.i()].needs_grad)
    }

    /// Constant input; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input; `backward` produces a gradient for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf with explicit gradient tracking flag.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let xs = self.value(x);
        let value = match kind {
            UnaryKind::Neg => xs.map(|v| -v),
            UnaryKind::Abs => xs.map(|v| v.abs()),
            UnaryKind::Exp => xs.map(|v| v.exp()),
            UnaryKind::Log => xs.map(|v| v.ln()),
            UnaryKind::Sqrt => xs.map(|v| v.sqrt()),
            UnaryKind::Tanh => xs.map(|v| v.tanh()),
            UnaryKind::Sigmoid => xs.map(sigmoid),
            UnaryKind::Silu => xs.map(|v| v * sigmoid(v)),
        };
        let ng = self.needs(&[x]);
        self.push(value, Op::Unary { kind, x }, ng)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Abs, x)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Silu, x)
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        let m = T::of_f64(min);
        let value = self.value(x).map(|v| if v < m { m } else { v });
        let ng = self.needs(&[x]);
        self.push(value, Op::ClampMin { x, min }, ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let cv = T::of_f64(c);
        let value = self.value(x).map(|v| v + cv);
        let ng = self.needs(&[x]);
        self.push(value, Op::AddScalar { x, c }, ng)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let cv = T::of_f64(c);
        let value = self.value(x).map(|v| v * cv);
        let ng = self.needs(&[x]);
        self.push(value, Op::MulScalar { x, c }, ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(&[x]);
        self.push(value, Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let ng = self.needs(&[x]);
        self.push(value, Op::MeanAll(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.value(x);
        if perm.len() != xs.shape().len() {
            return Err(shape_err!(
                "permutation {perm:?} does not match rank of {:?}",
                xs.shape()
            ));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(arg_err!("invalid permutation {perm:?}"));
            }
            seen[p] = true;
        }
        let (data, shape) = permute_forward(xs.data(), xs.shape(), perm);
        let value = Tensor::from_vec(&shape, data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            ng,
        ))
    }

    /// Batched matmul over the last two axes. Leading axes must match, or
    /// `b` may be rank-2 and shared across all lead batches of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let Some((lead, m, k, n, shared)) = matmul_dims(&ash, &bsh) else {
            return Err(shape_err!("matmul operands {ash:?} x {bsh:?}"));
        };
        let data = matmul_batched(
            self.value(a).data(),
            self.value(b).data(),
            lead,
            m,
            k,
            n,
            shared,
        );
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let value = Tensor::from_vec(&out_shape, data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Matmul { a, b }, ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        let row = *xs
            .shape()
            .last()
            .ok_or_else(|| arg_err!("softmax needs rank >= 1"))?;
        let data = softmax_forward(xs.data(), row);
        let value = Tensor::from_vec(xs.shape(), data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Softmax(x), ng))
    }

    /// Cross-correlation of `x: [B,C,D,H,W]` with `k: [F,C,kd,kh,kw]`.
    pub fn conv3d(&mut self, x: Var, k: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let (xsh, ksh) = (self.value(x).shape().to_vec(), self.value(k).shape().to_vec());
        let Some(dims) = ConvDims::infer(&xsh, &ksh, stride, pad) else {
            return Err(shape_err!(
                "conv3d input {xsh:?}, kernel {ksh:?}, stride {stride:?}, pad {pad:?}"
            ));
        };
        let data = conv3d_forward(self.value(x).data(), self.value(k).data(), &dims);
        let shape = [
            dims.batch,
            dims.c_out,
            dims.out_sp[0],
            dims.out_sp[1],
            dims.out_sp[2],
        ];
        let value = Tensor::from_vec(&shape, data)?;
        let ng = self.needs(&[x, k]);
        Ok(self.push(value, Op::Conv3d { x, k, dims }, ng))
    }

    /// Group normalization over `[B, C, spatial...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let xsh = self.value(x).shape().to_vec();
        if xsh.len() < 2 {
            return Err(shape_err!("group_norm input must be [B,C,...], got {xsh:?}"));
        }
        let (b, c) = (xsh[0], xsh[1]);
        if groups == 0 || c % groups != 0 {
            return Err(arg_err!("channels {c} not divisible by groups {groups}"));
        }
        let spatial: usize = xsh[2..].iter().product::<usize>().max(1);
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err!(
                "group_norm affine must be [{c}], got gamma {:?} beta {:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            ));
        }
        let (data, mean, rstd) = group_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            b,
            c,
            spatial,
            groups,
            eps,
        );
        let value = Tensor::from_vec(&xsh, data)?;
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            ng,
        ))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ash, bsh) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if ash.len() != bsh.len() || axis >= ash.len() {
            return Err(shape_err!("concat {ash:?} + {bsh:?} on axis {axis}"));
        }
        for (i, (&ae, &be)) in ash.iter().zip(bsh.iter()).enumerate() {
            if i != axis && ae != be {
                return Err(shape_err!("concat {ash:?} + {bsh:?} on axis {axis}"));
            }
        }
        let (data, shape) = concat_forward(self.value(a).data(), &ash, self.value(b).data(), &bsh, axis);
        let value = Tensor::from_vec(&shape, data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b, axis }, ng))
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xsh = self.value(x).shape().to_vec();
        if axis >= xsh.len() || start + len > xsh[axis] || len == 0 {
            return Err(shape_err!(
                "slice [{start}..{}) on axis {axis} of {xsh:?}",
                start + len
            ));
        }
        let (data, shape) = slice_forward(self.value(x).data(), &xsh, axis, start, len);
        let value = Tensor::from_vec(&shape, data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Slice { x, axis, start, len }, ng))
    }

    /// Nearest-neighbor upsampling by 2 on all spatial axes of `[B,C,D,H,W]`.
    pub fn upsample_nearest_2x(&mut self, x: Var) -> Result<Var> {
        let xsh = self.value(x).shape().to_vec();
        if xsh.len() != 5 {
            return Err(shape_err!("upsample expects rank-5, got {xsh:?}"));
        }
        let (data, shape) = upsample2x_forward(self.value(x).data(), &xsh);
        let value = Tensor::from_vec(&shape, data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Upsample2x(x), ng))
    }

    /// Nearest-neighbor downsampling by 2 (keeps even indices).
    pub fn downsample_nearest_2x(&mut self, x: Var) -> Result<Var> {
        let xsh = self.value(x).shape().to_vec();
        if xsh.len() != 5 {
            return Err(shape_err!("downsample expects rank-5, got {xsh:?}"));
        }
        let shape = downsample2x_shape(&xsh);
        let data = downsample2x_forward(self.value(x).data(), &xsh);
        let value = Tensor::from_vec(&shape, data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Downsample2x(x), ng))
    }

    /// Adds `b: [C]` to every `[b, c, ...]` fiber of `x: [B, C, spatial...]`.
    pub fn add_chan(&mut self, x: Var, b: Var) -> Result<Var> {
        let xsh = self.value(x).shape().to_vec();
        let bsh = self.value(b).shape().to_vec();
        if xsh.len() < 2 || bsh != [xsh[1]] {
            return Err(shape_err!("add_chan x {xsh:?}, bias {bsh:?}"));
        }
        let spatial: usize = xsh[2..].iter().product::<usize>().max(1);
        let c = xsh[1];
        let bv = self.value(b).data().to_vec();
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(xv.len());
        for chunk in xv.chunks(c * spatial) {
            for (ci, sub) in chunk.chunks(spatial).enumerate() {
                let add = bv[ci];
                data.extend(sub.iter().map(|&v| v + add));
            }
        }
        let value = Tensor::from_vec(&xsh, data)?;
        let ng = self.needs(&[x, b]);
        Ok(self.push(value, Op::AddChan { x, b }, ng))
    }

    /// Adds `b: [B, C]` per sample and channel to `x: [B, C, spatial...]`.
    pub fn add_chan_per_sample(&mut self, x: Var, b: Var) -> Result<Var> {
        let xsh = self.value(x).shape().to_vec();
        let bsh = self.value(b).shape().to_vec();
        if xsh.len() < 2 || bsh != [xsh[0], xsh[1]] {
            return Err(shape_err!("add_chan_per_sample x {xsh:?}, bias {bsh:?}"));
        }
        let spatial: usize = xsh[2..].iter().product::<usize>().max(1);
        let bv = self.value(b).data().to_vec();
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(xv.len());
        for (bc, chunk) in xv.chunks(spatial).enumerate() {
            let add = bv[bc];
            data.extend(chunk.iter().map(|&v| v + add));
        }
        let value = Tensor::from_vec(&xsh, data)?;
        let ng = self.needs(&[x, b]);
        Ok(self.push(value, Op::AddChanPerSample { x, b }, ng))
    }

    /// Adds `b` whose shape equals a trailing suffix of `x`'s shape.
    pub fn add_trailing(&mut self, x: Var, b: Var) -> Result<Var> {
        let xsh = self.value(x).shape().to_vec();
        let bsh = self.value(b).shape().to_vec();
        if bsh.len() > xsh.len() || xsh[xsh.len() - bsh.len()..] != bsh[..] {
            return Err(shape_err!("add_trailing x {xsh:?}, bias {bsh:?}"));
        }
        let blen: usize = bsh.iter().product();
        let bv = self.value(b).data().to_vec();
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(xv.len());
        for chunk in xv.chunks(blen) {
            data.extend(chunk.iter().zip(bv.iter()).map(|(&v, &a)| v + a));
        }
        let value = Tensor::from_vec(&xsh, data)?;
        let ng = self.needs(&[x, b]);
        Ok(self.push(value, Op::AddTrailing { x, b }, ng))
    }

    /// `y[s, ...] = x[s, ...] * scale[s] + bias[s]` with constant per-sample
    /// coefficients (leading axis indexes samples).
    pub fn per_sample_affine(&mut self, x: Var, scale: &[f64], bias: &[f64]) -> Result<Var> {
        let xsh = self.value(x).shape().to_vec();
        if xsh.is_empty() || scale.len() != xsh[0] || bias.len() != xsh[0] {
            return Err(shape_err!(
                "per_sample_affine x {xsh:?} with {} scales / {} biases",
                scale.len(),
                bias.len()
            ));
        }
        let per: usize = xsh[1..].iter().product::<usize>().max(1);
        let scale_t: Vec<T> = scale.iter().map(|&s| T::of_f64(s)).collect();
        let bias_t: Vec<T> = bias.iter().map(|&s| T::of_f64(s)).collect();
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(xv.len());
        for (s, chunk) in xv.chunks(per).enumerate() {
            let (sc, bi) = (scale_t[s], bias_t[s]);
            data.extend(chunk.iter().map(|&v| v * sc + bi));
        }
        let value = Tensor::from_vec(&xsh, data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(
            value,
            Op::PerSampleAffine {
                x,
                scale: scale_t,
                bias: bias_t,
            },
            ng,
        ))
    }

    /// Cyclic shift of the three spatial axes of `[B,C,D,H,W]`.
    pub fn roll_spatial(&mut self, x: Var, shift: [i64; 3]) -> Result<Var> {
        let xsh = self.value(x).shape().to_vec();
        if xsh.len() != 5 {
            return Err(shape_err!("roll expects rank-5, got {xsh:?}"));
        }
        let data = roll_forward(self.value(x).data(), &xsh, shift);
        let value = Tensor::from_vec(&xsh, data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Roll { x, shift }, ng))
    }

    /// Identity value that blocks gradient flow.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGrad(x), false)
    }

    /// Reverse pass from a scalar output. Rejects non-scalar outputs.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.value(out).numel() != 1 {
            return Err(Error::InvalidArgument(alloc::format!(
                "backward requires a scalar output, got shape {:?}",
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[out.i()] = Some(vec![T::one()]);

        for idx in (0..=out.i()).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let dy = grads[idx].as_ref().unwrap().clone();
            self.step_backward(idx, &dy, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|v| Tensor::from_vec(self.nodes[i].value.shape(), v).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn step_backward(&self, idx: usize, dy: &[T], grads: &mut Vec<Option<Vec<T>>>) {
        let node = &self.nodes[idx];
        let acc = |grads: &mut Vec<Option<Vec<T>>>, v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.i()].needs_grad {
                return;
            }
            let numel = self.nodes[v.i()].value.numel();
            let slot = grads[v.i()].get_or_insert_with(|| vec![T::zero(); numel]);
            f(slot);
        };
        let axpy = |dst: &mut [T], src: &[T]| {
            for (d, &s) in dst.iter_mut().zip(src.iter()) {
                *d += s;
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::StopGrad(_) => {}
            Op::Unary { kind, x } => {
                let xv = self.nodes[x.i()].value.data();
                let yv = node.value.data();
                acc(grads, *x, &mut |g| match kind {
                    UnaryKind::Neg => {
                        for (gi, &d) in g.iter_mut().zip(dy.iter()) {
                            *gi -= d;
                        }
                    }
                    UnaryKind::Abs => {
                        for ((gi, &d), &xi) in g.iter_mut().zip(dy.iter()).zip(xv.iter()) {
                            let s = if xi > T::zero() {
                                T::one()
                            } else if xi < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            *gi += d * s;
                        }
                    }
                    UnaryKind::Exp => {
                        for ((gi, &d), &yi) in g.iter_mut().zip(dy.iter()).zip(yv.iter()) {
                            *gi += d * yi;
                        }
                    }
                    UnaryKind::Log => {
                        for ((gi, &d), &xi) in g.iter_mut().zip(dy.iter()).zip(xv.iter()) {
                            *gi += d / xi;
                        }
                    }
                    UnaryKind::Sqrt => {
                        let half = T::of_f64(0.5);
                        for ((gi, &d), &yi) in g.iter_mut().zip(dy.iter()).zip(yv.iter()) {
                            *gi += d * half / yi;
                        }
                    }
                    UnaryKind::Tanh => {
                        for ((gi, &d), &yi) in g.iter_mut().zip(dy.iter()).zip(yv.iter()) {
                            *gi += d * (T::one() - yi * yi);
                        }
                    }
                    UnaryKind::Sigmoid => {
                        for ((gi, &d), &yi) in g.iter_mut().zip(dy.iter()).zip(yv.iter()) {
                            *gi += d * yi * (T::one() - yi);
                        }
                    }
                    UnaryKind::Silu => {
                        for ((gi, &d), &xi) in g.iter_mut().zip(dy.iter()).zip(xv.iter()) {
                            let s = sigmoid(xi);
                            *gi += d * s * (T::one() + xi * (T::one() - s));
                        }
                    }
                });
            }
            Op::ClampMin { x, min } => {
                let m = T::of_f64(*min);
                let xv = self.nodes[x.i()].value.data();
                acc(grads, *x, &mut |g| {
                    for ((gi, &d), &xi) in g.iter_mut().zip(dy.iter()).zip(xv.iter()) {
                        if xi >= m {
                            *gi += d;
                        }
                    }
                });
            }
            Op::AddScalar { x, .. } => acc(grads, *x, &mut |g| axpy(g, dy)),
            Op::MulScalar { x, c } => {
                let cv = T::of_f64(*c);
                acc(grads, *x, &mut |g| {
                    for (gi, &d) in g.iter_mut().zip(dy.iter()) {
                        *gi += d * cv;
                    }
                });
            }
            Op::Add(a, b) => {
                acc(grads, *a, &mut |g| axpy(g, dy));
                acc(grads, *b, &mut |g| axpy(g, dy));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |g| axpy(g, dy));
                acc(grads, *b, &mut |g| {
                    for (gi, &d) in g.iter_mut().zip(dy.iter()) {
                        *gi -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.i()].value.data();
                let bv = self.nodes[b.i()].value.data();
                acc(grads, *a, &mut |g| {
                    for ((gi, &d), &x) in g.iter_mut().zip(dy.iter()).zip(bv.iter()) {
                        *gi += d * x;
                    }
                });
                acc(grads, *b, &mut |g| {
                    for ((gi, &d), &x) in g.iter_mut().zip(dy.iter()).zip(av.iter()) {
                        *gi += d * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = self.nodes[b.i()].value.data();
                let yv = node.value.data();
                acc(grads, *a, &mut |g| {
                    for ((gi, &d), &x) in g.iter_mut().zip(dy.iter()).zip(bv.iter()) {
                        *gi += d / x;
                    }
                });
                acc(grads, *b, &mut |g| {
                    for (((gi, &d), &bi), &yi) in
                        g.iter_mut().zip(dy.iter()).zip(bv.iter()).zip(yv.iter())
                    {
                        *gi -= d * yi / bi;
                    }
                });
            }
            Op::SumAll(x) => {
                let d = dy[0];
                acc(grads, *x, &mut |g| {
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.i()].value.numel();
                let d = dy[0] / T::of_f64(n as f64);
                acc(grads, *x, &mut |g| {
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                });
            }
            Op::Reshape(x) => acc(grads, *x, &mut |g| axpy(g, dy)),
            Op::Permute { x, perm } => {
                let inv = invert_perm(perm);
                let (dxp, _) = permute_forward(dy, node.value.shape(), &inv);
                acc(grads, *x, &mut |g| axpy(g, &dxp));
            }
            Op::Matmul { a, b } => {
                let ash = self.nodes[a.i()].value.shape().to_vec();
                let bsh = self.nodes[b.i()].value.shape().to_vec();
                let (lead, m, k, n, shared) = matmul_dims(&ash, &bsh).expect("validated");
                let av = self.nodes[a.i()].value.data();
                let bv = self.nodes[b.i()].value.data();
                if self.nodes[a.i()].needs_grad {
                    let mut da = vec![T::zero(); av.len()];
                    for g in 0..lead {
                        let bb = if shared { bv } else { &bv[g * k * n..(g + 1) * k * n] };
                        let bt = transpose2d(bb, k, n);
                        matmul_acc(
                            &dy[g * m * n..(g + 1) * m * n],
                            &bt,
                            m,
                            n,
                            k,
                            &mut da[g * m * k..(g + 1) * m * k],
                            false,
                        );
                    }
                    acc(grads, *a, &mut |g| axpy(g, &da));
                }
                if self.nodes[b.i()].needs_grad {
                    let mut db = vec![T::zero(); bv.len()];
                    for g in 0..lead {
                        let at = transpose2d(&av[g * m * k..(g + 1) * m * k], m, k);
                        let dst = if shared {
                            &mut db[..]
                        } else {
                            &mut db[g * k * n..(g + 1) * k * n]
                        };
                        matmul_acc(&at, &dy[g * m * n..(g + 1) * m * n], k, m, n, dst, true);
                    }
                    acc(grads, *b, &mut |g| axpy(g, &db));
                }
            }
            Op::Softmax(x) => {
                let row = *node.value.shape().last().unwrap();
                let dx = softmax_backward(node.value.data(), dy, row);
                acc(grads, *x, &mut |g| axpy(g, &dx));
            }
            Op::Conv3d { x, k, dims } => {
                let need_dx = self.nodes[x.i()].needs_grad;
                let need_dk = self.nodes[k.i()].needs_grad;
                let (dx, dk) = conv3d_backward(
                    self.nodes[x.i()].value.data(),
                    self.nodes[k.i()].value.data(),
                    dy,
                    dims,
                    need_dx,
                    need_dk,
                );
                if let Some(dx) = dx {
                    acc(grads, *x, &mut |g| axpy(g, &dx));
                }
                if let Some(dk) = dk {
                    acc(grads, *k, &mut |g| axpy(g, &dk));
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let xsh = self.nodes[x.i()].value.shape().to_vec();
                let (b, c) = (xsh[0], xsh[1]);
                let spatial: usize = xsh[2..].iter().product::<usize>().max(1);
                let (dx, dgamma, dbeta) = group_norm_backward(
                    self.nodes[x.i()].value.data(),
                    self.nodes[gamma.i()].value.data(),
                    dy,
                    mean,
                    rstd,
                    b,
                    c,
                    spatial,
                    *groups,
                );
                acc(grads, *x, &mut |g| axpy(g, &dx));
                acc(grads, *gamma, &mut |g| axpy(g, &dgamma));
                acc(grads, *beta, &mut |g| axpy(g, &dbeta));
            }
            Op::Concat { a, b, axis } => {
                let ash = self.nodes[a.i()].value.shape().to_vec();
                let bsh = self.nodes[b.i()].value.shape().to_vec();
                let osh = node.value.shape().to_vec();
                let (da, _) = slice_forward(dy, &osh, *axis, 0, ash[*axis]);
                let (db, _) = slice_forward(dy, &osh, *axis, ash[*axis], bsh[*axis]);
                acc(grads, *a, &mut |g| axpy(g, &da));
                acc(grads, *b, &mut |g| axpy(g, &db));
            }
            Op::Slice { x, axis, start, len } => {
                let xsh = self.nodes[x.i()].value.shape().to_vec();
                acc(grads, *x, &mut |g| {
                    slice_backward_acc(dy, &xsh, *axis, *start, *len, g);
                });
            }
            Op::Upsample2x(x) => {
                let xsh = self.nodes[x.i()].value.shape().to_vec();
                let dx = upsample2x_backward(dy, &xsh);
                acc(grads, *x, &mut |g| axpy(g, &dx));
            }
            Op::Downsample2x(x) => {
                let xsh = self.nodes[x.i()].value.shape().to_vec();
                let dx = downsample2x_backward(dy, &xsh);
                acc(grads, *x, &mut |g| axpy(g, &dx));
            }
            Op::AddChan { x, b } => {
                acc(grads, *x, &mut |g| axpy(g, dy));
                let xsh = self.nodes[x.i()].value.shape().to_vec();
                let c = xsh[1];
                let spatial: usize = xsh[2..].iter().product::<usize>().max(1);
                acc(grads, *b, &mut |g| {
                    for chunk in dy.chunks(c * spatial) {
                        for (ci, sub) in chunk.chunks(spatial).enumerate() {
                            let mut s = T::zero();
                            for &v in sub {
                                s += v;
                            }
                            g[ci] += s;
                        }
                    }
                });
            }
            Op::AddChanPerSample { x, b } => {
                acc(grads, *x, &mut |g| axpy(g, dy));
                let xsh = self.nodes[x.i()].value.shape().to_vec();
                let spatial: usize = xsh[2..].iter().product::<usize>().max(1);
                acc(grads, *b, &mut |g| {
                    for (bc, chunk) in dy.chunks(spatial).enumerate() {
                        let mut s = T::zero();
                        for &v in chunk {
                            s += v;
                        }
                        g[bc] += s;
                    }
                });
            }
            Op::AddTrailing { x, b } => {
                acc(grads, *x, &mut |g| axpy(g, dy));
                let blen = self.nodes[b.i()].value.numel();
                acc(grads, *b, &mut |g| {
                    for chunk in dy.chunks(blen) {
                        for (gi, &v) in g.iter_mut().zip(chunk.iter()) {
                            *gi += v;
                        }
                    }
                });
            }
            Op::PerSampleAffine { x, scale, .. } => {
                let xsh = self.nodes[x.i()].value.shape().to_vec();
                let per: usize = xsh[1..].iter().product::<usize>().max(1);
                acc(grads, *x, &mut |g| {
                    for (s, (gc, dc)) in g.chunks_mut(per).zip(dy.chunks(per)).enumerate() {
                        let sc = scale[s];
                        for (gi, &d) in gc.iter_mut().zip(dc.iter()) {
                            *gi += d * sc;
                        }
                    }
                });
            }
            Op::Roll { x, shift } => {
                let inv = [-shift[0], -shift[1], -shift[2]];
                let dx = roll_forward(dy, node.value.shape(), inv);
                acc(grads, *x, &mut |g| axpy(g, &dx));
            }
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Row-major strides helper re-exported for window partition code.
pub fn tensor_strides(shape: &[usize]) -> Vec<usize> {
    strides_of(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient_is_2x() {
        let mut tape = Tape::new();
        let x = tape.param(t64(&[1], &[3.0]));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn product_sum_gradient_is_other_factor() {
        let mut tape = Tape::new();
        let x = tape.param(t64(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.constant(t64(&[3], &[4.0, 5.0, 6.0]));
        let p = tape.mul(x, y).unwrap();
        let s = tape.sum_all(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[4.0, 5.0, 6.0]);
        assert!(g.wrt(y).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t64(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn detached_leaf_gets_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t64(&[2], &[1.0, 2.0]));
        let d = tape.stop_grad(x);
        let s = tape.sum_all(d);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(x).is_none());
        assert_eq!(g.wrt_or_zeros(x, &[2]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn unreached_leaf_reports_zeros() {
        let mut tape = Tape::new();
        let x = tape.param(t64(&[1], &[1.0]));
        let z = tape.param(t64(&[2], &[5.0, 7.0]));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.wrt(z).is_none());
        assert_eq!(g.wrt_or_zeros(z, &[2]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn concat_slice_roundtrip_gradients() {
        let mut tape = Tape::new();
        let a = tape.param(t64(&[1, 2], &[1.0, 2.0]));
        let b = tape.param(t64(&[1, 3], &[3.0, 4.0, 5.0]));
        let c = tape.concat(a, b, 1).unwrap();
        let s = tape.slice_axis(c, 1, 1, 3).unwrap();
        let sum = tape.sum_all(s);
        let g = tape.backward(sum).unwrap();
        assert_eq!(g.wrt(a).unwrap().data(), &[0.0, 1.0]);
        assert_eq!(g.wrt(b).unwrap().data(), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn matmul_known_gradient() {
        // f = sum(A @ B), dA = row sums of B broadcast, dB = col sums of A.
        let mut tape = Tape::new();
        let a = tape.param(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum_all(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g.wrt(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn group_norm_rejects_indivisible_groups() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[1, 6, 2]));
        let g = tape.param(Tensor::full(&[6], 1.0));
        let b = tape.param(Tensor::zeros(&[6]));
        assert!(tape.group_norm(x, g, b, 4, 1e-5).is_err());
        assert!(tape.group_norm(x, g, b, 3, 1e-5).is_ok());
    }

    #[test]
    fn group_norm_constant_input_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full(&[2, 4, 3], 5.0));
        let gamma = tape.constant(Tensor::full(&[4], 1.0));
        let beta = tape.constant(Tensor::zeros(&[4]));
        let y = tape.group_norm(x, gamma, beta, 2, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn gamma_zero_returns_beta() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn(&[1, 2, 4], |i| i as f64));
        let gamma = tape.constant(Tensor::zeros(&[2]));
        let beta = tape.constant(Tensor::from_vec(&[2], vec![0.5, -1.5]).unwrap());
        let y = tape.group_norm(x, gamma, beta, 1, 1e-5).unwrap();
        let v = tape.value(y).data();
        assert!(v[..4].iter().all(|&x| (x - 0.5).abs() < 1e-12));
        assert!(v[4..].iter().all(|&x| (x + 1.5).abs() < 1e-12));
    }
}
