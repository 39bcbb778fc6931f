//! Conditional 3D U-shaped denoiser.
//!
//! Input is the noisy target patch concatenated channel-wise with the clean
//! condition patch. Residual conv blocks with group norm and SiLU run at each
//! resolution; a pair of windowed self-attention blocks (one plain, one with
//! a cyclic half-window shift) sits at the coarsest level. A sinusoidal
//! timestep embedding is projected and added per channel inside every
//! residual block. The two output channels are the noise prediction (raw)
//! and the variance coefficient squashed to `[0, 1]` with a logistic.

#[allow(unused_imports)]
use num_traits::Float as _;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::diffusion::DenoiserOutput;
use crate::error::{arg_err, shape_err, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DenoiserConfig {
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    pub window: [usize; 3],
    pub heads: usize,
    pub time_dim: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            channel_mults: vec![1, 2, 4],
            window: [4, 4, 4],
            heads: 2,
            time_dim: 64,
            in_channels: 2,
            out_channels: 2,
        }
    }
}

impl DenoiserConfig {
    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    fn width(&self, level: usize) -> usize {
        self.base_width * self.channel_mults[level]
    }

    /// Attention window clipped per axis to the coarsest feature-map extents.
    pub fn effective_window(&self, patch: [usize; 3]) -> [usize; 3] {
        let shift = self.levels() - 1;
        let mut eff = [0usize; 3];
        for a in 0..3 {
            eff[a] = self.window[a].min(patch[a] >> shift).max(1);
        }
        eff
    }

    /// Checks that a patch extent is compatible: divisible by the total
    /// downsampling factor and, at the coarsest level, by the clipped window.
    pub fn validate(&self, patch: [usize; 3]) -> Result<()> {
        if self.levels() == 0 || self.base_width == 0 {
            return Err(arg_err!("empty denoiser config"));
        }
        if self.time_dim % 2 != 0 || self.time_dim == 0 {
            return Err(arg_err!("time embedding width must be even and positive"));
        }
        let c_last = self.width(self.levels() - 1);
        if self.heads == 0 || c_last % self.heads != 0 {
            return Err(arg_err!(
                "heads {} must divide coarsest width {c_last}",
                self.heads
            ));
        }
        let factor = 1usize << (self.levels() - 1);
        for (a, &e) in patch.iter().enumerate() {
            if e == 0 || e % factor != 0 {
                return Err(arg_err!(
                    "patch extent {e} on axis {a} not divisible by {factor}"
                ));
            }
        }
        let eff = self.effective_window(patch);
        for a in 0..3 {
            let coarse = patch[a] >> (self.levels() - 1);
            if coarse % eff[a] != 0 {
                return Err(arg_err!(
                    "coarse extent {coarse} on axis {a} not divisible by window {}",
                    eff[a]
                ));
            }
        }
        Ok(())
    }
}

/// Named parameter collection in fixed construction order.
#[derive(Clone, Debug)]
pub struct DenoiserParams<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> DenoiserParams<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Replaces all tensors; names and shapes must match pairwise.
    pub fn replace_all(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(arg_err!(
                "expected {} parameter tensors, got {}",
                self.tensors.len(),
                tensors.len()
            ));
        }
        for (i, (cur, new)) in self.tensors.iter().zip(tensors.iter()).enumerate() {
            if cur.shape() != new.shape() {
                return Err(shape_err!(
                    "parameter '{}' has shape {:?}, replacement {:?}",
                    self.names[i],
                    cur.shape(),
                    new.shape()
                ));
            }
        }
        self.tensors = tensors;
        Ok(())
    }
}

struct ParamBuilder<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ParamBuilder<T> {
    fn new(seed: u64) -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: rng::stream(seed, &[0x1d]),
        }
    }

    fn push(&mut self, name: String, t: Tensor<T>) {
        self.names.push(name);
        self.tensors.push(t);
    }

    /// Fan-in scaled normal initialization.
    fn normal(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let std = (1.0 / fan_in as f64).sqrt();
        let t = rng::normal_tensor::<T>(&mut self.rng, shape)
            .map(|v| v * T::of_f64(std));
        self.push(name.into(), t);
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.push(name.into(), Tensor::zeros(shape));
    }

    fn ones(&mut self, name: &str, shape: &[usize]) {
        self.push(name.into(), Tensor::full(shape, T::one()));
    }

    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) {
        self.normal(
            &format!("{name}.w"),
            &[c_out, c_in, k, k, k],
            c_in * k * k * k,
        );
        self.zeros(&format!("{name}.b"), &[c_out]);
    }

    fn conv_zero(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) {
        self.zeros(&format!("{name}.w"), &[c_out, c_in, k, k, k]);
        self.zeros(&format!("{name}.b"), &[c_out]);
    }

    fn linear(&mut self, name: &str, k: usize, n: usize) {
        self.normal(&format!("{name}.w"), &[k, n], k);
        self.zeros(&format!("{name}.b"), &[n]);
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.ones(&format!("{name}.g"), &[c]);
        self.zeros(&format!("{name}.b"), &[c]);
    }

    fn res_block(&mut self, name: &str, c_in: usize, c_out: usize, time_dim: usize) {
        self.norm(&format!("{name}.norm1"), c_in);
        self.conv(&format!("{name}.conv1"), c_out, c_in, 3);
        self.linear(&format!("{name}.emb"), time_dim, c_out);
        self.norm(&format!("{name}.norm2"), c_out);
        self.conv(&format!("{name}.conv2"), c_out, c_out, 3);
        if c_in != c_out {
            self.conv(&format!("{name}.skip"), c_out, c_in, 1);
        }
    }

    fn attn_block(&mut self, name: &str, c: usize) {
        self.norm(&format!("{name}.norm"), c);
        self.linear(&format!("{name}.qkv"), c, 3 * c);
        self.linear(&format!("{name}.proj"), c, c);
    }
}

/// Group count for group norm: the largest divisor of `c` with at most 8
/// groups and at least two channels per group, so per-channel shifts (conv
/// biases, timestep conditioning) are never fully normalized away.
fn norm_groups(c: usize) -> usize {
    let cap = 8usize.min(c / 2).max(1);
    for g in (1..=cap).rev() {
        if c % g == 0 {
            return g;
        }
    }
    1
}

const NORM_EPS: f64 = 1e-5;

/// Conditional denoiser: configuration plus named parameters.
#[derive(Clone, Debug)]
pub struct Denoiser<T: Scalar> {
    pub config: DenoiserConfig,
    pub params: DenoiserParams<T>,
}

/// Parameters of one denoiser bound onto a tape, optionally trainable.
pub struct BoundDenoiser<'a, T: Scalar> {
    net: &'a Denoiser<T>,
    vars: Vec<Var>,
    index: usize_lookup::NameIndex,
}

mod usize_lookup {
    use alloc::collections::BTreeMap;
    use alloc::string::String;

    /// Name-to-slot lookup built once per bind.
    pub struct NameIndex(BTreeMap<String, usize>);

    impl NameIndex {
        pub fn new(names: &[String]) -> Self {
            let mut m = BTreeMap::new();
            for (i, n) in names.iter().enumerate() {
                m.insert(n.clone(), i);
            }
            Self(m)
        }

        pub fn get(&self, name: &str) -> usize {
            *self.0.get(name).unwrap_or_else(|| panic!("unknown parameter '{name}'"))
        }
    }
}

impl<T: Scalar> Denoiser<T> {
    /// Fresh network with fan-in scaled normal kernels and a zero-initialized
    /// output convolution (so the initial noise prediction is zero and the
    /// initial variance coefficient is 0.5).
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        if config.in_channels < 2 {
            return Err(arg_err!("conditional denoiser needs >= 2 input channels"));
        }
        let mut b = ParamBuilder::<T>::new(seed);
        let levels = config.levels();
        let c0 = config.width(0);

        b.linear("time.fc1", config.time_dim, config.time_dim);
        b.linear("time.fc2", config.time_dim, config.time_dim);
        b.conv("stem", c0, config.in_channels, 3);
        for l in 0..levels - 1 {
            let c = config.width(l);
            b.res_block(&format!("enc{l}"), c, c, config.time_dim);
            b.conv(&format!("down{l}"), config.width(l + 1), c, 3);
        }
        let cl = config.width(levels - 1);
        b.res_block("mid.res1", cl, cl, config.time_dim);
        b.attn_block("mid.attn", cl);
        b.attn_block("mid.sattn", cl);
        b.res_block("mid.res2", cl, cl, config.time_dim);
        for l in (0..levels - 1).rev() {
            let c = config.width(l);
            b.conv(&format!("up{l}"), c, config.width(l + 1), 1);
            b.res_block(&format!("dec{l}"), 2 * c, c, config.time_dim);
        }
        b.norm("out.norm", c0);
        b.conv_zero("out.conv", config.out_channels, c0, 3);

        Ok(Self {
            config,
            params: DenoiserParams {
                names: b.names,
                tensors: b.tensors,
            },
        })
    }

    /// Puts every parameter on the tape (as trainable or constant leaves).
    pub fn bind<'a>(&'a self, tape: &mut Tape<T>, trainable: bool) -> BoundDenoiser<'a, T> {
        let vars = self
            .params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect();
        BoundDenoiser {
            net: self,
            index: usize_lookup::NameIndex::new(&self.params.names),
            vars,
        }
    }

    /// Binds externally created tape leaves as this network's parameters, in
    /// registry order. Used by gradient checks that own the leaves.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<BoundDenoiser<'_, T>> {
        if vars.len() != self.params.len() {
            return Err(arg_err!(
                "expected {} parameter vars, got {}",
                self.params.len(),
                vars.len()
            ));
        }
        Ok(BoundDenoiser {
            net: self,
            index: usize_lookup::NameIndex::new(&self.params.names),
            vars,
        })
    }

    /// Forward pass without gradient tracking.
    pub fn denoise(&self, x: &Tensor<T>, cond: &Tensor<T>, n: usize) -> Result<DenoiserOutput<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let cv = tape.constant(cond.clone());
        let batch = x.shape()[0];
        let steps = vec![n; batch];
        let (eps, v) = bound.forward(&mut tape, xv, cv, &steps)?;
        Ok(DenoiserOutput {
            eps: tape.value(eps).clone(),
            v: tape.value(v).clone(),
        })
    }
}

impl<'a, T: Scalar> BoundDenoiser<'a, T> {
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    fn p(&self, name: &str) -> Var {
        self.vars[self.index.get(name)]
    }

    fn res_block(
        &self,
        tape: &mut Tape<T>,
        name: &str,
        x: Var,
        t_emb: Var,
        c_in: usize,
        c_out: usize,
    ) -> Result<Var> {
        let g1 = self.p(&format!("{name}.norm1.g"));
        let b1 = self.p(&format!("{name}.norm1.b"));
        let h = tape.group_norm(x, g1, b1, norm_groups(c_in), NORM_EPS)?;
        let h = tape.silu(h);
        let h = tape.conv3d(h, self.p(&format!("{name}.conv1.w")), [1, 1, 1], [1, 1, 1])?;
        let h = tape.add_chan(h, self.p(&format!("{name}.conv1.b")))?;

        // timestep conditioning, added per (sample, channel)
        let te = tape.silu(t_emb);
        let te = tape.matmul(te, self.p(&format!("{name}.emb.w")))?;
        let te = tape.add_trailing(te, self.p(&format!("{name}.emb.b")))?;
        let h = tape.add_chan_per_sample(h, te)?;

        let g2 = self.p(&format!("{name}.norm2.g"));
        let b2 = self.p(&format!("{name}.norm2.b"));
        let h = tape.group_norm(h, g2, b2, norm_groups(c_out), NORM_EPS)?;
        let h = tape.silu(h);
        let h = tape.conv3d(h, self.p(&format!("{name}.conv2.w")), [1, 1, 1], [1, 1, 1])?;
        let h = tape.add_chan(h, self.p(&format!("{name}.conv2.b")))?;

        let skip = if c_in != c_out {
            let s = tape.conv3d(x, self.p(&format!("{name}.skip.w")), [1, 1, 1], [0, 0, 0])?;
            tape.add_chan(s, self.p(&format!("{name}.skip.b")))?
        } else {
            x
        };
        tape.add(h, skip)
    }

    fn attention(
        &self,
        tape: &mut Tape<T>,
        name: &str,
        x: Var,
        c: usize,
        eff: [usize; 3],
        shifted: bool,
    ) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let (b, d, h, w) = (shape[0], shape[2], shape[3], shape[4]);
        let heads = self.net.config.heads;
        let dh = c / heads;
        let shift = [
            (eff[0] / 2) as i64,
            (eff[1] / 2) as i64,
            (eff[2] / 2) as i64,
        ];

        let g = self.p(&format!("{name}.norm.g"));
        let bb = self.p(&format!("{name}.norm.b"));
        let mut y = tape.group_norm(x, g, bb, norm_groups(c), NORM_EPS)?;
        if shifted {
            y = tape.roll_spatial(y, [-shift[0], -shift[1], -shift[2]])?;
        }

        // window partition: [B,C,D,H,W] -> [B*nwin, tokens, C]
        let (nd, nh, nw) = (d / eff[0], h / eff[1], w / eff[2]);
        let tokens = eff[0] * eff[1] * eff[2];
        let y8 = tape.reshape(y, &[b, c, nd, eff[0], nh, eff[1], nw, eff[2]])?;
        let yp = tape.permute(y8, &[0, 2, 4, 6, 3, 5, 7, 1])?;
        let yt = tape.reshape(yp, &[b * nd * nh * nw, tokens, c])?;

        let qkv = tape.matmul(yt, self.p(&format!("{name}.qkv.w")))?;
        let qkv = tape.add_trailing(qkv, self.p(&format!("{name}.qkv.b")))?;
        let groups = b * nd * nh * nw;

        let split_heads = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
            let r = tape.reshape(v, &[groups, tokens, heads, dh])?;
            tape.permute(r, &[0, 2, 1, 3])
        };
        let q = tape.slice_axis(qkv, 2, 0, c)?;
        let k = tape.slice_axis(qkv, 2, c, c)?;
        let v = tape.slice_axis(qkv, 2, 2 * c, c)?;
        let qh = split_heads(tape, q)?;
        let vh = split_heads(tape, v)?;
        let kt = {
            let r = tape.reshape(k, &[groups, tokens, heads, dh])?;
            tape.permute(r, &[0, 2, 3, 1])?
        };

        let scores = tape.matmul(qh, kt)?;
        let scores = tape.mul_scalar(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(scores)?;
        let out = tape.matmul(attn, vh)?;
        let out = tape.permute(out, &[0, 2, 1, 3])?;
        let out = tape.reshape(out, &[groups, tokens, c])?;
        let out = tape.matmul(out, self.p(&format!("{name}.proj.w")))?;
        let out = tape.add_trailing(out, self.p(&format!("{name}.proj.b")))?;

        // reverse the partition
        let o8 = tape.reshape(out, &[b, nd, nh, nw, eff[0], eff[1], eff[2], c])?;
        let op = tape.permute(o8, &[0, 7, 1, 4, 2, 5, 3, 6])?;
        let mut o = tape.reshape(op, &[b, c, d, h, w])?;
        if shifted {
            o = tape.roll_spatial(o, shift)?;
        }
        tape.add(x, o)
    }

    /// Runs the network on `x_n` (noisy target) and `cond` (clean source),
    /// both `[B, 1, D, H, W]`, at one original timestep per sample.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        cond: Var,
        timesteps: &[usize],
    ) -> Result<(Var, Var)> {
        let cfg = &self.net.config;
        let xs = tape.value(x).shape().to_vec();
        let cs = tape.value(cond).shape().to_vec();
        if xs.len() != 5 || cs.len() != 5 || xs[0] != cs[0] || xs[2..] != cs[2..] {
            return Err(shape_err!("denoiser inputs {xs:?} and {cs:?}"));
        }
        if xs[1] + cs[1] != cfg.in_channels {
            return Err(shape_err!(
                "input channels {} + condition channels {} != configured {}",
                xs[1],
                cs[1],
                cfg.in_channels
            ));
        }
        if timesteps.len() != xs[0] {
            return Err(arg_err!(
                "got {} timesteps for batch of {}",
                timesteps.len(),
                xs[0]
            ));
        }
        let patch = [xs[2], xs[3], xs[4]];
        cfg.validate(patch)?;
        let eff = cfg.effective_window(patch);
        let levels = cfg.levels();

        // timestep embedding -> two-layer projection
        let emb0 = tape.constant(sinusoid_embedding::<T>(timesteps, cfg.time_dim));
        let t1 = tape.matmul(emb0, self.p("time.fc1.w"))?;
        let t1 = tape.add_trailing(t1, self.p("time.fc1.b"))?;
        let t1 = tape.silu(t1);
        let t2 = tape.matmul(t1, self.p("time.fc2.w"))?;
        let t_emb = tape.add_trailing(t2, self.p("time.fc2.b"))?;

        let inp = tape.concat(x, cond, 1)?;
        let mut hcur = tape.conv3d(inp, self.p("stem.w"), [1, 1, 1], [1, 1, 1])?;
        hcur = tape.add_chan(hcur, self.p("stem.b"))?;

        let mut skips: Vec<Var> = Vec::new();
        for l in 0..levels - 1 {
            let c = cfg.width(l);
            hcur = self.res_block(tape, &format!("enc{l}"), hcur, t_emb, c, c)?;
            skips.push(hcur);
            hcur = tape.conv3d(hcur, self.p(&format!("down{l}.w")), [2, 2, 2], [1, 1, 1])?;
            hcur = tape.add_chan(hcur, self.p(&format!("down{l}.b")))?;
        }

        let cl = cfg.width(levels - 1);
        hcur = self.res_block(tape, "mid.res1", hcur, t_emb, cl, cl)?;
        hcur = self.attention(tape, "mid.attn", hcur, cl, eff, false)?;
        hcur = self.attention(tape, "mid.sattn", hcur, cl, eff, true)?;
        hcur = self.res_block(tape, "mid.res2", hcur, t_emb, cl, cl)?;

        for l in (0..levels - 1).rev() {
            let c = cfg.width(l);
            hcur = tape.upsample_nearest_2x(hcur)?;
            hcur = tape.conv3d(hcur, self.p(&format!("up{l}.w")), [1, 1, 1], [0, 0, 0])?;
            hcur = tape.add_chan(hcur, self.p(&format!("up{l}.b")))?;
            hcur = tape.concat(hcur, skips[l], 1)?;
            hcur = self.res_block(tape, &format!("dec{l}"), hcur, t_emb, 2 * c, c)?;
        }

        let og = self.p("out.norm.g");
        let ob = self.p("out.norm.b");
        hcur = tape.group_norm(hcur, og, ob, norm_groups(cfg.width(0)), NORM_EPS)?;
        hcur = tape.silu(hcur);
        hcur = tape.conv3d(hcur, self.p("out.conv.w"), [1, 1, 1], [1, 1, 1])?;
        hcur = tape.add_chan(hcur, self.p("out.conv.b"))?;

        let eps = tape.slice_axis(hcur, 1, 0, 1)?;
        let v_raw = tape.slice_axis(hcur, 1, 1, 1)?;
        let v = tape.sigmoid(v_raw);
        Ok((eps, v))
    }
}

/// Interleaved sin/cos embedding of integer timesteps under geometric
/// frequencies; row `b` embeds `timesteps[b]`.
pub fn sinusoid_embedding<T: Scalar>(timesteps: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &n in timesteps {
        for i in 0..half {
            let freq = (-(10_000.0f64.ln()) * i as f64 / half as f64).exp();
            let arg = n as f64 * freq;
            data.push(T::of_f64(arg.sin()));
            data.push(T::of_f64(arg.cos()));
        }
    }
    Tensor::from_vec(&[timesteps.len(), dim], data).expect("embedding shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            base_width: 4,
            channel_mults: vec![1, 2],
            window: [2, 2, 2],
            heads: 2,
            time_dim: 8,
            in_channels: 2,
            out_channels: 2,
        }
    }

    #[test]
    fn sinusoid_at_zero_is_zero_one_pattern() {
        let e = sinusoid_embedding::<f64>(&[0], 8);
        for i in 0..4 {
            assert_eq!(e.data()[2 * i], 0.0);
            assert_eq!(e.data()[2 * i + 1], 1.0);
        }
    }

    #[test]
    fn sinusoid_distinct_steps_differ() {
        let e = sinusoid_embedding::<f64>(&[1, 2, 3], 16);
        let row = |r: usize| &e.data()[r * 16..(r + 1) * 16];
        assert_ne!(row(0), row(1));
        assert_ne!(row(1), row(2));
    }

    #[test]
    fn forward_shapes_and_v_range() {
        let net = Denoiser::<f32>::init(tiny_config(), 7).unwrap();
        let x = Tensor::from_fn(&[2, 1, 4, 8, 8], |i| ((i % 13) as f32 - 6.0) * 0.1);
        let cond = Tensor::from_fn(&[2, 1, 4, 8, 8], |i| ((i % 7) as f32 - 3.0) * 0.2);
        let out = net.denoise(&x, &cond, 3).unwrap();
        assert_eq!(out.eps.shape(), x.shape());
        assert_eq!(out.v.shape(), x.shape());
        assert!(out.v.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_init_output_head_gives_zero_eps_and_half_v() {
        let net = Denoiser::<f32>::init(tiny_config(), 3).unwrap();
        let x = Tensor::from_fn(&[1, 1, 4, 8, 8], |i| (i % 11) as f32 * 0.05);
        let cond = Tensor::zeros(&[1, 1, 4, 8, 8]);
        let out = net.denoise(&x, &cond, 1).unwrap();
        assert!(out.eps.data().iter().all(|&e| e == 0.0));
        assert!(out.v.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn conditioning_is_live() {
        let mut cfg = tiny_config();
        cfg.window = [4, 4, 4];
        let net = Denoiser::<f32>::init(cfg, 11).unwrap();
        // run a couple of optimizer-free perturbations: different cond must
        // change eps once the output head is non-zero, so nudge it first
        let mut net = net;
        let k = net
            .params
            .names()
            .iter()
            .position(|n| n == "out.conv.w")
            .unwrap();
        net.params.tensors_mut()[k] =
            Tensor::from_fn(net.params.tensors()[k].shape(), |i| ((i % 5) as f32 - 2.0) * 0.05);

        let x = Tensor::from_fn(&[1, 1, 4, 8, 8], |i| ((i % 13) as f32 - 6.0) * 0.1);
        let c1 = Tensor::zeros(&[1, 1, 4, 8, 8]);
        let c2 = Tensor::from_fn(&[1, 1, 4, 8, 8], |i| ((i % 3) as f32) * 0.3);
        let o1 = net.denoise(&x, &c1, 2).unwrap();
        let o2 = net.denoise(&x, &c2, 2).unwrap();
        assert!(o1.eps.max_abs_diff(&o2.eps).unwrap() > 0.0);
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Denoiser::<f32>::init(tiny_config(), 5).unwrap();
        let x = Tensor::from_fn(&[1, 1, 4, 8, 8], |i| ((i % 9) as f32 - 4.0) * 0.1);
        let cond = Tensor::from_fn(&[1, 1, 4, 8, 8], |i| ((i % 4) as f32) * 0.2);
        let a = net.denoise(&x, &cond, 2).unwrap();
        let b = net.denoise(&x, &cond, 2).unwrap();
        assert_eq!(a.eps, b.eps);
        assert_eq!(a.v, b.v);
    }

    #[test]
    fn default_config_parameter_count_is_locked() {
        let net = Denoiser::<f32>::init(DenoiserConfig::default(), 1).unwrap();
        // Regression lock against accidental architecture drift.
        assert_eq!(net.params.total_scalars(), 749_234);
    }

    #[test]
    fn config_validation_rejects_bad_patches() {
        let cfg = DenoiserConfig::default();
        assert!(cfg.validate([32, 32, 8]).is_ok());
        assert!(cfg.validate([30, 32, 8]).is_err());
        assert!(cfg.validate([0, 32, 8]).is_err());
    }

    #[test]
    fn shifted_and_unshifted_attention_differ() {
        let cfg = tiny_config();
        let net = Denoiser::<f32>::init(cfg.clone(), 13).unwrap();
        let x = Tensor::from_fn(&[1, 8, 2, 4, 4], |i| ((i * 7 % 23) as f32 - 11.0) * 0.1);
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let xv = tape.constant(x);
        let eff = cfg.effective_window([4, 8, 8]);
        let plain = bound.attention(&mut tape, "mid.attn", xv, 8, eff, false).unwrap();
        let shifted = bound.attention(&mut tape, "mid.attn", xv, 8, eff, true).unwrap();
        let d = tape
            .value(plain)
            .max_abs_diff(tape.value(shifted))
            .unwrap();
        assert!(d > 0.0, "cyclic shift must change cross-window mixing");
    }

    #[test]
    fn single_window_constant_input_attention_is_identity() {
        // constant tokens under softmax mix to the same constant; with zeroed
        // qkv/proj biases the residual branch adds the projected constant,
        // so instead check: constant input stays constant across voxels.
        let cfg = tiny_config();
        let net = Denoiser::<f32>::init(cfg.clone(), 17).unwrap();
        let x = Tensor::full(&[1, 8, 2, 2, 2], 0.7f32);
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let xv = tape.constant(x);
        let out = bound
            .attention(&mut tape, "mid.attn", xv, 8, [2, 2, 2], false)
            .unwrap();
        let vals = tape.value(out).data();
        // per-channel constancy: every spatial voxel of a channel identical
        for c in 0..8 {
            let chunk = &vals[c * 8..(c + 1) * 8];
            for &v in chunk {
                assert!((v - chunk[0]).abs() < 1e-6);
            }
        }
    }
}
