//! Raw compute kernels behind the tape ops.
//!
//! Everything here works on plain slices. Each output element is produced by
//! one serial reduction in a fixed order, so worker threads (which only split
//! work across elements, rows, or column stripes) never change results.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Scalar;
use crate::tensor::strides_of;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Column-stripe width for parallel matmul.
#[cfg(feature = "parallel")]
const GEMM_COL_BLOCK: usize = 2048;

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

/// `out[m,n] (+)= a[m,k] * b[k,n]`, accumulating over `k` in ascending order.
pub(crate) fn matmul_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);

    #[cfg(feature = "parallel")]
    {
        if n >= 2 * GEMM_COL_BLOCK && m * k * n >= 1 << 20 {
            // Column stripes: each stripe of `out` columns is computed
            // independently with the same ascending-k order.
            let stripes: Vec<(usize, usize)> = (0..n)
                .step_by(GEMM_COL_BLOCK)
                .map(|j0| (j0, (j0 + GEMM_COL_BLOCK).min(n)))
                .collect();
            // Work on raw pointer ranges via split indices: rebuild output by
            // computing each stripe into a local buffer, then copying.
            let stripe_results: Vec<Vec<T>> = stripes
                .par_iter()
                .map(|&(j0, j1)| {
                    let w = j1 - j0;
                    let mut local = vec![T::zero(); m * w];
                    for i in 0..m {
                        let arow = &a[i * k..(i + 1) * k];
                        let lrow = &mut local[i * w..(i + 1) * w];
                        for (p, &av) in arow.iter().enumerate() {
                            let brow = &b[p * n + j0..p * n + j1];
                            for (l, &bv) in lrow.iter_mut().zip(brow.iter()) {
                                *l = *l + av * bv;
                            }
                        }
                    }
                    local
                })
                .collect();
            for (si, &(j0, j1)) in stripes.iter().enumerate() {
                let w = j1 - j0;
                let local = &stripe_results[si];
                for i in 0..m {
                    let orow = &mut out[i * n + j0..i * n + j1];
                    let lrow = &local[i * w..(i + 1) * w];
                    if accumulate {
                        for (o, &l) in orow.iter_mut().zip(lrow.iter()) {
                            *o = *o + l;
                        }
                    } else {
                        orow.copy_from_slice(lrow);
                    }
                }
            }
            return;
        }
        if m >= 64 && m * k * n >= 1 << 20 {
            // Row blocks: each output row is one independent reduction.
            out.par_chunks_mut(n.max(1))
                .enumerate()
                .for_each(|(i, orow)| {
                    let arow = &a[i * k..(i + 1) * k];
                    if !accumulate {
                        for o in orow.iter_mut() {
                            *o = T::zero();
                        }
                    }
                    for (p, &av) in arow.iter().enumerate() {
                        let brow = &b[p * n..(p + 1) * n];
                        for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                            *o = *o + av * bv;
                        }
                    }
                });
            return;
        }
    }

    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        if !accumulate {
            for o in orow.iter_mut() {
                *o = T::zero();
            }
        }
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Transposes a row-major `rows x cols` matrix.
pub(crate) fn transpose2d<T: Scalar>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Splits a batched matmul shape pair into (lead count, m, k, n, shared_rhs).
///
/// Accepted forms: identical leading dims on both operands, or a rank-2 rhs
/// shared across all lead batches of the lhs.
pub(crate) fn matmul_dims(
    a_shape: &[usize],
    b_shape: &[usize],
) -> Option<(usize, usize, usize, usize, bool)> {
    if a_shape.len() < 2 || b_shape.len() < 2 {
        return None;
    }
    let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
    let (kb, n) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
    if k != kb {
        return None;
    }
    let a_lead = &a_shape[..a_shape.len() - 2];
    let b_lead = &b_shape[..b_shape.len() - 2];
    if b_lead.is_empty() && !a_lead.is_empty() {
        return Some((a_lead.iter().product(), m, k, n, true));
    }
    if a_lead == b_lead {
        return Some((a_lead.iter().product::<usize>().max(1), m, k, n, false));
    }
    None
}

pub(crate) fn matmul_batched<T: Scalar>(
    a: &[T],
    b: &[T],
    lead: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); lead * m * n];
    let run = |(g, chunk): (usize, &mut [T])| {
        let ab = &a[g * m * k..(g + 1) * m * k];
        let bb = if shared_rhs { b } else { &b[g * k * n..(g + 1) * k * n] };
        matmul_acc(ab, bb, m, k, n, chunk, false);
    };
    #[cfg(feature = "parallel")]
    {
        if lead > 1 {
            out.par_chunks_mut(m * n).enumerate().for_each(run);
            return out;
        }
    }
    out.chunks_mut(m * n).enumerate().for_each(run);
    out
}

// ---------------------------------------------------------------------------
// Conv3d
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub in_sp: [usize; 3],
    pub out_sp: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvDims {
    pub fn infer(
        x_shape: &[usize],
        k_shape: &[usize],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Option<Self> {
        if x_shape.len() != 5 || k_shape.len() != 5 {
            return None;
        }
        if x_shape[1] != k_shape[1] {
            return None;
        }
        if stride.iter().any(|&s| s == 0) {
            return None;
        }
        let in_sp = [x_shape[2], x_shape[3], x_shape[4]];
        let kernel = [k_shape[2], k_shape[3], k_shape[4]];
        let mut out_sp = [0usize; 3];
        for a in 0..3 {
            let padded = in_sp[a] + 2 * pad[a];
            if kernel[a] == 0 || kernel[a] > padded {
                return None;
            }
            out_sp[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Some(ConvDims {
            batch: x_shape[0],
            c_in: x_shape[1],
            c_out: k_shape[0],
            in_sp,
            out_sp,
            kernel,
            stride,
            pad,
        })
    }

    #[inline]
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kernel[0] * self.kernel[1] * self.kernel[2]
    }

    #[inline]
    pub fn out_vox(&self) -> usize {
        self.out_sp[0] * self.out_sp[1] * self.out_sp[2]
    }

    #[inline]
    pub fn in_vox(&self) -> usize {
        self.in_sp[0] * self.in_sp[1] * self.in_sp[2]
    }
}

/// Lowers one sample into the `[col_rows, out_vox]` patch matrix.
fn im2col<T: Scalar>(x: &[T], d: &ConvDims, col: &mut [T]) {
    let [id, ih, iw] = d.in_sp;
    let [od, oh, ow] = d.out_sp;
    let [kd, kh, kw] = d.kernel;
    let [sd, sh, sw] = d.stride;
    let [pd, ph, pw] = d.pad;
    let o_hw = oh * ow;
    let rows = d.col_rows();
    let per_row = od * o_hw;
    debug_assert_eq!(col.len(), rows * per_row);

    let fill_row = |(row, out_row): (usize, &mut [T])| {
        let xk = row % kw;
        let yk = (row / kw) % kh;
        let zk = (row / (kw * kh)) % kd;
        let c = row / (kw * kh * kd);
        let base = c * id * ih * iw;
        for odz in 0..od {
            let z = (odz * sd + zk) as isize - pd as isize;
            let stripe = &mut out_row[odz * o_hw..(odz + 1) * o_hw];
            if z < 0 || z >= id as isize {
                for v in stripe.iter_mut() {
                    *v = T::zero();
                }
                continue;
            }
            let zoff = base + (z as usize) * ih * iw;
            for ohy in 0..oh {
                let y = (ohy * sh + yk) as isize - ph as isize;
                let seg = &mut stripe[ohy * ow..(ohy + 1) * ow];
                if y < 0 || y >= ih as isize {
                    for v in seg.iter_mut() {
                        *v = T::zero();
                    }
                    continue;
                }
                let yoff = zoff + (y as usize) * iw;
                if sw == 1 {
                    // contiguous x-run with zero-padded edges
                    let lo = (pw as isize - xk as isize).max(0) as usize;
                    let hi_excl =
                        ((iw as isize + pw as isize - xk as isize).min(ow as isize)).max(0) as usize;
                    for v in seg[..lo.min(ow)].iter_mut() {
                        *v = T::zero();
                    }
                    if hi_excl > lo {
                        let src0 = (lo + xk) as isize - pw as isize;
                        let src0 = src0 as usize;
                        seg[lo..hi_excl].copy_from_slice(&x[yoff + src0..yoff + src0 + (hi_excl - lo)]);
                    }
                    for v in seg[hi_excl.max(lo).min(ow)..].iter_mut() {
                        *v = T::zero();
                    }
                } else {
                    for (owx, v) in seg.iter_mut().enumerate() {
                        let xx = (owx * sw + xk) as isize - pw as isize;
                        *v = if xx < 0 || xx >= iw as isize {
                            T::zero()
                        } else {
                            x[yoff + xx as usize]
                        };
                    }
                }
            }
        }
    };

    #[cfg(feature = "parallel")]
    {
        if rows * per_row >= 1 << 16 {
            col.par_chunks_mut(per_row).enumerate().for_each(fill_row);
            return;
        }
    }
    col.chunks_mut(per_row).enumerate().for_each(fill_row);
}

/// Scatters a patch matrix back onto one input sample (accumulating).
fn col2im_acc<T: Scalar>(col: &[T], d: &ConvDims, x_grad: &mut [T]) {
    let [id, ih, iw] = d.in_sp;
    let [od, oh, ow] = d.out_sp;
    let [kd, kh, kw] = d.kernel;
    let [sd, sh, sw] = d.stride;
    let [pd, ph, pw] = d.pad;
    let o_hw = oh * ow;
    let per_row = od * o_hw;
    for (row, col_row) in col.chunks(per_row).enumerate() {
        let xk = row % kw;
        let yk = (row / kw) % kh;
        let zk = (row / (kw * kh)) % kd;
        let c = row / (kw * kh * kd);
        let base = c * id * ih * iw;
        for odz in 0..od {
            let z = (odz * sd + zk) as isize - pd as isize;
            if z < 0 || z >= id as isize {
                continue;
            }
            let zoff = base + (z as usize) * ih * iw;
            let stripe = &col_row[odz * o_hw..(odz + 1) * o_hw];
            for ohy in 0..oh {
                let y = (ohy * sh + yk) as isize - ph as isize;
                if y < 0 || y >= ih as isize {
                    continue;
                }
                let yoff = zoff + (y as usize) * iw;
                let seg = &stripe[ohy * ow..(ohy + 1) * ow];
                for (owx, &v) in seg.iter().enumerate() {
                    let xx = (owx * sw + xk) as isize - pw as isize;
                    if xx >= 0 && xx < iw as isize {
                        x_grad[yoff + xx as usize] += v;
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation. `x: [B,C,D,H,W]`, `k: [F,C,kd,kh,kw]`.
pub(crate) fn conv3d_forward<T: Scalar>(x: &[T], k: &[T], d: &ConvDims) -> Vec<T> {
    let rows = d.col_rows();
    let o = d.out_vox();
    let per_in = d.c_in * d.in_vox();
    let per_out = d.c_out * o;
    let mut out = vec![T::zero(); d.batch * per_out];

    let run = |(b, out_b): (usize, &mut [T])| {
        let mut col = vec![T::zero(); rows * o];
        im2col(&x[b * per_in..(b + 1) * per_in], d, &mut col);
        matmul_acc(k, &col, d.c_out, rows, o, out_b, false);
    };
    #[cfg(feature = "parallel")]
    {
        if d.batch > 1 {
            out.par_chunks_mut(per_out).enumerate().for_each(run);
            return out;
        }
    }
    out.chunks_mut(per_out).enumerate().for_each(run);
    out
}

/// Gradients of conv3d. Returns `(dx, dk)`, either skipped when not needed.
pub(crate) fn conv3d_backward<T: Scalar>(
    x: &[T],
    k: &[T],
    dy: &[T],
    d: &ConvDims,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let rows = d.col_rows();
    let o = d.out_vox();
    let per_in = d.c_in * d.in_vox();
    let per_out = d.c_out * o;

    let kt = if need_dx {
        Some(transpose2d(k, d.c_out, rows))
    } else {
        None
    };

    // Per-sample contributions computed independently, then combined in
    // ascending batch order.
    let per_sample = |b: usize| -> (Option<Vec<T>>, Option<Vec<T>>) {
        let mut col = vec![T::zero(); rows * o];
        im2col(&x[b * per_in..(b + 1) * per_in], d, &mut col);
        let dy_b = &dy[b * per_out..(b + 1) * per_out];
        let dk_b = if need_dk {
            // dK^T = col x dy^T keeps the long axis as the reduction axis and
            // only transposes the small [F, O] gradient block.
            let dy_t = transpose2d(dy_b, d.c_out, o);
            let mut dk_t = vec![T::zero(); rows * d.c_out];
            matmul_acc(&col, &dy_t, rows, o, d.c_out, &mut dk_t, false);
            Some(transpose2d(&dk_t, rows, d.c_out))
        } else {
            None
        };
        let dx_b = if need_dx {
            let mut dcol = vec![T::zero(); rows * o];
            matmul_acc(kt.as_ref().unwrap(), dy_b, rows, d.c_out, o, &mut dcol, false);
            let mut dx = vec![T::zero(); per_in];
            col2im_acc(&dcol, d, &mut dx);
            Some(dx)
        } else {
            None
        };
        (dx_b, dk_b)
    };

    #[cfg(feature = "parallel")]
    let parts: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = if d.batch > 1 {
        (0..d.batch).into_par_iter().map(per_sample).collect()
    } else {
        (0..d.batch).map(per_sample).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..d.batch).map(per_sample).collect();

    let dx = if need_dx {
        let mut dx = vec![T::zero(); d.batch * per_in];
        for (b, (dx_b, _)) in parts.iter().enumerate() {
            dx[b * per_in..(b + 1) * per_in].copy_from_slice(dx_b.as_ref().unwrap());
        }
        Some(dx)
    } else {
        None
    };
    let dk = if need_dk {
        let mut dk = vec![T::zero(); d.c_out * rows];
        for (_, dk_b) in &parts {
            for (acc, &v) in dk.iter_mut().zip(dk_b.as_ref().unwrap().iter()) {
                *acc += v;
            }
        }
        Some(dk)
    } else {
        None
    };
    (dx, dk)
}

// ---------------------------------------------------------------------------
// Group normalization
// ---------------------------------------------------------------------------

/// Forward group norm over `[B, C, spatial...]`. Returns `(y, mean, rstd)`
/// with per-(batch, group) statistics. Statistics accumulate in `f64` so the
/// narrow-precision gradients stay within finite-difference tolerance.
pub(crate) fn group_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = channels / groups;
    let glen = cg * spatial;
    let mut y = vec![T::zero(); x.len()];
    let mut means = vec![T::zero(); batch * groups];
    let mut rstds = vec![T::zero(); batch * groups];

    for b in 0..batch {
        for g in 0..groups {
            let off = b * channels * spatial + g * glen;
            let xs = &x[off..off + glen];
            let mut s = 0.0f64;
            for &v in xs {
                s += v.to_f64_val();
            }
            let mean_w = s / glen as f64;
            let mut vs = 0.0f64;
            for &v in xs {
                let d = v.to_f64_val() - mean_w;
                vs += d * d;
            }
            let var = vs / glen as f64;
            let mean = T::of_f64(mean_w);
            let rstd = T::of_f64(1.0 / (var + eps).sqrt());
            means[b * groups + g] = mean;
            rstds[b * groups + g] = rstd;
            let ys = &mut y[off..off + glen];
            for c_in_g in 0..cg {
                let c = g * cg + c_in_g;
                let ga = gamma[c];
                let be = beta[c];
                let row = c_in_g * spatial;
                for i in 0..spatial {
                    let xhat = (xs[row + i] - mean) * rstd;
                    ys[row + i] = xhat * ga + be;
                }
            }
        }
    }
    (y, means, rstds)
}

/// Backward group norm. Returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    dy: &[T],
    means: &[T],
    rstds: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = channels / groups;
    let glen = cg * spatial;
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![0.0f64; channels];
    let mut dbeta = vec![0.0f64; channels];

    for b in 0..batch {
        for g in 0..groups {
            let off = b * channels * spatial + g * glen;
            let xs = &x[off..off + glen];
            let dys = &dy[off..off + glen];
            let mean = means[b * groups + g].to_f64_val();
            let rstd = rstds[b * groups + g].to_f64_val();

            let mut m1 = 0.0f64; // mean of gamma*dy
            let mut m2 = 0.0f64; // mean of gamma*dy*xhat
            for c_in_g in 0..cg {
                let ga = gamma[g * cg + c_in_g].to_f64_val();
                let row = c_in_g * spatial;
                for i in 0..spatial {
                    let xhat = (xs[row + i].to_f64_val() - mean) * rstd;
                    let dxh = dys[row + i].to_f64_val() * ga;
                    m1 += dxh;
                    m2 += dxh * xhat;
                }
            }
            m1 /= glen as f64;
            m2 /= glen as f64;

            let dxs = &mut dx[off..off + glen];
            for c_in_g in 0..cg {
                let c = g * cg + c_in_g;
                let ga = gamma[c].to_f64_val();
                let row = c_in_g * spatial;
                let mut dg = 0.0f64;
                let mut db = 0.0f64;
                for i in 0..spatial {
                    let xhat = (xs[row + i].to_f64_val() - mean) * rstd;
                    let dyv = dys[row + i].to_f64_val();
                    let dxh = dyv * ga;
                    dxs[row + i] = T::of_f64(rstd * (dxh - m1 - xhat * m2));
                    dg += dyv * xhat;
                    db += dyv;
                }
                dgamma[c] += dg;
                dbeta[c] += db;
            }
        }
    }
    (
        dx,
        dgamma.into_iter().map(T::of_f64).collect(),
        dbeta.into_iter().map(T::of_f64).collect(),
    )
}

// ---------------------------------------------------------------------------
// Softmax over the last axis
// ---------------------------------------------------------------------------

pub(crate) fn softmax_forward<T: Scalar>(x: &[T], row_len: usize) -> Vec<T> {
    debug_assert!(row_len > 0 && x.len() % row_len == 0);
    let mut y = vec![T::zero(); x.len()];
    for (xr, yr) in x.chunks(row_len).zip(y.chunks_mut(row_len)) {
        let mut mx = xr[0];
        for &v in xr.iter().skip(1) {
            if v > mx {
                mx = v;
            }
        }
        let mut s = 0.0f64;
        for (yv, &xv) in yr.iter_mut().zip(xr.iter()) {
            let e = (xv - mx).exp();
            *yv = e;
            s += e.to_f64_val();
        }
        let inv = T::of_f64(1.0 / s);
        for yv in yr.iter_mut() {
            *yv = *yv * inv;
        }
    }
    y
}

pub(crate) fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], row_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, dyr), dxr) in y
        .chunks(row_len)
        .zip(dy.chunks(row_len))
        .zip(dx.chunks_mut(row_len))
    {
        let mut dot = 0.0f64;
        for (&yv, &dv) in yr.iter().zip(dyr.iter()) {
            dot += (yv * dv).to_f64_val();
        }
        let dot = T::of_f64(dot);
        for ((dxv, &yv), &dv) in dxr.iter_mut().zip(yr.iter()).zip(dyr.iter()) {
            *dxv = yv * (dv - dot);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Nearest-neighbor resampling (rank 5, factor 2 per spatial axis)
// ---------------------------------------------------------------------------

pub(crate) fn upsample2x_forward<T: Scalar>(x: &[T], shape: &[usize]) -> (Vec<T>, Vec<usize>) {
    let (b, c, d, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let (od, oh, ow) = (d * 2, h * 2, w * 2);
    let mut out = vec![T::zero(); b * c * od * oh * ow];
    for bc in 0..b * c {
        let src = &x[bc * d * h * w..(bc + 1) * d * h * w];
        let dst = &mut out[bc * od * oh * ow..(bc + 1) * od * oh * ow];
        for z in 0..od {
            for y in 0..oh {
                let srow = (z / 2) * h * w + (y / 2) * w;
                let drow = z * oh * ow + y * ow;
                for xx in 0..ow {
                    dst[drow + xx] = src[srow + xx / 2];
                }
            }
        }
    }
    (out, vec![b, c, od, oh, ow])
}

pub(crate) fn upsample2x_backward<T: Scalar>(dy: &[T], in_shape: &[usize]) -> Vec<T> {
    let (b, c, d, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3], in_shape[4]);
    let (od, oh, ow) = (d * 2, h * 2, w * 2);
    let mut dx = vec![T::zero(); b * c * d * h * w];
    for bc in 0..b * c {
        let src = &dy[bc * od * oh * ow..(bc + 1) * od * oh * ow];
        let dst = &mut dx[bc * d * h * w..(bc + 1) * d * h * w];
        for z in 0..od {
            for y in 0..oh {
                let srow = z * oh * ow + y * ow;
                let drow = (z / 2) * h * w + (y / 2) * w;
                for xx in 0..ow {
                    dst[drow + xx / 2] += src[srow + xx];
                }
            }
        }
    }
    dx
}

pub(crate) fn downsample2x_shape(shape: &[usize]) -> Vec<usize> {
    vec![
        shape[0],
        shape[1],
        shape[2].div_ceil(2),
        shape[3].div_ceil(2),
        shape[4].div_ceil(2),
    ]
}

pub(crate) fn downsample2x_forward<T: Scalar>(x: &[T], shape: &[usize]) -> Vec<T> {
    let (b, c, d, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let (od, oh, ow) = (d.div_ceil(2), h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![T::zero(); b * c * od * oh * ow];
    for bc in 0..b * c {
        let src = &x[bc * d * h * w..(bc + 1) * d * h * w];
        let dst = &mut out[bc * od * oh * ow..(bc + 1) * od * oh * ow];
        for z in 0..od {
            for y in 0..oh {
                let srow = (z * 2) * h * w + (y * 2) * w;
                let drow = z * oh * ow + y * ow;
                for xx in 0..ow {
                    dst[drow + xx] = src[srow + xx * 2];
                }
            }
        }
    }
    out
}

pub(crate) fn downsample2x_backward<T: Scalar>(dy: &[T], in_shape: &[usize]) -> Vec<T> {
    let (b, c, d, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3], in_shape[4]);
    let (od, oh, ow) = (d.div_ceil(2), h.div_ceil(2), w.div_ceil(2));
    let mut dx = vec![T::zero(); b * c * d * h * w];
    for bc in 0..b * c {
        let src = &dy[bc * od * oh * ow..(bc + 1) * od * oh * ow];
        let dst = &mut dx[bc * d * h * w..(bc + 1) * d * h * w];
        for z in 0..od {
            for y in 0..oh {
                let srow = z * oh * ow + y * ow;
                let drow = (z * 2) * h * w + (y * 2) * w;
                for xx in 0..ow {
                    dst[drow + xx * 2] += src[srow + xx];
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Permute / roll
// ---------------------------------------------------------------------------

/// General permutation: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute_forward<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    debug_assert_eq!(perm.len(), rank);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let out_numel: usize = out_shape.iter().product();
    let mut out = vec![T::zero(); out_numel];
    // stride of the output linear index when stepping each output axis
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut coords = vec![0usize; rank];
    let mut src_idx = 0usize;
    for o in out.iter_mut() {
        *o = x[src_idx];
        // odometer increment over output coordinates, updating src_idx
        for a in (0..rank).rev() {
            coords[a] += 1;
            src_idx += mapped[a];
            if coords[a] < out_shape[a] {
                break;
            }
            src_idx -= mapped[a] * out_shape[a];
            coords[a] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Cyclic shift of the three spatial axes of a rank-5 tensor.
pub(crate) fn roll_forward<T: Scalar>(x: &[T], shape: &[usize], shift: [i64; 3]) -> Vec<T> {
    let (b, c, d, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let md = |v: i64, m: usize| -> usize {
        let m = m as i64;
        (((v % m) + m) % m) as usize
    };
    let (sd, sh, sw) = (md(shift[0], d), md(shift[1], h), md(shift[2], w));
    let mut out = vec![T::zero(); x.len()];
    for bc in 0..b * c {
        let src = &x[bc * d * h * w..(bc + 1) * d * h * w];
        let dst = &mut out[bc * d * h * w..(bc + 1) * d * h * w];
        for z in 0..d {
            let zs = (z + d - sd) % d;
            for y in 0..h {
                let ys = (y + h - sh) % h;
                let srow = zs * h * w + ys * w;
                let drow = z * h * w + y * w;
                // split the x-run at the wrap point
                for xx in 0..w {
                    let xs = (xx + w - sw) % w;
                    dst[drow + xx] = src[srow + xs];
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Concat / slice along one axis
// ---------------------------------------------------------------------------

/// Views a shape as `[outer, axis_len, inner]` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn concat_forward<T: Scalar>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    axis: usize,
) -> (Vec<T>, Vec<usize>) {
    let (outer, alen, inner) = axis_split(a_shape, axis);
    let blen = b_shape[axis];
    let mut out_shape = a_shape.to_vec();
    out_shape[axis] = alen + blen;
    let mut out = vec![T::zero(); outer * (alen + blen) * inner];
    for o in 0..outer {
        let dst = &mut out[o * (alen + blen) * inner..(o + 1) * (alen + blen) * inner];
        dst[..alen * inner].copy_from_slice(&a[o * alen * inner..(o + 1) * alen * inner]);
        dst[alen * inner..].copy_from_slice(&b[o * blen * inner..(o + 1) * blen * inner]);
    }
    (out, out_shape)
}

pub(crate) fn slice_forward<T: Scalar>(
    x: &[T],
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> (Vec<T>, Vec<usize>) {
    let (outer, alen, inner) = axis_split(shape, axis);
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut out = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        let src = &x[(o * alen + start) * inner..(o * alen + start + len) * inner];
        out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
    }
    (out, out_shape)
}

/// Adds a sliced gradient back into the full-size buffer.
pub(crate) fn slice_backward_acc<T: Scalar>(
    dy: &[T],
    full_shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
    dx: &mut [T],
) {
    let (outer, alen, inner) = axis_split(full_shape, axis);
    for o in 0..outer {
        let dst = &mut dx[(o * alen + start) * inner..(o * alen + start + len) * inner];
        let src = &dy[o * len * inner..(o + 1) * len * inner];
        for (d, &s) in dst.iter_mut().zip(src.iter()) {
            *d += s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [2,3] x [3,2]
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut out = [0.0; 4];
        matmul_acc(&a, &b, 2, 3, 2, &mut out, false);
        assert_eq!(out, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let t = transpose2d(&a, 3, 4);
        let back = transpose2d(&t, 4, 3);
        assert_eq!(a, back);
    }

    #[test]
    fn permute_matches_manual() {
        // [2,3] transpose via permute
        let x: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let (y, shape) = permute_forward(&x, &[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(y, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn roll_wraps() {
        let x: Vec<f64> = (0..4).map(|i| i as f64).collect();
        // shape [1,1,1,1,4], shift x by 1
        let y = roll_forward(&x, &[1, 1, 1, 1, 4], [0, 0, 1]);
        assert_eq!(y, vec![3.0, 0.0, 1.0, 2.0]);
        let z = roll_forward(&y, &[1, 1, 1, 1, 4], [0, 0, -1]);
        assert_eq!(z, x);
    }

    #[test]
    fn conv_identity_kernel() {
        let d = ConvDims::infer(&[1, 1, 2, 2, 2], &[1, 1, 1, 1, 1], [1, 1, 1], [0, 0, 0]).unwrap();
        let x: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let k = [1.0f64];
        let y = conv3d_forward(&x, &k, &d);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_sum_kernel_counts_support() {
        let d = ConvDims::infer(&[1, 1, 5, 5, 5], &[1, 1, 3, 3, 3], [1, 1, 1], [0, 0, 0]).unwrap();
        let x = vec![1.0f64; 125];
        let k = vec![1.0f64; 27];
        let y = conv3d_forward(&x, &k, &d);
        assert_eq!(y.len(), 27);
        assert!(y.iter().all(|&v| (v - 27.0).abs() < 1e-12));
    }
}
