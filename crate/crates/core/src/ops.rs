//! Raw tensor kernels: the primitive set every other module builds on.
//!
//! All kernels are pure functions. Given finite inputs they either return a
//! finite tensor or an error; NaN/Inf is never propagated silently. There is
//! no implicit broadcasting — binary elementwise ops demand equal shapes and
//! scalar scaling goes through [`scale`]/[`affine`].

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn ensure_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(CoreError::NonFinite { op })
    }
}

fn require_2d<'a, T: Scalar>(op: &'static str, t: &'a Tensor<T>) -> Result<(&'a [usize], usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(CoreError::dim(op, format!("expected 2-d tensor, got shape {s:?}")));
    }
    Ok((s, s[0], s[1]))
}

fn require_same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CoreError::dim(op, format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// `[M,K] · [K,P] -> [M,P]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, m, k) = require_2d("matmul", a)?;
    let (_, kb, p) = require_2d("matmul", b)?;
    if k != kb {
        return Err(CoreError::dim("matmul", format!("inner dims {k} and {kb} disagree")));
    }
    let mut out = Tensor::zeros(&[m, p]);
    {
        let (ad, bd, od) = (a.data(), b.data(), out.data_mut());
        for i in 0..m {
            let orow = &mut od[i * p..(i + 1) * p];
            for kk in 0..k {
                let aik = ad[i * k + kk];
                let brow = &bd[kk * p..(kk + 1) * p];
                for j in 0..p {
                    orow[j] += aik * brow[j];
                }
            }
        }
    }
    ensure_finite("matmul", &out)?;
    Ok(out)
}

/// `A · Bᵀ` for `A:[M,K]`, `B:[P,K]`, without materializing the transpose.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, m, k) = require_2d("matmul_nt", a)?;
    let (_, p, kb) = require_2d("matmul_nt", b)?;
    if k != kb {
        return Err(CoreError::dim("matmul_nt", format!("inner dims {k} and {kb} disagree")));
    }
    let mut out = Tensor::zeros(&[m, p]);
    {
        let (ad, bd, od) = (a.data(), b.data(), out.data_mut());
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            let orow = &mut od[i * p..(i + 1) * p];
            for (j, oj) in orow.iter_mut().enumerate() {
                let brow = &bd[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for kk in 0..k {
                    acc += arow[kk] * brow[kk];
                }
                *oj = acc;
            }
        }
    }
    ensure_finite("matmul_nt", &out)?;
    Ok(out)
}

/// `Aᵀ · B` for `A:[K,M]`, `B:[K,P]`, without materializing the transpose.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k, m) = require_2d("matmul_tn", a)?;
    let (_, kb, p) = require_2d("matmul_tn", b)?;
    if k != kb {
        return Err(CoreError::dim("matmul_tn", format!("inner dims {k} and {kb} disagree")));
    }
    let mut out = Tensor::zeros(&[m, p]);
    {
        let (ad, bd, od) = (a.data(), b.data(), out.data_mut());
        for kk in 0..k {
            let arow = &ad[kk * m..(kk + 1) * m];
            let brow = &bd[kk * p..(kk + 1) * p];
            for i in 0..m {
                let aik = arow[i];
                let orow = &mut od[i * p..(i + 1) * p];
                for j in 0..p {
                    orow[j] += aik * brow[j];
                }
            }
        }
    }
    ensure_finite("matmul_tn", &out)?;
    Ok(out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, m, n) = require_2d("transpose", a)?;
    let mut out = Tensor::zeros(&[n, m]);
    {
        let (ad, od) = (a.data(), out.data_mut());
        for i in 0..m {
            for j in 0..n {
                od[j * m + i] = ad[i * n + j];
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation convention, square odd kernels for conv2d)
// ---------------------------------------------------------------------------

/// Valid output range `o` such that `0 <= o*stride + offset < limit`.
fn conv_range(limit: usize, stride: usize, offset: isize, out_len: usize) -> (usize, usize) {
    let start = if offset >= 0 { 0 } else { ((-offset) as usize).div_ceil(stride) };
    let max_in = limit as isize - 1 - offset;
    if max_in < 0 {
        return (0, 0);
    }
    let end = (max_in as usize) / stride + 1;
    (start.min(out_len), end.min(out_len))
}

fn conv_shapes<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 3 {
        return Err(CoreError::dim(op, format!("input must be C×H×W, got {xs:?}")));
    }
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(CoreError::dim(op, format!("weight must be Co×Ci×k×k, got {ws:?}")));
    }
    Ok((xs[0], xs[1], xs[2], ws[0], ws[1], ws[2]))
}

/// 2-d convolution of a `C_in×H×W` image with `C_out×C_in×k×k` weights.
/// `(H + 2·pad − k)` must be divisible by `stride`; there is no implicit
/// floor, a non-integral output size is an error. Even kernels are allowed
/// (stride-2 4×4 layers are the only exact ×2 downsamplers on even sides).
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (ci, h, wd, co, wci, k) = conv_shapes("conv2d", x, w)?;
    if ci != wci {
        return Err(CoreError::dim("conv2d", format!("input channels {ci} != weight channels {wci}")));
    }
    if stride == 0 {
        return Err(CoreError::dim("conv2d", "stride must be positive".to_string()));
    }
    let span_h = h + 2 * pad;
    let span_w = wd + 2 * pad;
    if span_h < k || span_w < k || (span_h - k) % stride != 0 || (span_w - k) % stride != 0 {
        return Err(CoreError::dim(
            "conv2d",
            format!("non-integral output size for input {h}×{wd}, k={k}, stride={stride}, pad={pad}"),
        ));
    }
    let oh = (span_h - k) / stride + 1;
    let ow = (span_w - k) / stride + 1;

    let mut out = Tensor::zeros(&[co, oh, ow]);
    {
        let (xd, wdat, od) = (x.data(), w.data(), out.data_mut());
        for c_out in 0..co {
            for c_in in 0..ci {
                let xplane = &xd[c_in * h * wd..(c_in + 1) * h * wd];
                for kh in 0..k {
                    let off_h = kh as isize - pad as isize;
                    let (h0, h1) = conv_range(h, stride, off_h, oh);
                    for kw in 0..k {
                        let wv = wdat[((c_out * ci + c_in) * k + kh) * k + kw];
                        let off_w = kw as isize - pad as isize;
                        let (w0, w1) = conv_range(wd, stride, off_w, ow);
                        if w0 >= w1 {
                            continue;
                        }
                        let x0 = ((w0 * stride) as isize + off_w) as usize;
                        for o_h in h0..h1 {
                            let ih = ((o_h * stride) as isize + off_h) as usize;
                            let xrow = &xplane[ih * wd..(ih + 1) * wd];
                            let orow = &mut od[(c_out * oh + o_h) * ow..(c_out * oh + o_h + 1) * ow];
                            if stride == 1 {
                                let xs = &xrow[x0..x0 + (w1 - w0)];
                                for (o, &xv) in orow[w0..w1].iter_mut().zip(xs) {
                                    *o += wv * xv;
                                }
                            } else {
                                let xs = xrow[x0..].iter().step_by(stride);
                                for (o, &xv) in orow[w0..w1].iter_mut().zip(xs) {
                                    *o += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    ensure_finite("conv2d", &out)?;
    Ok(out)
}

/// Exact linear adjoint of [`conv2d`] at the same stride/pad:
/// `⟨conv2d(x), y⟩ == ⟨x, conv2d_transpose(y)⟩` for all x, y.
///
/// Input is `C_out×H'×W'`; output is `C_in×H×W` with `H = (H'−1)·stride + k − 2·pad`.
pub fn conv2d_transpose<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (co_x, ih, iw, co, ci, k) = conv_shapes("conv2d_transpose", x, w)?;
    if co_x != co {
        return Err(CoreError::dim(
            "conv2d_transpose",
            format!("input channels {co_x} != weight output channels {co}"),
        ));
    }
    if stride == 0 {
        return Err(CoreError::dim("conv2d_transpose", "stride must be positive".to_string()));
    }
    let span_h = (ih - 1) * stride + k;
    let span_w = (iw - 1) * stride + k;
    if span_h < 2 * pad + 1 || span_w < 2 * pad + 1 {
        return Err(CoreError::dim(
            "conv2d_transpose",
            format!("padding {pad} too large for output span {span_h}×{span_w}"),
        ));
    }
    let oh = span_h - 2 * pad;
    let ow = span_w - 2 * pad;

    let mut out = Tensor::zeros(&[ci, oh, ow]);
    {
        let (xd, wdat, od) = (x.data(), w.data(), out.data_mut());
        for c_out in 0..co {
            let xplane = &xd[c_out * ih * iw..(c_out + 1) * ih * iw];
            for c_in in 0..ci {
                for kh in 0..k {
                    let off_h = kh as isize - pad as isize;
                    let (h0, h1) = conv_range(oh, stride, off_h, ih);
                    for kw in 0..k {
                        let wv = wdat[((c_out * ci + c_in) * k + kh) * k + kw];
                        let off_w = kw as isize - pad as isize;
                        let (w0, w1) = conv_range(ow, stride, off_w, iw);
                        if w0 >= w1 {
                            continue;
                        }
                        let t0 = ((w0 * stride) as isize + off_w) as usize;
                        for i_h in h0..h1 {
                            let t_h = ((i_h * stride) as isize + off_h) as usize;
                            let xrow = &xplane[i_h * iw..(i_h + 1) * iw];
                            let orow = &mut od[(c_in * oh + t_h) * ow..(c_in * oh + t_h + 1) * ow];
                            if stride == 1 {
                                let os = &mut orow[t0..t0 + (w1 - w0)];
                                for (o, &xv) in os.iter_mut().zip(&xrow[w0..w1]) {
                                    *o += wv * xv;
                                }
                            } else {
                                let os = orow[t0..].iter_mut().step_by(stride);
                                for (o, &xv) in os.zip(&xrow[w0..w1]) {
                                    *o += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    ensure_finite("conv2d_transpose", &out)?;
    Ok(out)
}

/// Weight gradient shared by conv2d and conv2d_transpose backward passes:
/// `dw[co][ci][kh][kw] = Σ_{oh,ow} out_side[co][oh][ow] · in_side[ci][oh·s+kh−p][ow·s+kw−p]`.
pub(crate) fn conv2d_weight_grad<T: Scalar>(
    out_side: &Tensor<T>,
    in_side: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let os = out_side.shape();
    let is = in_side.shape();
    let (co, oh, ow) = (os[0], os[1], os[2]);
    let (ci, h, wd) = (is[0], is[1], is[2]);
    let mut dw = Tensor::zeros(&[co, ci, k, k]);
    {
        let (gd, xd, dwd) = (out_side.data(), in_side.data(), dw.data_mut());
        for c_out in 0..co {
            for c_in in 0..ci {
                let xplane = &xd[c_in * h * wd..(c_in + 1) * h * wd];
                for kh in 0..k {
                    let off_h = kh as isize - pad as isize;
                    let (h0, h1) = conv_range(h, stride, off_h, oh);
                    for kw in 0..k {
                        let off_w = kw as isize - pad as isize;
                        let (w0, w1) = conv_range(wd, stride, off_w, ow);
                        let mut acc = T::zero();
                        if w0 < w1 {
                            let x0 = ((w0 * stride) as isize + off_w) as usize;
                            for o_h in h0..h1 {
                                let ih = ((o_h * stride) as isize + off_h) as usize;
                                let grow = &gd[(c_out * oh + o_h) * ow..(c_out * oh + o_h + 1) * ow];
                                let xrow = &xplane[ih * wd..(ih + 1) * wd];
                                if stride == 1 {
                                    let xs = &xrow[x0..x0 + (w1 - w0)];
                                    acc += grow[w0..w1].iter().zip(xs).map(|(&g, &x)| g * x).sum::<T>();
                                } else {
                                    let xs = xrow[x0..].iter().step_by(stride);
                                    acc += grow[w0..w1].iter().zip(xs).map(|(&g, &x)| g * x).sum::<T>();
                                }
                            }
                        }
                        dwd[((c_out * ci + c_in) * k + kh) * k + kw] = acc;
                    }
                }
            }
        }
    }
    ensure_finite("conv2d_weight_grad", &dw)?;
    Ok(dw)
}

/// Add a per-channel bias to a `C×H×W` map.
pub fn channel_bias<T: Scalar>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 3 || b.shape() != [xs[0]] {
        return Err(CoreError::dim(
            "channel_bias",
            format!("input {:?} incompatible with bias {:?}", xs, b.shape()),
        ));
    }
    let (c, hw) = (xs[0], xs[1] * xs[2]);
    let mut out = x.clone();
    {
        let (od, bd) = (out.data_mut(), b.data());
        for ch in 0..c {
            let bias = bd[ch];
            for v in &mut od[ch * hw..(ch + 1) * hw] {
                *v += bias;
            }
        }
    }
    ensure_finite("channel_bias", &out)?;
    Ok(out)
}

/// Per-channel sums of a `C×H×W` gradient (backward of [`channel_bias`]).
pub(crate) fn channel_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let gs = g.shape();
    let (c, hw) = (gs[0], gs[1] * gs[2]);
    let mut out = Tensor::zeros(&[c]);
    for ch in 0..c {
        out.data_mut()[ch] = g.data()[ch * hw..(ch + 1) * hw].iter().copied().sum();
    }
    out
}

// ---------------------------------------------------------------------------
// Row-wise normalizations
// ---------------------------------------------------------------------------

/// Row softmax of an `N×M` matrix with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, m) = require_2d("softmax_rows", x)?;
    ensure_finite("softmax_rows", x)?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(m) {
        softmax_row_in_place(row);
    }
    ensure_finite("softmax_rows", &out)?;
    Ok(out)
}

pub(crate) fn softmax_row_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Rows scaled to unit l2 norm: `x_i / max(‖x_i‖₂, eps)`. Rows with norm
/// below `eps` (e.g. zero rows) are divided by `eps` instead.
pub fn l2_normalize_rows<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (_, _, m) = require_2d("l2_normalize_rows", x)?;
    if eps <= T::zero() {
        return Err(CoreError::Usage("l2_normalize_rows: eps must be positive".into()));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(m) {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    ensure_finite("l2_normalize_rows", &out)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Pointwise ops
// ---------------------------------------------------------------------------

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    require_same_shape("add", a, b)?;
    let out = a.zip(b, |x, y| x + y);
    ensure_finite("add", &out)?;
    Ok(out)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    require_same_shape("sub", a, b)?;
    let out = a.zip(b, |x, y| x - y);
    ensure_finite("sub", &out)?;
    Ok(out)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    require_same_shape("mul", a, b)?;
    let out = a.zip(b, |x, y| x * y);
    ensure_finite("mul", &out)?;
    Ok(out)
}

pub fn scale<T: Scalar>(x: &Tensor<T>, c: T) -> Tensor<T> {
    x.map(|v| v * c)
}

/// `mul_c · x + add_c`, elementwise.
pub fn affine<T: Scalar>(x: &Tensor<T>, mul_c: T, add_c: T) -> Tensor<T> {
    x.map(|v| v * mul_c + add_c)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, alpha: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * alpha })
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

pub fn abs<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.abs())
}

/// `ln(clamp(x, eps, 1−eps))`; safe for probabilities at the 0/1 boundary.
pub fn log_clamped<T: Scalar>(x: &Tensor<T>, eps: T) -> Tensor<T> {
    let hi = T::one() - eps;
    x.map(|v| v.max(eps).min(hi).ln())
}

/// `1 / max(x, eps)`; the denominator guard used by attention kernels.
pub fn recip_clamped<T: Scalar>(x: &Tensor<T>, eps: T) -> Tensor<T> {
    x.map(|v| T::one() / v.max(eps))
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

fn reduced_shape(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    for (i, &a) in axes.iter().enumerate() {
        if a >= shape.len() {
            return Err(CoreError::dim(op, format!("axis {a} out of range for shape {shape:?}")));
        }
        if axes[..i].contains(&a) {
            return Err(CoreError::dim(op, format!("duplicate axis {a}")));
        }
    }
    Ok(shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &e)| e)
        .collect())
}

/// Map each flat input index to the flat output index with `axes` removed.
fn fold_reduce<T: Scalar>(x: &Tensor<T>, axes: &[usize], out_shape: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let rank = shape.len();
    let mut out = Tensor::zeros(out_shape);
    let od = out.data_mut();
    // Strides of the output laid over the kept input axes.
    let mut kept_stride = vec![0usize; rank];
    let mut s = 1;
    for i in (0..rank).rev() {
        if !axes.contains(&i) {
            kept_stride[i] = s;
            s *= shape[i];
        }
    }
    let mut idx = vec![0usize; rank];
    for &v in x.data() {
        let mut o = 0;
        for i in 0..rank {
            o += idx[i] * kept_stride[i];
        }
        od[o] += v;
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    out
}

/// Sum over the given axes; `axes` empty means over all axes (scalar result).
pub fn reduce_sum<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let all: Vec<usize> = (0..x.shape().len()).collect();
    let axes = if axes.is_empty() { &all[..] } else { axes };
    let out_shape = reduced_shape("reduce_sum", x.shape(), axes)?;
    let out = fold_reduce(x, axes, &out_shape);
    ensure_finite("reduce_sum", &out)?;
    Ok(out)
}

/// Mean over the given axes (sum divided by the reduced element count).
pub fn reduce_mean<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let all: Vec<usize> = (0..x.shape().len()).collect();
    let axes = if axes.is_empty() { &all[..] } else { axes };
    let sum = reduce_sum(x, axes)?;
    let count: usize = axes.iter().map(|&a| x.shape()[a]).product();
    Ok(scale(&sum, T::one() / T::from_usize(count).unwrap()))
}

/// Broadcast `src` (the result of reducing `target_shape` over `axes`) back
/// to `target_shape`. Backward companion of the reductions.
pub(crate) fn broadcast_reduced<T: Scalar>(src: &Tensor<T>, target_shape: &[usize], axes: &[usize]) -> Tensor<T> {
    let all: Vec<usize> = (0..target_shape.len()).collect();
    let axes = if axes.is_empty() { &all[..] } else { axes };
    let rank = target_shape.len();
    let mut kept_stride = vec![0usize; rank];
    let mut s = 1;
    for i in (0..rank).rev() {
        if !axes.contains(&i) {
            kept_stride[i] = s;
            s *= target_shape[i];
        }
    }
    let mut out = Tensor::zeros(target_shape);
    let (od, sd) = (out.data_mut(), src.data());
    let mut idx = vec![0usize; rank];
    for o in od.iter_mut() {
        let mut src_idx = 0;
        for i in 0..rank {
            src_idx += idx[i] * kept_stride[i];
        }
        *o = sd[src_idx];
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < target_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Concat / split
// ---------------------------------------------------------------------------

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| CoreError::Usage("concat: no inputs".into()))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(CoreError::dim("concat", format!("axis {axis} out of range for rank {rank}")));
    }
    let mut concat_extent = 0;
    for x in xs {
        if x.shape().len() != rank {
            return Err(CoreError::dim("concat", "rank mismatch".to_string()));
        }
        for d in 0..rank {
            if d != axis && x.shape()[d] != first.shape()[d] {
                return Err(CoreError::dim(
                    "concat",
                    format!("extent mismatch at axis {d}: {:?} vs {:?}", x.shape(), first.shape()),
                ));
            }
        }
        concat_extent += x.shape()[axis];
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = concat_extent;

    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut out = Tensor::zeros(&out_shape);
    {
        let od = out.data_mut();
        let out_block = concat_extent * inner;
        let mut offset = 0;
        for x in xs {
            let block = x.shape()[axis] * inner;
            for o in 0..outer {
                od[o * out_block + offset..o * out_block + offset + block]
                    .copy_from_slice(&x.data()[o * block..(o + 1) * block]);
            }
            offset += block;
        }
    }
    Ok(out)
}

/// Inverse of [`concat`]: cut `x` along `axis` into pieces of the given extents.
pub fn split<T: Scalar>(x: &Tensor<T>, axis: usize, extents: &[usize]) -> Result<Vec<Tensor<T>>> {
    let rank = x.shape().len();
    if axis >= rank {
        return Err(CoreError::dim("split", format!("axis {axis} out of range for rank {rank}")));
    }
    if extents.iter().sum::<usize>() != x.shape()[axis] {
        return Err(CoreError::dim(
            "split",
            format!("extents {extents:?} do not sum to axis extent {}", x.shape()[axis]),
        ));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let in_block = x.shape()[axis] * inner;

    let mut parts = Vec::with_capacity(extents.len());
    let mut offset = 0;
    for &e in extents {
        let mut shape = x.shape().to_vec();
        shape[axis] = e;
        let block = e * inner;
        let mut part = Tensor::zeros(&shape);
        for o in 0..outer {
            part.data_mut()[o * block..(o + 1) * block]
                .copy_from_slice(&x.data()[o * in_block + offset..o * in_block + offset + block]);
        }
        offset += block;
        parts.push(part);
    }
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(vec![rows, cols], data.to_vec()).unwrap()
    }

    /// Independent scalar triple-loop matrix product.
    fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let p = b.shape()[1];
        let mut out = Tensor::zeros(&[m, p]);
        for i in 0..m {
            for j in 0..p {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a.data()[i * k + kk] * b.data()[kk * p + j];
                }
                out.data_mut()[i * p + j] = acc;
            }
        }
        out
    }

    /// Independent six-loop convolution evaluation.
    fn conv2d_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[co, oh, ow]);
        for c_out in 0..co {
            for o_h in 0..oh {
                for o_w in 0..ow {
                    let mut acc = 0.0;
                    for c_in in 0..ci {
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = (o_h * stride + kh) as isize - pad as isize;
                                let iw = (o_w * stride + kw) as isize - pad as isize;
                                if ih >= 0 && (ih as usize) < h && iw >= 0 && (iw as usize) < wd {
                                    acc += x.at(&[c_in, ih as usize, iw as usize])
                                        * w.at(&[c_out, c_in, kh, kw]);
                                }
                            }
                        }
                    }
                    out.data_mut()[(c_out * oh + o_h) * ow + o_w] = acc;
                }
            }
        }
        out
    }

    fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn inner<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> T {
        a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum()
    }

    #[test]
    fn matmul_identity() {
        let eye = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let a = t2(2, 2, &[3.0, -1.0, 2.5, 4.0]);
        assert_eq!(matmul(&eye, &a).unwrap(), a);
    }

    #[test]
    fn matmul_two_by_two() {
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c, t2(2, 2, &[19.0, 22.0, 43.0, 50.0]));
        assert_eq!(c, matmul_oracle(&a, &b));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        assert!(max_abs_diff(&matmul(&a, &b).unwrap(), &matmul_oracle(&a, &b)) < 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_variants_match_plain_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        let nt = matmul_nt(&a, &b).unwrap();
        assert!(max_abs_diff(&nt, &matmul(&a, &transpose(&b).unwrap()).unwrap()) < 1e-14);
        let c = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let d = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
        let tn = matmul_tn(&c, &d).unwrap();
        assert!(max_abs_diff(&tn, &matmul(&transpose(&c).unwrap(), &d).unwrap()) < 1e-14);
    }

    #[test]
    fn conv2d_one_by_one_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[2, 4, 4], 1.0, &mut rng);
        let mut w = Tensor::<f64>::zeros(&[2, 2, 1, 1]);
        w.data_mut()[0] = 1.0; // w[0][0]
        w.data_mut()[3] = 1.0; // w[1][1]
        let y = conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv2d_constant_image_interior_sum() {
        let c = 0.7;
        let x = Tensor::<f64>::filled(&[1, 5, 5], c);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &w, 1, 0).unwrap();
        for &v in y.data() {
            assert!((v - 9.0 * c).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_matches_six_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let x = Tensor::<f64>::randn(&[3, 5, 5], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[2, 3, 3, 3], 1.0, &mut rng);
            let got = conv2d(&x, &w, stride, pad).unwrap();
            let want = conv2d_oracle(&x, &w, stride, pad);
            assert!(max_abs_diff(&got, &want) < 1e-12, "stride={stride} pad={pad}");
        }
    }

    #[test]
    fn conv2d_non_integral_output_errors() {
        // (6 - 3) is not divisible by stride 2.
        let x = Tensor::<f64>::zeros(&[1, 6, 6]);
        let w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        assert!(conv2d(&x, &w, 2, 0).is_err());
    }

    #[test]
    fn conv2d_even_kernel_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::<f64>::randn(&[2, 6, 6], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[3, 2, 4, 4], 1.0, &mut rng);
        let got = conv2d(&x, &w, 2, 1).unwrap();
        assert_eq!(got.shape(), &[3, 3, 3]);
        assert!(max_abs_diff(&got, &conv2d_oracle(&x, &w, 2, 1)) < 1e-12);
    }

    #[test]
    fn conv2d_transpose_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let (stride, pad) = [(1, 0), (1, 1), (2, 1), (2, 0)][trial % 4];
            let x = Tensor::<f64>::randn(&[2, 5, 5], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut rng);
            let fwd = conv2d(&x, &w, stride, pad).unwrap();
            let y = Tensor::<f64>::randn(fwd.shape(), 1.0, &mut rng);
            let back = conv2d_transpose(&y, &w, stride, pad).unwrap();
            assert_eq!(back.shape(), x.shape());
            let lhs = inner(&fwd, &y);
            let rhs = inner(&x, &back);
            assert!((lhs - rhs).abs() < 1e-10, "trial {trial}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv2d_transpose_stride2_expansion() {
        // 1×1 input, 2×2 all-ones kernel, stride 2: every output pixel equals the input value.
        let x = Tensor::<f64>::filled(&[1, 1, 1], 3.25);
        let w = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        let y = conv2d_transpose(&x, &w, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        for &v in y.data() {
            assert_eq!(v, 3.25);
        }
    }

    #[test]
    fn conv2d_transpose_zero_input() {
        let x = Tensor::<f64>::zeros(&[2, 3, 3]);
        let w = Tensor::<f64>::ones(&[2, 1, 3, 3]);
        let y = conv2d_transpose(&x, &w, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_rows_uniform_for_equal_logits() {
        let x = Tensor::<f64>::filled(&[3, 4], 2.5);
        let y = softmax_rows(&x).unwrap();
        for &v in y.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_closed_form() {
        let x = t2(1, 2, &[0.0, 3.0_f64.ln()]);
        let y = softmax_rows(&x).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
        let shifted = x.map(|v| v + 13.75);
        let a = softmax_rows(&x).unwrap();
        let b = softmax_rows(&shifted).unwrap();
        assert!(max_abs_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let x = t2(1, 2, &[3.0, 4.0]);
        let y = l2_normalize_rows(&x, 1e-12).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15);
        assert!((y.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_unit_row_unchanged() {
        let x = t2(1, 3, &[1.0, 0.0, 0.0]);
        assert_eq!(l2_normalize_rows(&x, 1e-12).unwrap(), x);
    }

    #[test]
    fn l2_normalize_zero_row_stays_zero() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        let y = l2_normalize_rows(&x, 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_examples() {
        let x = Tensor::from_vec(vec![2], vec![-1.0f64, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        let z = Tensor::<f64>::scalar(0.0);
        assert!((sigmoid(&z).item().unwrap() - 0.5).abs() < 1e-15);
        let clamped = log_clamped(&z, 1e-7);
        assert!((clamped.item().unwrap() - (1e-7f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn pointwise_shape_mismatch_errors() {
        let a = Tensor::<f64>::zeros(&[2, 2]);
        let b = Tensor::<f64>::zeros(&[4]);
        assert!(add(&a, &b).is_err());
        assert!(sub(&a, &b).is_err());
        assert!(mul(&a, &b).is_err());
    }

    #[test]
    fn reduce_examples() {
        let x = Tensor::<f64>::ones(&[2, 3]);
        assert_eq!(reduce_sum(&x, &[]).unwrap().item().unwrap(), 6.0);
        let v = Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(reduce_mean(&v, &[]).unwrap().item().unwrap(), 2.5);
    }

    #[test]
    fn reduce_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(&[3, 4, 5], 1.0, &mut rng);
        let got = reduce_sum(&x, &[1]).unwrap();
        assert_eq!(got.shape(), &[3, 5]);
        for i in 0..3 {
            for k in 0..5 {
                let mut acc = 0.0;
                for j in 0..4 {
                    acc += x.at(&[i, j, k]);
                }
                assert!((got.at(&[i, k]) - acc).abs() < 1e-12);
            }
        }
        let m = reduce_mean(&x, &[0, 2]).unwrap();
        assert_eq!(m.shape(), &[4]);
        for j in 0..4 {
            let mut acc = 0.0;
            for i in 0..3 {
                for k in 0..5 {
                    acc += x.at(&[i, j, k]);
                }
            }
            assert!((m.at(&[j]) - acc / 15.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reduce_invalid_axis_errors() {
        let x = Tensor::<f64>::zeros(&[2, 2]);
        assert!(reduce_sum(&x, &[2]).is_err());
        assert!(reduce_sum(&x, &[0, 0]).is_err());
    }

    #[test]
    fn concat_then_split_round_trips() {
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let cat = concat(&[&a, &b], 0).unwrap();
        assert_eq!(cat.shape(), &[4, 2]);
        let parts = split(&cat, 0, &[2, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn split_four_heads_on_feature_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::randn(&[3, 8], 1.0, &mut rng);
        let heads = split(&x, 1, &[2, 2, 2, 2]).unwrap();
        assert_eq!(heads.len(), 4);
        for (h, head) in heads.iter().enumerate() {
            assert_eq!(head.shape(), &[3, 2]);
            for i in 0..3 {
                for d in 0..2 {
                    assert_eq!(head.at(&[i, d]), x.at(&[i, h * 2 + d]));
                }
            }
        }
    }

    #[test]
    fn concat_single_tensor_is_identity() {
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(concat(&[&a], 1).unwrap(), a);
    }

    #[test]
    fn concat_extent_mismatch_errors() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 4]);
        assert!(concat(&[&a, &b], 0).is_err());
        assert!(concat(&[&a, &b], 1).is_ok());
    }

    #[test]
    fn non_finite_input_is_surfaced() {
        let mut x = Tensor::<f64>::zeros(&[1, 2]);
        x.data_mut()[0] = f64::NAN;
        assert!(matches!(softmax_rows(&x), Err(CoreError::NonFinite { .. })));
    }

    #[test]
    fn ops_are_deterministic_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f32>::randn(&[3, 7, 7], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(&[4, 3, 3, 3], 0.5, &mut rng);
        let a = conv2d(&x, &w, 2, 1).unwrap();
        let b = conv2d(&x, &w, 2, 1).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn softmax_rows_are_stochastic(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let x = Tensor::from_vec(vec![3, 4], vals).unwrap();
            let y = softmax_rows(&x).unwrap();
            for row in y.data().chunks(4) {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn concat_split_inverse(
            rows_a in 1usize..4,
            rows_b in 1usize..4,
            cols in 1usize..4,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::<f64>::randn(&[rows_a, cols], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[rows_b, cols], 1.0, &mut rng);
            let cat = concat(&[&a, &b], 0).unwrap();
            let parts = split(&cat, 0, &[rows_a, rows_b]).unwrap();
            prop_assert_eq!(&parts[0], &a);
            prop_assert_eq!(&parts[1], &b);
        }

        #[test]
        fn l2_normalized_rows_have_unit_or_smaller_norm(vals in proptest::collection::vec(-5.0f64..5.0, 8)) {
            let x = Tensor::from_vec(vec![2, 4], vals).unwrap();
            let y = l2_normalize_rows(&x, 1e-6).unwrap();
            for row in y.data().chunks(4) {
                let norm: f64 = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
                prop_assert!(norm <= 1.0 + 1e-12);
            }
        }
    }
}
