//! Forward implementations of the network's neural operations.
//!
//! Every operation has an exact shape contract and a deterministic
//! accumulation order. For one convolution output element the contributions
//! are summed over `(in-channel-within-group, ky, kx)` ascending, skipping
//! padded positions, with the bias added last; pooling windows are scanned in
//! row-major order; bilinear resizing computes source coordinates and blend
//! weights in `f64`, evaluates the four-neighbor blend as nested lerps in
//! `f64` and rounds to the output dtype once. The naive oracles used by the
//! tests follow the same definitions, which makes bit-for-bit comparison in
//! double precision meaningful.

use crate::error::{Error, Result};
use crate::tensor::{axpy, LabelMap, Scalar, Tensor4};

/// Parameters of a 2D convolution over NCHW tensors.
///
/// `groups == 1` is a standard (or pointwise, `k == 1`) convolution;
/// `groups == c_in` with a `(c_in, 1, k, k)` weight is depthwise.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams<'a, S: Scalar> {
    /// Weight tensor of shape `(c_out, c_in_per_group, k, k)`, `k` odd.
    pub weight: &'a Tensor4<S>,
    /// Per-output-channel bias, or `None`.
    pub bias: Option<&'a [S]>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

/// Pooling window kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolParams {
    pub kind: PoolKind,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

/// The learnable scalar pair of a fusion site: `theta` weighs the resident
/// (shallow/spatial) input, `sigma` the propagated (deep/context) input.
/// Neither is constrained in sign or scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeights<S: Scalar> {
    pub theta: S,
    pub sigma: S,
}

/// `floor((in + 2 * padding - k) / stride) + 1`, the shared output-size rule
/// of convolution and pooling.
pub fn conv_out_dim(in_dim: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = in_dim + 2 * padding;
    if padded < k {
        return Err(Error::InvalidGeometry(format!(
            "window {k} larger than padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn validate_conv<S: Scalar>(x: &Tensor4<S>, p: &ConvParams<S>) -> Result<(usize, usize, usize)> {
    let (_, c_in, _, _) = x.shape();
    let (c_out, c_in_pg, kh, kw) = p.weight.shape();
    if kh != kw {
        return Err(Error::InvalidShape(format!("kernel must be square, got {kh}x{kw}")));
    }
    if kh % 2 == 0 {
        return Err(Error::InvalidShape(format!("kernel size must be odd, got {kh}")));
    }
    if p.stride == 0 {
        return Err(Error::InvalidGeometry("stride must be >= 1".into()));
    }
    if p.groups == 0 || c_in % p.groups != 0 || c_out % p.groups != 0 {
        return Err(Error::ShapeMismatch(format!(
            "groups {} must divide c_in {c_in} and c_out {c_out}",
            p.groups
        )));
    }
    if c_in_pg != c_in / p.groups {
        return Err(Error::ShapeMismatch(format!(
            "weight expects {c_in_pg} channels per group, input provides {}",
            c_in / p.groups
        )));
    }
    if let Some(b) = p.bias {
        if b.len() != c_out {
            return Err(Error::ShapeMismatch(format!(
                "bias length {} != c_out {c_out}",
                b.len()
            )));
        }
    }
    Ok((c_out, c_in_pg, kh))
}

/// Grouped 2D convolution with zero padding.
///
/// Output spatial size follows [`conv_out_dim`]; each output element is
/// `bias_o + sum over the kernel window and in-channels of weight * input`,
/// with positions outside the input skipped.
pub fn conv2d<S: Scalar>(x: &Tensor4<S>, p: &ConvParams<S>) -> Result<Tensor4<S>> {
    let (n_batch, _, in_h, in_w) = x.shape();
    let (c_out, c_in_pg, k) = validate_conv(x, p)?;
    let out_h = conv_out_dim(in_h, k, p.stride, p.padding)?;
    let out_w = conv_out_dim(in_w, k, p.stride, p.padding)?;
    let c_out_pg = c_out / p.groups;
    let stride = p.stride;
    let pad = p.padding;

    let mut out = Tensor4::zeros((n_batch, c_out, out_h, out_w))?;
    let mut acc = vec![S::ZERO; out_w];
    for n in 0..n_batch {
        for g in 0..p.groups {
            for oc_local in 0..c_out_pg {
                let oc = g * c_out_pg + oc_local;
                for oy in 0..out_h {
                    acc.fill(S::ZERO);
                    for icg in 0..c_in_pg {
                        let ic = g * c_in_pg + icg;
                        for ky in 0..k {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= in_h {
                                continue;
                            }
                            let xrow = x.row(n, ic, iy - pad);
                            let wrow = p.weight.row(oc, icg, ky);
                            for (kx, &wv) in wrow.iter().enumerate() {
                                // ix = ox * stride + kx - pad must stay in [0, in_w)
                                let ox_min = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
                                if in_w + pad <= kx {
                                    continue;
                                }
                                let ox_max = ((in_w - 1 + pad - kx) / stride).min(out_w - 1);
                                if ox_min > ox_max {
                                    continue;
                                }
                                let ix0 = ox_min * stride + kx - pad;
                                // Each output element still accumulates its
                                // terms in (icg, ky, kx) order; the stride-1
                                // slice form only lets the loop vectorize.
                                if stride == 1 {
                                    let n_el = ox_max - ox_min + 1;
                                    let xs = &xrow[ix0..ix0 + n_el];
                                    for (a, &xv) in acc[ox_min..=ox_max].iter_mut().zip(xs) {
                                        *a += wv * xv;
                                    }
                                } else {
                                    let mut ix = ix0;
                                    for a in &mut acc[ox_min..=ox_max] {
                                        *a += wv * xrow[ix];
                                        ix += stride;
                                    }
                                }
                            }
                        }
                    }
                    let out_row = out.row_mut(n, oc, oy);
                    match p.bias {
                        Some(b) => {
                            let bv = b[oc];
                            for (o, &a) in out_row.iter_mut().zip(&acc) {
                                *o = a + bv;
                            }
                        }
                        None => out_row.copy_from_slice(&acc),
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Depthwise `k x k` convolution followed by a pointwise `1 x 1` convolution.
///
/// Exactly `conv2d(conv2d(x, dw), pw)`; parameter count is
/// `k^2 * c_in + c_in * c_out (+ c_out with bias)`.
pub fn separable_conv<S: Scalar>(
    x: &Tensor4<S>,
    dw: &ConvParams<S>,
    pw: &ConvParams<S>,
) -> Result<Tensor4<S>> {
    let c_in = x.channels();
    let (dw_out, dw_cpg, _, _) = dw.weight.shape();
    if dw.groups != c_in || dw_out != c_in || dw_cpg != 1 {
        return Err(Error::ShapeMismatch(format!(
            "depthwise stage must have groups == c_out == c_in == {c_in}, got groups {} weight {:?}",
            dw.groups,
            dw.weight.shape()
        )));
    }
    let (_, _, pk, _) = pw.weight.shape();
    if pk != 1 || pw.groups != 1 {
        return Err(Error::ShapeMismatch(format!(
            "pointwise stage must be 1x1 with groups 1, got k {pk} groups {}",
            pw.groups
        )));
    }
    conv2d(&conv2d(x, dw)?, pw)
}

/// Max or average pooling. Max ignores padded positions; average divides by
/// the count of in-bounds positions in the window, not `k^2`.
pub fn pool2d<S: Scalar>(x: &Tensor4<S>, p: &PoolParams) -> Result<Tensor4<S>> {
    if p.k % 2 == 0 || p.k == 0 {
        return Err(Error::InvalidGeometry(format!("pool kernel must be odd, got {}", p.k)));
    }
    if p.padding >= p.k {
        return Err(Error::InvalidGeometry(format!(
            "pool padding {} must be < kernel {}",
            p.padding, p.k
        )));
    }
    if p.stride == 0 {
        return Err(Error::InvalidGeometry("stride must be >= 1".into()));
    }
    let (n_batch, c, in_h, in_w) = x.shape();
    let out_h = conv_out_dim(in_h, p.k, p.stride, p.padding)?;
    let out_w = conv_out_dim(in_w, p.k, p.stride, p.padding)?;
    let mut out = Tensor4::zeros((n_batch, c, out_h, out_w))?;
    for n in 0..n_batch {
        for ch in 0..c {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    // Window rows/cols are oy*s + k_i - pad; clamp to the input.
                    let y_lo = (oy * p.stride).saturating_sub(p.padding);
                    let y_hi = (oy * p.stride + p.k - p.padding).min(in_h);
                    let x_lo = (ox * p.stride).saturating_sub(p.padding);
                    let x_hi = (ox * p.stride + p.k - p.padding).min(in_w);
                    let v = match p.kind {
                        PoolKind::Max => {
                            let mut best = S::NEG_INFINITY;
                            for iy in y_lo..y_hi {
                                for &xv in &x.row(n, ch, iy)[x_lo..x_hi] {
                                    if xv > best {
                                        best = xv;
                                    }
                                }
                            }
                            best
                        }
                        PoolKind::Avg => {
                            let mut sum = S::ZERO;
                            let mut count = 0usize;
                            for iy in y_lo..y_hi {
                                for &xv in &x.row(n, ch, iy)[x_lo..x_hi] {
                                    sum += xv;
                                    count += 1;
                                }
                            }
                            sum / S::from_f64(count as f64)
                        }
                    };
                    out.set(n, ch, oy, ox, v);
                }
            }
        }
    }
    Ok(out)
}

/// Precomputed 1D sampling for one output axis: source neighbors and the
/// fractional blend weight, using the half-pixel convention
/// `src = (dst + 0.5) * (in / out) - 0.5` clamped to the borders.
pub(crate) fn bilinear_axis(in_dim: usize, out_dim: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_dim as f64 / out_dim as f64;
    (0..out_dim)
        .map(|d| {
            let src = (d as f64 + 0.5) * scale - 0.5;
            let i0 = src.floor();
            let frac = src - i0;
            let lo = (i0.max(0.0) as usize).min(in_dim - 1);
            let hi = ((i0 + 1.0).max(0.0) as usize).min(in_dim - 1);
            (lo, hi, frac)
        })
        .collect()
}

/// Bilinear resize with the half-pixel convention.
///
/// The blend is evaluated in `f64` as nested lerps,
/// `v = top + fy * (bottom - top)` with `top = a + fx * (b - a)`, so constant
/// inputs are reproduced exactly and `out == in` sizes are the identity.
pub fn bilinear_resize<S: Scalar>(x: &Tensor4<S>, out_h: usize, out_w: usize) -> Result<Tensor4<S>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidShape("resize target must be >= 1".into()));
    }
    let (n_batch, c, in_h, in_w) = x.shape();
    let ys = bilinear_axis(in_h, out_h);
    let xs = bilinear_axis(in_w, out_w);
    let mut out = Tensor4::zeros((n_batch, c, out_h, out_w))?;
    for n in 0..n_batch {
        for ch in 0..c {
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let row0 = x.row(n, ch, y0);
                let row1 = x.row(n, ch, y1);
                let out_row = out.row_mut(n, ch, oy);
                for (o, &(x0, x1, fx)) in out_row.iter_mut().zip(&xs) {
                    let a = row0[x0].to_f64();
                    let b = row0[x1].to_f64();
                    let c0 = row1[x0].to_f64();
                    let d = row1[x1].to_f64();
                    let top = a + fx * (b - a);
                    let bottom = c0 + fx * (d - c0);
                    *o = S::from_f64(top + fy * (bottom - top));
                }
            }
        }
    }
    Ok(out)
}

/// The learnable weighted sum fusing a shallow feature `s` with a context
/// feature `c` already resized to `s`'s resolution:
/// `out = theta * s + sigma * c`.
pub fn weighted_fusion<S: Scalar>(
    s: &Tensor4<S>,
    c: &Tensor4<S>,
    w: FusionWeights<S>,
) -> Result<Tensor4<S>> {
    axpy(w.theta, s, w.sigma, c)
}

/// Mean softmax cross-entropy over non-ignored pixels, with its gradient
/// w.r.t. the logits. The gradient rows of ignored pixels are zero; over each
/// non-ignored pixel the gradient sums to zero across classes.
pub fn softmax_cross_entropy<S: Scalar>(
    logits: &Tensor4<S>,
    labels: &LabelMap,
    ignore_index: u8,
) -> Result<(f64, Tensor4<S>)> {
    let (n_batch, c, h, w) = logits.shape();
    if labels.shape() != (n_batch, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "labels {:?} vs logits {:?}",
            labels.shape(),
            logits.shape()
        )));
    }
    if c > 255 {
        return Err(Error::Config(format!("at most 255 classes supported, got {c}")));
    }
    let mut grad = Tensor4::zeros(logits.shape())?;
    let mut loss_sum = 0.0f64;
    let mut valid = 0usize;
    let mut probs = vec![S::ZERO; c];
    for n in 0..n_batch {
        for y in 0..h {
            for x in 0..w {
                let label = labels.at(n, y, x);
                if label == ignore_index {
                    continue;
                }
                if label as usize >= c {
                    return Err(Error::Label(format!(
                        "label {label} out of range for {c} classes at ({n},{y},{x})"
                    )));
                }
                let mut max = S::NEG_INFINITY;
                for ch in 0..c {
                    let v = logits.at(n, ch, y, x);
                    if v > max {
                        max = v;
                    }
                }
                let mut denom = S::ZERO;
                for (ch, p) in probs.iter_mut().enumerate() {
                    let e = (logits.at(n, ch, y, x) - max).exp();
                    *p = e;
                    denom += e;
                }
                let l = label as usize;
                // -log softmax = log(denom) - (v_label - max)
                loss_sum += (denom.ln() - (logits.at(n, l, y, x) - max)).to_f64();
                valid += 1;
                for (ch, p) in probs.iter().enumerate() {
                    let mut g = *p / denom;
                    if ch == l {
                        g = g - S::ONE;
                    }
                    grad.set(n, ch, y, x, g);
                }
            }
        }
    }
    if valid == 0 {
        return Ok((0.0, grad));
    }
    let inv = S::from_f64(1.0 / valid as f64);
    for g in grad.data_mut() {
        *g = *g * inv;
    }
    Ok((loss_sum / valid as f64, grad))
}

/// Per-pixel index of the maximum logit; ties resolve to the lowest class.
pub fn argmax_labels<S: Scalar>(logits: &Tensor4<S>) -> Result<LabelMap> {
    let (n_batch, c, h, w) = logits.shape();
    if c > 255 {
        return Err(Error::Config(format!("at most 255 classes supported, got {c}")));
    }
    let mut out = LabelMap::filled(n_batch, h, w, 0);
    for n in 0..n_batch {
        for y in 0..h {
            for x in 0..w {
                let mut best = logits.at(n, 0, y, x);
                let mut best_c = 0u8;
                for ch in 1..c {
                    let v = logits.at(n, ch, y, x);
                    if v > best {
                        best = v;
                        best_c = ch as u8;
                    }
                }
                out.set(n, y, x, best_c);
            }
        }
    }
    Ok(out)
}
