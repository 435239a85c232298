//! Manual backward pass and finite-difference verification.
//!
//! [`backward`] walks a graph in reverse topological order, consuming the
//! activations retained by [`forward_retained`](crate::graph::forward_retained)
//! and accumulating gradients for every parameter slot and for the network
//! input. Max-pool routes gradient to the window argmax (first occurrence in
//! row-major order on ties), average pooling distributes uniformly over the
//! valid positions, and bilinear resizing transposes its interpolation
//! weights.
//!
//! [`finite_diff_check`] is the independent numeric oracle: central
//! differences `(f(w + eps e_i) - f(w - eps e_i)) / (2 eps)` per coordinate,
//! always run in double precision.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Activations, LayerKind, ModelGraph, Src, WeightStore};
use crate::nnops::{bilinear_axis, softmax_cross_entropy, PoolKind, PoolParams};
use crate::rng::Rng;
use crate::tensor::{LabelMap, Scalar, Tensor4, UnaryKind};

/// Gradients of one backward pass: a tensor per trainable slot (zero where
/// the forward pass never touched the slot) and the gradient w.r.t. the
/// network input.
pub struct GradStore<S: Scalar> {
    pub slots: WeightStore<S>,
    pub input: Tensor4<S>,
}

fn add_into<S: Scalar>(dst: &mut Tensor4<S>, src: &Tensor4<S>) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<S: Scalar>(
    x: &Tensor4<S>,
    weight: &Tensor4<S>,
    stride: usize,
    padding: usize,
    groups: usize,
    g_out: &Tensor4<S>,
    dx: &mut Tensor4<S>,
    dw: &mut Tensor4<S>,
    mut db: Option<&mut Tensor4<S>>,
) {
    let (n_batch, _, in_h, in_w) = x.shape();
    let (c_out, c_in_pg, k, _) = weight.shape();
    let (_, _, out_h, out_w) = g_out.shape();
    let c_out_pg = c_out / groups;
    for n in 0..n_batch {
        for g in 0..groups {
            for oc_local in 0..c_out_pg {
                let oc = g * c_out_pg + oc_local;
                for oy in 0..out_h {
                    let grow = g_out.row(n, oc, oy);
                    if let Some(db) = db.as_deref_mut() {
                        let mut s = S::ZERO;
                        for &v in grow {
                            s += v;
                        }
                        db.data_mut()[oc] += s;
                    }
                    for icg in 0..c_in_pg {
                        let ic = g * c_in_pg + icg;
                        for ky in 0..k {
                            let iy = oy * stride + ky;
                            if iy < padding || iy - padding >= in_h {
                                continue;
                            }
                            let xrow = x.row(n, ic, iy - padding);
                            let dx_start = dx.flat_index(n, ic, iy - padding, 0);
                            for kx in 0..k {
                                let ox_min =
                                    if kx >= padding { 0 } else { (padding - kx).div_ceil(stride) };
                                if in_w + padding <= kx {
                                    continue;
                                }
                                let ox_max = ((in_w - 1 + padding - kx) / stride).min(out_w - 1);
                                if ox_min > ox_max {
                                    continue;
                                }
                                let wv = weight.at(oc, icg, ky, kx);
                                let mut wsum = S::ZERO;
                                let ix0 = ox_min * stride + kx - padding;
                                let dxrow = &mut dx.data_mut()[dx_start..dx_start + in_w];
                                if stride == 1 {
                                    let n_el = ox_max - ox_min + 1;
                                    let gs = &grow[ox_min..=ox_max];
                                    for ((d, &xv), &go) in dxrow[ix0..ix0 + n_el]
                                        .iter_mut()
                                        .zip(&xrow[ix0..ix0 + n_el])
                                        .zip(gs)
                                    {
                                        *d += wv * go;
                                        wsum += xv * go;
                                    }
                                } else {
                                    let mut ix = ix0;
                                    for &go in &grow[ox_min..=ox_max] {
                                        dxrow[ix] += wv * go;
                                        wsum += xrow[ix] * go;
                                        ix += stride;
                                    }
                                }
                                let widx = weight.flat_index(oc, icg, ky, kx);
                                dw.data_mut()[widx] += wsum;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn pool_backward<S: Scalar>(x: &Tensor4<S>, p: &PoolParams, g_out: &Tensor4<S>, dx: &mut Tensor4<S>) {
    let (n_batch, c, in_h, in_w) = x.shape();
    let (_, _, out_h, out_w) = g_out.shape();
    for n in 0..n_batch {
        for ch in 0..c {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let g = g_out.at(n, ch, oy, ox);
                    let y_lo = (oy * p.stride).saturating_sub(p.padding);
                    let y_hi = (oy * p.stride + p.k - p.padding).min(in_h);
                    let x_lo = (ox * p.stride).saturating_sub(p.padding);
                    let x_hi = (ox * p.stride + p.k - p.padding).min(in_w);
                    match p.kind {
                        PoolKind::Max => {
                            let mut best = S::NEG_INFINITY;
                            let mut best_pos = (y_lo, x_lo);
                            for iy in y_lo..y_hi {
                                for ix in x_lo..x_hi {
                                    let v = x.at(n, ch, iy, ix);
                                    if v > best {
                                        best = v;
                                        best_pos = (iy, ix);
                                    }
                                }
                            }
                            let idx = dx.flat_index(n, ch, best_pos.0, best_pos.1);
                            dx.data_mut()[idx] += g;
                        }
                        PoolKind::Avg => {
                            let count = (y_hi - y_lo) * (x_hi - x_lo);
                            let share = g / S::from_f64(count as f64);
                            for iy in y_lo..y_hi {
                                for ix in x_lo..x_hi {
                                    let idx = dx.flat_index(n, ch, iy, ix);
                                    dx.data_mut()[idx] += share;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn resize_backward<S: Scalar>(g_out: &Tensor4<S>, dx: &mut Tensor4<S>) {
    let (n_batch, c, out_h, out_w) = g_out.shape();
    let (_, _, in_h, in_w) = dx.shape();
    let ys = bilinear_axis(in_h, out_h);
    let xs = bilinear_axis(in_w, out_w);
    for n in 0..n_batch {
        for ch in 0..c {
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let g = g_out.at(n, ch, oy, ox);
                    let w00 = S::from_f64((1.0 - fy) * (1.0 - fx));
                    let w01 = S::from_f64((1.0 - fy) * fx);
                    let w10 = S::from_f64(fy * (1.0 - fx));
                    let w11 = S::from_f64(fy * fx);
                    let i00 = dx.flat_index(n, ch, y0, x0);
                    dx.data_mut()[i00] += w00 * g;
                    let i01 = dx.flat_index(n, ch, y0, x1);
                    dx.data_mut()[i01] += w01 * g;
                    let i10 = dx.flat_index(n, ch, y1, x0);
                    dx.data_mut()[i10] += w10 * g;
                    let i11 = dx.flat_index(n, ch, y1, x1);
                    dx.data_mut()[i11] += w11 * g;
                }
            }
        }
    }
}

/// Reverse-topological gradient accumulation over a retained forward pass.
///
/// `upstream` is the gradient w.r.t. the logits (for training, the
/// cross-entropy gradient). Every slot of the graph receives an entry; slots
/// the data flow never touched keep zero gradients.
pub fn backward<S: Scalar>(
    graph: &ModelGraph,
    weights: &WeightStore<S>,
    acts: &Activations<S>,
    upstream: &Tensor4<S>,
) -> Result<GradStore<S>> {
    if acts.values.len() != graph.layers.len() {
        return Err(Error::State(format!(
            "retained {} activations for {} layers",
            acts.values.len(),
            graph.layers.len()
        )));
    }
    let logits_shape = acts.values[graph.logits_layer].shape();
    if upstream.shape() != logits_shape {
        return Err(Error::ShapeMismatch(format!(
            "upstream {:?} vs logits {:?}",
            upstream.shape(),
            logits_shape
        )));
    }

    let mut slot_grads = WeightStore::new();
    for slot in &graph.slots {
        slot_grads.insert(slot.name.clone(), Tensor4::zeros(slot.shape)?);
    }
    let mut input_grad = Tensor4::zeros(acts.input.shape())?;
    let mut grads: Vec<Option<Tensor4<S>>> = (0..graph.layers.len()).map(|_| None).collect();
    grads[graph.logits_layer] = Some(upstream.clone());

    for idx in (0..graph.layers.len()).rev() {
        let Some(g_out) = grads[idx].take() else { continue };
        let layer = &graph.layers[idx];
        let id = &layer.id;
        let act_of = |src: &Src| -> &Tensor4<S> {
            match src {
                Src::Input => &acts.input,
                Src::Layer(j) => &acts.values[*j],
            }
        };

        // Make sure a gradient buffer exists for each data input, then hand
        // out one mutable sink at a time.
        for src in &layer.inputs {
            if let Src::Layer(j) = src {
                if grads[*j].is_none() {
                    grads[*j] = Some(Tensor4::zeros(acts.values[*j].shape())?);
                }
            }
        }

        macro_rules! sink {
            ($i:expr) => {
                match &layer.inputs[$i] {
                    Src::Input => &mut input_grad,
                    Src::Layer(j) => grads[*j].as_mut().expect("buffer created above"),
                }
            };
        }

        match &layer.kind {
            LayerKind::Conv { stride, padding, groups, bias, .. } => {
                let x = act_of(&layer.inputs[0]);
                let w = weights.get(&format!("{id}.w"))?.clone();
                let mut dw = Tensor4::zeros(w.shape())?;
                let mut db = if *bias { Some(Tensor4::zeros((1, w.shape().0, 1, 1))?) } else { None };
                conv_backward(x, &w, *stride, *padding, *groups, &g_out, sink!(0), &mut dw, db.as_mut());
                add_into(slot_grads.get_mut(&format!("{id}.w"))?, &dw);
                if let Some(db) = db {
                    add_into(slot_grads.get_mut(&format!("{id}.b"))?, &db);
                }
            }
            LayerKind::Separable { c_in, k, .. } => {
                let x = act_of(&layer.inputs[0]);
                let mid = acts
                    .sep_mid
                    .get(&idx)
                    .ok_or_else(|| Error::State(format!("separable '{id}' has no retained intermediate")))?;
                let pw_w = weights.get(&format!("{id}.pw.w"))?.clone();
                let dw_w = weights.get(&format!("{id}.dw.w"))?.clone();

                let mut d_mid = Tensor4::zeros(mid.shape())?;
                let mut d_pw_w = Tensor4::zeros(pw_w.shape())?;
                let mut d_pw_b = Tensor4::zeros((1, pw_w.shape().0, 1, 1))?;
                conv_backward(mid, &pw_w, 1, 0, 1, &g_out, &mut d_mid, &mut d_pw_w, Some(&mut d_pw_b));

                let mut d_dw_w = Tensor4::zeros(dw_w.shape())?;
                conv_backward(x, &dw_w, 1, k / 2, *c_in, &d_mid, sink!(0), &mut d_dw_w, None);

                add_into(slot_grads.get_mut(&format!("{id}.pw.w"))?, &d_pw_w);
                add_into(slot_grads.get_mut(&format!("{id}.pw.b"))?, &d_pw_b);
                add_into(slot_grads.get_mut(&format!("{id}.dw.w"))?, &d_dw_w);
            }
            LayerKind::Pool(p) => {
                let x = act_of(&layer.inputs[0]);
                pool_backward(x, p, &g_out, sink!(0));
            }
            LayerKind::Resize(_) => {
                resize_backward(&g_out, sink!(0));
            }
            LayerKind::Fusion => {
                let s = act_of(&layer.inputs[0]);
                let c = act_of(&layer.inputs[1]);
                let theta = weights.scalar(&format!("{id}.theta"))?;
                let sigma = weights.scalar(&format!("{id}.sigma"))?;
                let mut d_theta = S::ZERO;
                let mut d_sigma = S::ZERO;
                for ((&sv, &cv), &gv) in s.data().iter().zip(c.data()).zip(g_out.data()) {
                    d_theta += sv * gv;
                    d_sigma += cv * gv;
                }
                {
                    let ds = sink!(0);
                    for (d, &g) in ds.data_mut().iter_mut().zip(g_out.data()) {
                        *d += theta * g;
                    }
                }
                {
                    let dc = sink!(1);
                    for (d, &g) in dc.data_mut().iter_mut().zip(g_out.data()) {
                        *d += sigma * g;
                    }
                }
                slot_grads.get_mut(&format!("{id}.theta"))?.data_mut()[0] += d_theta;
                slot_grads.get_mut(&format!("{id}.sigma"))?.data_mut()[0] += d_sigma;
            }
            LayerKind::Affine { c } => {
                let x = act_of(&layer.inputs[0]);
                let scale = weights.get(&format!("{id}.scale"))?.clone();
                let (n_batch, _, h, _) = x.shape();
                let mut d_scale = vec![S::ZERO; *c];
                let mut d_shift = vec![S::ZERO; *c];
                {
                    let dx = sink!(0);
                    for n in 0..n_batch {
                        for ch in 0..*c {
                            let sc = scale.data()[ch];
                            for y in 0..h {
                                let xrow = x.row(n, ch, y);
                                let grow = g_out.row(n, ch, y);
                                let start = dx.flat_index(n, ch, y, 0);
                                let dxrow = &mut dx.data_mut()[start..start + xrow.len()];
                                for ((d, &xv), &gv) in dxrow.iter_mut().zip(xrow).zip(grow) {
                                    d_scale[ch] += xv * gv;
                                    d_shift[ch] += gv;
                                    *d += sc * gv;
                                }
                            }
                        }
                    }
                }
                let gs = slot_grads.get_mut(&format!("{id}.scale"))?;
                for (g, v) in gs.data_mut().iter_mut().zip(&d_scale) {
                    *g += *v;
                }
                let gb = slot_grads.get_mut(&format!("{id}.shift"))?;
                for (g, v) in gb.data_mut().iter_mut().zip(&d_shift) {
                    *g += *v;
                }
            }
            LayerKind::Activation(kind) => {
                let x = act_of(&layer.inputs[0]);
                let six = S::from_f64(6.0);
                let dx = sink!(0);
                for ((d, &xv), &gv) in dx.data_mut().iter_mut().zip(x.data()).zip(g_out.data()) {
                    let pass = match kind {
                        UnaryKind::Relu => xv > S::ZERO,
                        UnaryKind::Relu6 => xv > S::ZERO && xv < six,
                        UnaryKind::Copy => true,
                    };
                    if pass {
                        *d += gv;
                    }
                }
            }
            LayerKind::Add => {
                add_into(sink!(0), &g_out);
                add_into(sink!(1), &g_out);
            }
        }
    }

    // Chain through the input standardization so the reported gradient is
    // w.r.t. the raw [0, 1] image.
    let scale = S::from_f64(crate::graph::INPUT_SCALE);
    for v in input_grad.data_mut() {
        *v = *v * scale;
    }
    Ok(GradStore { slots: slot_grads, input: input_grad })
}

/// Per-coordinate relative central-difference errors:
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// `f` is evaluated on a scratch copy of `params` with one coordinate
/// perturbed by `+/- eps` at a time; `coords` selects which coordinates to
/// probe (callers sample large slots and record the sample).
pub fn finite_diff_errors(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    analytic_grad: &[f64],
    eps: f64,
    coords: &[usize],
) -> Result<Vec<f64>> {
    if eps <= 0.0 {
        return Err(Error::Numeric("finite-difference step must be positive".into()));
    }
    if params.len() != analytic_grad.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} params vs {} gradient entries",
            params.len(),
            analytic_grad.len()
        )));
    }
    let mut work = params.to_vec();
    let mut errs = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = work[i];
        work[i] = orig + eps;
        let up = f(&work)?;
        work[i] = orig - eps;
        let down = f(&work)?;
        work[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("non-finite objective at coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * eps);
        let analytic = analytic_grad[i];
        errs.push((analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs()));
    }
    Ok(errs)
}

/// Max relative central-difference error over the probed coordinates.
pub fn finite_diff_check(
    f: impl FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    analytic_grad: &[f64],
    eps: f64,
    coords: &[usize],
) -> Result<f64> {
    let errs = finite_diff_errors(f, params, analytic_grad, eps, coords)?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

/// Weights for gradient verification: the regular initialization plus a
/// small normal jitter on every parameter.
///
/// At the exact initialization point the constant-zero shifts and biases
/// leave many pre-activations sitting exactly on the relu kink (a window of
/// relu-clipped zeros convolves to exactly zero), where the subgradient
/// choice and the central difference legitimately disagree. Verification is
/// meaningful at a generic point in parameter space, so we move to one.
pub fn verification_weights(graph: &ModelGraph, seed: u64) -> WeightStore<f64> {
    let mut store: WeightStore<f64> = crate::graph::init_weights(graph, seed);
    let mut rng = Rng::new(seed ^ 0x5EED_1E55_u64);
    for slot in &graph.slots {
        let t = store.get_mut(&slot.name).expect("slot initialized");
        for v in t.data_mut() {
            *v += rng.normal() * 0.02;
        }
    }
    store
}

/// Per-slot gradient verification of a whole graph in double precision.
///
/// Computes the cross-entropy loss against `labels`, backpropagates, then
/// checks each slot against central differences. Slots larger than
/// `max_coords_per_slot` are probed on a deterministic subsample biased
/// toward the largest analytic entries (the low-magnitude remainder is
/// covered by a random pick from the same seed).
///
/// A coordinate whose error exceeds `refine_tol` at the primary `eps` is
/// re-probed across a step ladder (`eps * 10`, `eps * 100`, `eps / 10`,
/// `eps / 100`) and
/// then against the one-sided quotients at `eps` and `eps / 10`; the
/// smallest error wins. Each rung addresses a distinct artifact of
/// differencing a kinked network at scale: coordinates with near-zero
/// gradients are rounding-noise limited and need a larger step; a
/// pre-activation within `eps` of a relu kink produces a glitch that shrinks
/// linearly with the step; and relu-clipped exact zeros sit directly on a
/// kink, where the subgradient matches one one-sided derivative but never
/// the central quotient. A genuine analytic error agrees with no quotient at
/// any step, so the escape hatches do not weaken bug detection.
pub fn gradcheck_graph(
    graph: &ModelGraph,
    weights: &WeightStore<f64>,
    x: &Tensor4<f64>,
    labels: &LabelMap,
    ignore_index: u8,
    eps: f64,
    max_coords_per_slot: usize,
    refine_tol: f64,
) -> Result<Vec<(String, f64)>> {
    let acts = crate::graph::forward_retained(graph, weights, x)?;
    let (_, ce_grad) = softmax_cross_entropy(acts.logits(graph), labels, ignore_index)?;
    let grads = backward(graph, weights, &acts, &ce_grad)?;

    let loss_of = |w: &WeightStore<f64>| -> Result<f64> {
        let (logits, _) = crate::graph::forward(graph, w, x)?;
        Ok(softmax_cross_entropy(&logits, labels, ignore_index)?.0)
    };

    let mut results = Vec::new();
    let mut probe_weights = weights.clone();
    let mut rng = Rng::new(0xC0FFEE ^ graph.layers.len() as u64);
    let slot_names: Vec<String> = graph.slots.iter().map(|s| s.name.clone()).collect();
    for name in slot_names {
        let base = weights.get(&name)?.clone();
        let analytic = grads.slots.get(&name)?.clone();
        let n = base.len();
        let coords: Vec<usize> = if n <= max_coords_per_slot {
            (0..n).collect()
        } else {
            // Largest-|gradient| half plus a random half keeps the probe
            // representative while avoiding noise-dominated comparisons of
            // near-zero entries.
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                analytic.data()[b]
                    .abs()
                    .partial_cmp(&analytic.data()[a].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let top = (max_coords_per_slot / 2).max(1).min(max_coords_per_slot);
            let mut picked: Vec<usize> = order[..top].to_vec();
            while picked.len() < max_coords_per_slot {
                picked.push(rng.below(n));
            }
            picked.sort_unstable();
            picked.dedup();
            picked
        };
        let shape = base.shape();
        let mut probe = |vals: &[f64]| {
            probe_weights.insert(name.clone(), Tensor4::from_vec(shape, vals.to_vec())?);
            loss_of(&probe_weights)
        };
        let mut errs = finite_diff_errors(&mut probe, base.data(), analytic.data(), eps, &coords)?;
        if errs.iter().any(|e| *e > refine_tol) {
            let f0 = probe(base.data())?;
            for (pos, err) in errs.iter_mut().enumerate() {
                if *err <= refine_tol {
                    continue;
                }
                for scale in [10.0, 100.0, 0.1, 0.01] {
                    let refined = finite_diff_errors(
                        &mut probe,
                        base.data(),
                        analytic.data(),
                        eps * scale,
                        &coords[pos..=pos],
                    )?[0];
                    *err = err.min(refined);
                    if *err <= refine_tol {
                        break;
                    }
                }
                if *err > refine_tol {
                    // One-sided quotients for exact-kink coordinates.
                    let i = coords[pos];
                    let analytic_i = analytic.data()[i];
                    let mut work = base.data().to_vec();
                    for e in [eps, eps / 10.0] {
                        work[i] = base.data()[i] + e;
                        let up = probe(&work)?;
                        work[i] = base.data()[i] - e;
                        let down = probe(&work)?;
                        work[i] = base.data()[i];
                        for numeric in [(up - f0) / e, (f0 - down) / e] {
                            let one_sided = (analytic_i - numeric).abs()
                                / f64::max(1e-8, analytic_i.abs() + numeric.abs());
                            *err = err.min(one_sided);
                        }
                    }
                }
            }
        }
        probe_weights.insert(name.clone(), base);
        results.push((name, errs.into_iter().fold(0.0, f64::max)));
    }
    Ok(results)
}

/// Convenience map form of [`gradcheck_graph`] results.
pub fn worst_slot_errors(results: &[(String, f64)]) -> BTreeMap<String, f64> {
    results.iter().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnops::{conv2d, pool2d, ConvParams};

    #[test]
    fn finite_diff_polynomial_exactness() {
        // f(w) = w^2 at w = 3, analytic 2w.
        let err = finite_diff_check(
            |w: &[f64]| Ok(w[0] * w[0]),
            &[3.0],
            &[6.0],
            1e-5,
            &[0],
        )
        .unwrap();
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn finite_diff_detects_corruption() {
        // A gradient off by 1% must be flagged above 4e-3.
        let err = finite_diff_check(
            |w: &[f64]| Ok(w[0] * w[0]),
            &[3.0],
            &[6.0 * 1.01],
            1e-5,
            &[0],
        )
        .unwrap();
        assert!(err > 4e-3, "err {err}");
    }

    #[test]
    fn finite_diff_rejects_bad_eps() {
        assert!(finite_diff_check(|_| Ok(0.0), &[1.0], &[0.0], 0.0, &[0]).is_err());
    }

    #[test]
    fn conv_weight_gradient_matches_differences() {
        // Scalar objective: sum of conv outputs weighted by a fixed pattern.
        let x = Tensor4::from_fn((1, 2, 5, 5), |_, c, y, xx| {
            ((c * 25 + y * 5 + xx) as f64 * 0.37).sin()
        })
        .unwrap();
        let w0 = Tensor4::from_fn((3, 2, 3, 3), |o, i, y, xx| {
            ((o * 18 + i * 9 + y * 3 + xx) as f64 * 0.23).cos() * 0.5
        })
        .unwrap();
        let probe = Tensor4::from_fn((1, 3, 3, 3), |_, c, y, xx| {
            ((c + y + xx) as f64 * 0.11).sin() + 0.3
        })
        .unwrap();
        let objective = |vals: &[f64]| -> Result<f64> {
            let w = Tensor4::from_vec((3, 2, 3, 3), vals.to_vec())?;
            let p = ConvParams { weight: &w, bias: None, stride: 2, padding: 1, groups: 1 };
            let out = conv2d(&x, &p)?;
            Ok(out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
        };

        // Analytic gradient via conv_backward with upstream = probe.
        let mut dx = Tensor4::zeros(x.shape()).unwrap();
        let mut dw = Tensor4::zeros(w0.shape()).unwrap();
        conv_backward(&x, &w0, 2, 1, 1, &probe, &mut dx, &mut dw, None);

        let coords: Vec<usize> = (0..w0.len()).collect();
        let err = finite_diff_check(objective, w0.data(), dw.data(), 1e-5, &coords).unwrap();
        assert!(err < 1e-9, "weight grad err {err}");

        // And the input gradient through the same oracle.
        let obj_x = |vals: &[f64]| -> Result<f64> {
            let xv = Tensor4::from_vec(x.shape(), vals.to_vec())?;
            let p = ConvParams { weight: &w0, bias: None, stride: 2, padding: 1, groups: 1 };
            let out = conv2d(&xv, &p)?;
            Ok(out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
        };
        let coords: Vec<usize> = (0..x.len()).collect();
        let err = finite_diff_check(obj_x, x.data(), dx.data(), 1e-5, &coords).unwrap();
        assert!(err < 1e-9, "input grad err {err}");
    }

    #[test]
    fn max_pool_routes_to_first_maximum() {
        // Strictly increasing input: gradient lands exactly at each window max.
        let x = Tensor4::from_fn((1, 1, 4, 4), |_, _, y, xx| (y * 4 + xx) as f64).unwrap();
        let p = PoolParams { kind: PoolKind::Max, k: 3, stride: 2, padding: 1 };
        let out = pool2d(&x, &p).unwrap();
        let ones = Tensor4::filled(out.shape(), 1.0).unwrap();
        let mut dx = Tensor4::zeros(x.shape()).unwrap();
        pool_backward(&x, &p, &ones, &mut dx);
        let expected = [(1usize, 1usize), (1, 3), (3, 1), (3, 3)];
        for y in 0..4 {
            for xx in 0..4 {
                let want = if expected.contains(&(y, xx)) { 1.0 } else { 0.0 };
                assert_eq!(dx.at(0, 0, y, xx), want, "({y},{xx})");
            }
        }
    }

    #[test]
    fn max_pool_tie_routes_to_first_occurrence() {
        let x = Tensor4::filled((1, 1, 2, 2), 5.0f64).unwrap();
        let p = PoolParams { kind: PoolKind::Max, k: 3, stride: 2, padding: 1 };
        let ones = Tensor4::filled((1, 1, 1, 1), 1.0).unwrap();
        let mut dx = Tensor4::zeros(x.shape()).unwrap();
        pool_backward(&x, &p, &ones, &mut dx);
        assert_eq!(dx.at(0, 0, 0, 0), 1.0);
        assert_eq!(dx.data()[1..].iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn avg_pool_distributes_uniformly_over_valid() {
        let x = Tensor4::filled((1, 1, 2, 2), 1.0f64).unwrap();
        let p = PoolParams { kind: PoolKind::Avg, k: 3, stride: 2, padding: 1 };
        let ones = Tensor4::filled((1, 1, 1, 1), 1.0).unwrap();
        let mut dx = Tensor4::zeros(x.shape()).unwrap();
        pool_backward(&x, &p, &ones, &mut dx);
        // Window covers all four valid cells; each gets 1/4.
        for v in dx.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn fusion_backward_dot_products() {
        // S = [1, 2], C = [3, 4], upstream = [1, 1] -> d theta = 3, d sigma = 7.
        let s = Tensor4::from_vec((1, 1, 1, 2), vec![1.0f64, 2.0]).unwrap();
        let c = Tensor4::from_vec((1, 1, 1, 2), vec![3.0f64, 4.0]).unwrap();
        let g = Tensor4::filled((1, 1, 1, 2), 1.0f64).unwrap();
        let mut d_theta = 0.0;
        let mut d_sigma = 0.0;
        for ((&sv, &cv), &gv) in s.data().iter().zip(c.data()).zip(g.data()) {
            d_theta += sv * gv;
            d_sigma += cv * gv;
        }
        assert_eq!(d_theta, 3.0);
        assert_eq!(d_sigma, 7.0);
    }

    #[test]
    fn resize_backward_matches_differences() {
        let x = Tensor4::from_fn((1, 1, 3, 4), |_, _, y, xx| ((y * 4 + xx) as f64 * 0.7).sin())
            .unwrap();
        let probe = Tensor4::from_fn((1, 1, 5, 7), |_, _, y, xx| ((y + xx) as f64 * 0.3).cos())
            .unwrap();
        let objective = |vals: &[f64]| -> Result<f64> {
            let xv = Tensor4::from_vec(x.shape(), vals.to_vec())?;
            let out = crate::nnops::bilinear_resize(&xv, 5, 7)?;
            Ok(out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
        };
        let mut dx = Tensor4::zeros(x.shape()).unwrap();
        resize_backward(&probe, &mut dx);
        let coords: Vec<usize> = (0..x.len()).collect();
        let err = finite_diff_check(objective, x.data(), dx.data(), 1e-5, &coords).unwrap();
        assert!(err < 1e-9, "resize grad err {err}");
    }
}
