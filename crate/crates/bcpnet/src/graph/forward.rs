//! Graph execution: weight storage, initialization and the forward pass.

use std::collections::{BTreeMap, BTreeSet};

use super::{Init, LayerKind, ModelGraph, ResizeTarget, Src};
use crate::error::{Error, Result};
use crate::nnops::{bilinear_resize, conv2d, pool2d, weighted_fusion, ConvParams, FusionWeights};
use crate::rng::Rng;
use crate::tensor::{axpy, map_unary, Scalar, Tensor4};

/// Named parameter tensors. Iteration order is the sorted slot name order,
/// which keeps serialization and optimizer updates deterministic.
#[derive(Debug, Clone)]
pub struct WeightStore<S: Scalar> {
    map: BTreeMap<String, Tensor4<S>>,
}

impl<S: Scalar> WeightStore<S> {
    pub fn new() -> Self {
        WeightStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor4<S>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor4<S>> {
        self.map.get(name).ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor4<S>> {
        self.map.get_mut(name).ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    /// Value of a scalar (1,1,1,1) slot.
    pub fn scalar(&self, name: &str) -> Result<S> {
        Ok(self.get(name)?.data()[0])
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor4<S>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    pub fn map_values<T: Scalar>(&self, f: impl Fn(&Tensor4<S>) -> Tensor4<T>) -> WeightStore<T> {
        WeightStore { map: self.map.iter().map(|(k, v)| (k.clone(), f(v))).collect() }
    }
}

impl<S: Scalar> Default for WeightStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Fresh weights for a graph: convolutions draw from a zero-mean normal with
/// std `sqrt(2 / fan_in)`, affine scales start at 1, shifts and biases at 0,
/// fusion scalars at 1. Slots are filled in registration order so a seed
/// fully determines the store.
pub fn init_weights<S: Scalar>(graph: &ModelGraph, seed: u64) -> WeightStore<S> {
    let mut rng = Rng::new(seed);
    let mut store = WeightStore::new();
    for slot in &graph.slots {
        let t = match slot.init {
            Init::Const(v) => Tensor4::filled(slot.shape, S::from_f64(v)),
            Init::FanInNormal { fan_in, gain } => {
                let std = (gain / fan_in as f64).sqrt();
                Tensor4::from_fn(slot.shape, |_, _, _, _| S::from_f64(rng.normal() * std))
            }
            Init::DeltaKernel { noise } => {
                let (_, _, kh, kw) = slot.shape;
                Tensor4::from_fn(slot.shape, |_, _, y, x| {
                    let center = if y == kh / 2 && x == kw / 2 { 1.0 } else { 0.0 };
                    S::from_f64(center + rng.normal() * noise)
                })
            }
            Init::ScaledIdentity { scale, noise } => {
                Tensor4::from_fn(slot.shape, |o, i, _, _| {
                    let base = if o == i { scale } else { 0.0 };
                    S::from_f64(base + rng.normal() * noise)
                })
            }
        }
        .expect("slot shapes are valid by construction");
        store.insert(slot.name.clone(), t);
    }
    store
}

/// Input standardization applied by every forward pass: images arrive in
/// `[0, 1]` and the network consumes `(x - 0.5) * 2`. Centering the input is
/// what keeps the normalization-free conv chains well conditioned.
pub fn standardize_input<S: Scalar>(x: &Tensor4<S>) -> Tensor4<S> {
    let half = S::from_f64(0.5);
    let two = S::from_f64(2.0);
    x.map(|v| (v - half) * two)
}

/// Derivative of [`standardize_input`] w.r.t. the raw input.
pub const INPUT_SCALE: f64 = 2.0;

/// Retained activations of one forward pass, as the backward pass needs
/// them: every layer output, the depthwise intermediate of each separable
/// layer, and the standardized input itself.
pub struct Activations<S: Scalar> {
    pub input: Tensor4<S>,
    pub values: Vec<Tensor4<S>>,
    pub sep_mid: BTreeMap<usize, Tensor4<S>>,
}

impl<S: Scalar> Activations<S> {
    pub fn logits<'a>(&'a self, graph: &ModelGraph) -> &'a Tensor4<S> {
        &self.values[graph.logits_layer]
    }
}

fn affine_apply<S: Scalar>(x: &Tensor4<S>, scale: &[S], shift: &[S]) -> Tensor4<S> {
    let (n, c, h, _) = x.shape();
    let mut out = x.clone();
    for bn in 0..n {
        for ch in 0..c {
            let (s, b) = (scale[ch], shift[ch]);
            for y in 0..h {
                for v in out.row_mut(bn, ch, y) {
                    *v = s * *v + b;
                }
            }
        }
    }
    out
}

struct Executor<'a, S: Scalar> {
    graph: &'a ModelGraph,
    weights: &'a WeightStore<S>,
    /// Spatial size of each computed layer, kept even after its value is
    /// freed so resize targets stay resolvable.
    spatial: Vec<(usize, usize)>,
}

impl<'a, S: Scalar> Executor<'a, S> {
    fn eval(
        &mut self,
        idx: usize,
        input: &Tensor4<S>,
        values: &[Option<Tensor4<S>>],
        mid_out: &mut Option<Tensor4<S>>,
    ) -> Result<Tensor4<S>> {
        let layer = &self.graph.layers[idx];
        let arg = |i: usize| -> Result<&Tensor4<S>> {
            match layer.inputs.get(i) {
                Some(Src::Input) => Ok(input),
                Some(Src::Layer(j)) => values[*j]
                    .as_ref()
                    .ok_or_else(|| Error::State(format!("layer {j} freed before use by '{}'", layer.id))),
                None => Err(Error::State(format!("layer '{}' missing input {i}", layer.id))),
            }
        };
        let id = &layer.id;
        match &layer.kind {
            LayerKind::Conv { stride, padding, groups, bias, .. } => {
                let w = self.weights.get(&format!("{id}.w"))?;
                let b = if *bias { Some(self.weights.get(&format!("{id}.b"))?.data()) } else { None };
                conv2d(
                    arg(0)?,
                    &ConvParams { weight: w, bias: b, stride: *stride, padding: *padding, groups: *groups },
                )
            }
            LayerKind::Separable { c_in, k, .. } => {
                let dw_w = self.weights.get(&format!("{id}.dw.w"))?;
                let pw_w = self.weights.get(&format!("{id}.pw.w"))?;
                let pw_b = self.weights.get(&format!("{id}.pw.b"))?;
                let mid = conv2d(
                    arg(0)?,
                    &ConvParams { weight: dw_w, bias: None, stride: 1, padding: k / 2, groups: *c_in },
                )?;
                let out = conv2d(
                    &mid,
                    &ConvParams { weight: pw_w, bias: Some(pw_b.data()), stride: 1, padding: 0, groups: 1 },
                )?;
                *mid_out = Some(mid);
                Ok(out)
            }
            LayerKind::Pool(p) => pool2d(arg(0)?, p),
            LayerKind::Resize(target) => {
                let (th, tw) = match target {
                    ResizeTarget::Input => (input.height(), input.width()),
                    ResizeTarget::Layer(j) => self.spatial[*j],
                };
                bilinear_resize(arg(0)?, th, tw)
            }
            LayerKind::Fusion => {
                let theta = self.weights.scalar(&format!("{id}.theta"))?;
                let sigma = self.weights.scalar(&format!("{id}.sigma"))?;
                weighted_fusion(arg(0)?, arg(1)?, FusionWeights { theta, sigma })
            }
            LayerKind::Affine { .. } => {
                let scale = self.weights.get(&format!("{id}.scale"))?;
                let shift = self.weights.get(&format!("{id}.shift"))?;
                Ok(affine_apply(arg(0)?, scale.data(), shift.data()))
            }
            LayerKind::Activation(kind) => Ok(map_unary(arg(0)?, *kind)),
            LayerKind::Add => axpy(S::ONE, arg(0)?, S::ONE, arg(1)?),
        }
    }
}

fn last_use(graph: &ModelGraph) -> Vec<usize> {
    let mut last: Vec<usize> = (0..graph.layers.len()).collect();
    for (i, layer) in graph.layers.iter().enumerate() {
        for src in &layer.inputs {
            if let Src::Layer(j) = src {
                last[*j] = i;
            }
        }
    }
    last
}

fn tap_layers(graph: &ModelGraph) -> BTreeSet<usize> {
    let mut keep = BTreeSet::new();
    for &(idx, _) in &graph.backbone_taps {
        keep.insert(idx);
    }
    for &(idx, _) in &graph.pyramid_levels {
        keep.insert(idx);
    }
    keep.insert(graph.classifier_input);
    keep.insert(graph.logits_layer);
    keep
}

/// Run the graph, freeing intermediate activations as soon as their last
/// consumer has executed. Returns the logits and the named taps (encoder and
/// pyramid levels plus the classifier input).
pub fn forward<S: Scalar>(
    graph: &ModelGraph,
    weights: &WeightStore<S>,
    x: &Tensor4<S>,
) -> Result<(Tensor4<S>, BTreeMap<String, Tensor4<S>>)> {
    let x = standardize_input(x);
    let last = last_use(graph);
    let keep = tap_layers(graph);
    let mut values: Vec<Option<Tensor4<S>>> = (0..graph.layers.len()).map(|_| None).collect();
    let mut exec = Executor { graph, weights, spatial: vec![(0, 0); graph.layers.len()] };
    for idx in 0..graph.layers.len() {
        let mut mid = None;
        let out = exec.eval(idx, &x, &values, &mut mid)?;
        exec.spatial[idx] = (out.height(), out.width());
        values[idx] = Some(out);
        for src in graph.layers[idx].inputs.clone() {
            if let Src::Layer(j) = src {
                if last[j] == idx && !keep.contains(&j) {
                    values[j] = None;
                }
            }
        }
    }
    let mut taps = BTreeMap::new();
    for &idx in keep.iter().filter(|&&i| i != graph.logits_layer) {
        if let Some(v) = values[idx].take() {
            taps.insert(graph.layers[idx].id.clone(), v);
        }
    }
    let logits = values[graph.logits_layer]
        .take()
        .ok_or_else(|| Error::State("logits layer produced no value".into()))?;
    Ok((logits, taps))
}

/// Run the graph keeping every intermediate activation for a subsequent
/// backward pass.
pub fn forward_retained<S: Scalar>(
    graph: &ModelGraph,
    weights: &WeightStore<S>,
    x: &Tensor4<S>,
) -> Result<Activations<S>> {
    let x = standardize_input(x);
    let mut values: Vec<Option<Tensor4<S>>> = (0..graph.layers.len()).map(|_| None).collect();
    let mut sep_mid = BTreeMap::new();
    let mut exec = Executor { graph, weights, spatial: vec![(0, 0); graph.layers.len()] };
    for idx in 0..graph.layers.len() {
        let mut mid = None;
        let out = exec.eval(idx, &x, &values, &mut mid)?;
        exec.spatial[idx] = (out.height(), out.width());
        if let Some(m) = mid {
            sep_mid.insert(idx, m);
        }
        values[idx] = Some(out);
    }
    Ok(Activations {
        input: x,
        values: values.into_iter().map(|v| v.expect("all layers computed")).collect(),
        sep_mid,
    })
}
