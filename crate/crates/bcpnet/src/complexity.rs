//! Analytic parameter and multiply-accumulate accounting.
//!
//! Counting is exact integer arithmetic over the layer list, with no forward
//! pass involved. Convolution MACs are
//! `out_h * out_w * c_out * k^2 * c_in_per_group` (summed over the batch);
//! a separable layer counts its depthwise and pointwise stages; a fusion site
//! counts 2 MACs per element. Pool comparisons, resize blends, affine and
//! activation arithmetic are tallied separately as non-MAC elementwise ops
//! and never enter the FLOPs total, which keeps the resolution scaling law
//! exact. Reported FLOPs are `2 * MACs`; both columns are always emitted so
//! comparisons against either convention stay auditable.

use crate::error::Result;
use crate::graph::{LayerKind, ModelGraph, ResizeTarget, Src};
use crate::nnops::{conv_out_dim, PoolKind};
use crate::tensor::{Shape4, UnaryKind};

/// One report row: a layer, its output shape at the analyzed resolution, and
/// its parameter/MAC/side-op counts.
#[derive(Debug, Clone)]
pub struct Row {
    pub id: String,
    pub kind: &'static str,
    pub out_shape: Shape4,
    pub params: u64,
    pub macs: u64,
    /// Non-MAC elementwise work (pool compares, resize blends, affine and
    /// activation ops); excluded from the FLOPs total.
    pub side_ops: u64,
}

#[derive(Debug, Clone)]
pub struct ComplexityReport {
    pub input_resolution: (usize, usize),
    pub rows: Vec<Row>,
    pub total_params: u64,
    pub total_macs: u64,
    /// `2 * total_macs`.
    pub total_flops: u64,
    pub total_side_ops: u64,
}

/// Per-layer and total parameter counts (resolution independent).
#[derive(Debug, Clone)]
pub struct ParamsReport {
    pub rows: Vec<(String, u64)>,
    pub total: u64,
}

fn kind_name(kind: &LayerKind) -> &'static str {
    match kind {
        LayerKind::Conv { .. } => "conv",
        LayerKind::Separable { .. } => "separable",
        LayerKind::Pool(_) => "pool",
        LayerKind::Resize(_) => "resize",
        LayerKind::Fusion => "fusion",
        LayerKind::Affine { .. } => "affine",
        LayerKind::Activation(_) => "activation",
        LayerKind::Add => "add",
    }
}

fn layer_params(graph: &ModelGraph, layer: usize) -> u64 {
    graph
        .slots
        .iter()
        .filter(|s| s.layer == layer)
        .map(|s| s.elements() as u64)
        .sum()
}

/// Infer every layer's output shape for an `(n, 3, h, w)` input without
/// running the network.
pub fn infer_shapes(graph: &ModelGraph, n: usize, h: usize, w: usize) -> Result<Vec<Shape4>> {
    let mut shapes: Vec<Shape4> = Vec::with_capacity(graph.layers.len());
    let input_shape = (n, 3, h, w);
    for layer in &graph.layers {
        let shape = {
            let of = |src: &Src| -> Shape4 {
                match src {
                    Src::Input => input_shape,
                    Src::Layer(j) => shapes[*j],
                }
            };
            let first = of(&layer.inputs[0]);
            let (in_n, in_c, in_h, in_w) = first;
            match &layer.kind {
                LayerKind::Conv { c_out, k, stride, padding, .. } => (
                    in_n,
                    *c_out,
                    conv_out_dim(in_h, *k, *stride, *padding)?,
                    conv_out_dim(in_w, *k, *stride, *padding)?,
                ),
                LayerKind::Separable { c_out, .. } => (in_n, *c_out, in_h, in_w),
                LayerKind::Pool(p) => (
                    in_n,
                    in_c,
                    conv_out_dim(in_h, p.k, p.stride, p.padding)?,
                    conv_out_dim(in_w, p.k, p.stride, p.padding)?,
                ),
                LayerKind::Resize(target) => {
                    let (th, tw) = match target {
                        ResizeTarget::Input => (h, w),
                        ResizeTarget::Layer(j) => (shapes[*j].2, shapes[*j].3),
                    };
                    (in_n, in_c, th, tw)
                }
                LayerKind::Fusion | LayerKind::Add | LayerKind::Activation(_) => first,
                LayerKind::Affine { c } => (in_n, *c, in_h, in_w),
            }
        };
        shapes.push(shape);
    }
    Ok(shapes)
}

/// Per-layer and total parameter counts. Parameters are a property of the
/// graph alone and identical at every input resolution.
pub fn count_params(graph: &ModelGraph) -> ParamsReport {
    let rows: Vec<(String, u64)> = graph
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| (l.id.clone(), layer_params(graph, i)))
        .collect();
    let total = rows.iter().map(|(_, p)| p).sum();
    ParamsReport { rows, total }
}

/// Full per-layer complexity report at one input resolution (batch 1).
pub fn count_macs(graph: &ModelGraph, h: usize, w: usize) -> Result<ComplexityReport> {
    let shapes = infer_shapes(graph, 1, h, w)?;
    let mut rows = Vec::with_capacity(graph.layers.len());
    for (i, layer) in graph.layers.iter().enumerate() {
        let out = shapes[i];
        let elems = (out.0 * out.1 * out.2 * out.3) as u64;
        let out_hw = (out.2 * out.3) as u64;
        let (macs, side) = match &layer.kind {
            LayerKind::Conv { c_in, c_out, k, groups, .. } => {
                let per_group_in = (c_in / groups) as u64;
                (out.0 as u64 * out_hw * *c_out as u64 * (*k as u64).pow(2) * per_group_in, 0)
            }
            LayerKind::Separable { c_in, c_out, k } => {
                let dw = out.0 as u64 * out_hw * *c_in as u64 * (*k as u64).pow(2);
                let pw = out.0 as u64 * out_hw * *c_out as u64 * *c_in as u64;
                (dw + pw, 0)
            }
            // One compare per non-center window cell; the divide for avg.
            LayerKind::Pool(p) => {
                let window = (p.k * p.k) as u64;
                let per_elem = match p.kind {
                    PoolKind::Max => window - 1,
                    PoolKind::Avg => window + 1,
                };
                (0, elems * per_elem)
            }
            // Three lerps of three ops each per output element.
            LayerKind::Resize(_) => (0, elems * 9),
            LayerKind::Fusion => (2 * elems, 0),
            LayerKind::Affine { .. } => (0, elems * 2),
            LayerKind::Activation(kind) => {
                let per_elem = match kind {
                    UnaryKind::Relu => 1,
                    UnaryKind::Relu6 => 2,
                    UnaryKind::Copy => 0,
                };
                (0, elems * per_elem)
            }
            LayerKind::Add => (0, elems),
        };
        rows.push(Row {
            id: layer.id.clone(),
            kind: kind_name(&layer.kind),
            out_shape: out,
            params: layer_params(graph, i),
            macs,
            side_ops: side,
        });
    }
    let total_params = rows.iter().map(|r| r.params).sum();
    let total_macs: u64 = rows.iter().map(|r| r.macs).sum();
    let total_side_ops = rows.iter().map(|r| r.side_ops).sum();
    Ok(ComplexityReport {
        input_resolution: (h, w),
        rows,
        total_params,
        total_macs,
        total_flops: 2 * total_macs,
        total_side_ops,
    })
}

/// One report per requested resolution.
pub fn resolution_sweep(
    graph: &ModelGraph,
    resolutions: &[(usize, usize)],
) -> Result<Vec<ComplexityReport>> {
    if resolutions.is_empty() {
        return Err(crate::error::Error::Config(
            "resolution sweep needs at least one resolution".into(),
        ));
    }
    resolutions.iter().map(|&(h, w)| count_macs(graph, h, w)).collect()
}

pub fn format_shape(s: Shape4) -> String {
    format!("{}x{}x{}x{}", s.0, s.1, s.2, s.3)
}

impl ComplexityReport {
    /// CSV with header `layer,kind,out_shape,params,macs` and a totals row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,out_shape,params,macs\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.id,
                r.kind,
                format_shape(r.out_shape),
                r.params,
                r.macs
            ));
        }
        out.push_str(&format!("total,,,{},{}\n", self.total_params, self.total_macs));
        out
    }
}

/// Wide CSV for a multi-resolution sweep: one MAC column per resolution,
/// parameters listed once.
pub fn sweep_to_csv(reports: &[ComplexityReport]) -> String {
    let mut out = String::from("layer,kind,params");
    for r in reports {
        out.push_str(&format!(",macs_{}x{}", r.input_resolution.0, r.input_resolution.1));
    }
    out.push('\n');
    let first = &reports[0];
    for (i, row) in first.rows.iter().enumerate() {
        out.push_str(&format!("{},{},{}", row.id, row.kind, row.params));
        for r in reports {
            out.push_str(&format!(",{}", r.rows[i].macs));
        }
        out.push('\n');
    }
    out.push_str(&format!("total,,{}", first.total_params));
    for r in reports {
        out.push_str(&format!(",{}", r.total_macs));
    }
    out.push('\n');
    out
}

/// Human-readable totals per resolution with both the MAC and the
/// FLOPs = 2 * MACs conventions and the elementwise side-op tally.
pub fn sweep_summary(reports: &[ComplexityReport]) -> String {
    let mut out = format!(
        "{:>12} {:>16} {:>18} {:>14} {:>10}\n",
        "resolution", "macs", "flops(2*macs)", "elementwise", "params"
    );
    for r in reports {
        out.push_str(&format!(
            "{:>12} {:>16} {:>18} {:>14} {:>10}\n",
            format!("{}x{}", r.input_resolution.0, r.input_resolution.1),
            r.total_macs,
            r.total_flops,
            r.total_side_ops,
            r.total_params
        ));
    }
    out
}
