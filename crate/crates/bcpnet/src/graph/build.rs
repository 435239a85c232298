//! Graph construction: encoder, context pooling, propagation module,
//! classifier, and the composition of the four.

use super::{
    AblationConfig, BackboneSchedule, Init, LayerKind, LayerSpec, ModelConfig, ModelGraph,
    ResizeTarget, SlotSpec, Src,
};
use crate::error::{Error, Result};
use crate::nnops::{PoolKind, PoolParams};
use crate::tensor::UnaryKind;

/// Incremental graph builder. The build methods mirror the network's four
/// parts and must be called in order; [`build_bcpnet`] is the usual entry
/// point.
pub struct GraphBuilder {
    layers: Vec<LayerSpec>,
    slots: Vec<SlotSpec>,
    /// Output channel count per layer.
    channels: Vec<usize>,
    backbone_taps: Vec<(usize, usize)>,
    pyramid: Vec<(usize, usize)>,
    bcp_out8: Option<usize>,
    fusion_width: usize,
}

impl GraphBuilder {
    pub fn new() -> Self {
        GraphBuilder {
            layers: Vec::new(),
            slots: Vec::new(),
            channels: Vec::new(),
            backbone_taps: Vec::new(),
            pyramid: Vec::new(),
            bcp_out8: None,
            fusion_width: 0,
        }
    }

    fn push(&mut self, id: String, kind: LayerKind, inputs: Vec<Src>) -> usize {
        let c_out = match &kind {
            LayerKind::Conv { c_out, .. } => *c_out,
            LayerKind::Separable { c_out, .. } => *c_out,
            LayerKind::Pool(_)
            | LayerKind::Resize(_)
            | LayerKind::Affine { .. }
            | LayerKind::Activation(_)
            | LayerKind::Add
            | LayerKind::Fusion => match inputs.first() {
                Some(Src::Layer(j)) => self.channels[*j],
                Some(Src::Input) => 3,
                None => 0,
            },
        };
        for src in &inputs {
            if let Src::Layer(j) = src {
                assert!(*j < self.layers.len(), "forward reference in builder");
            }
        }
        self.layers.push(LayerSpec { id, kind, inputs });
        self.channels.push(c_out);
        self.layers.len() - 1
    }

    fn add_slot(&mut self, layer: usize, suffix: &str, shape: (usize, usize, usize, usize), init: Init, weight_decay: bool) {
        let name = format!("{}.{suffix}", self.layers[layer].id);
        debug_assert!(self.slots.iter().all(|s| s.name != name), "duplicate slot {name}");
        self.slots.push(SlotSpec { name, layer, shape, init, weight_decay });
    }

    /// Convolution followed by a per-channel affine and an activation.
    /// Returns the index of the activation layer.
    #[allow(clippy::too_many_arguments)]
    fn conv_unit(
        &mut self,
        prefix: &str,
        src: Src,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        act: UnaryKind,
        gain: f64,
    ) -> usize {
        let padding = k / 2;
        let conv = self.push(
            format!("{prefix}.conv"),
            LayerKind::Conv { c_in, c_out, k, stride, padding, groups, bias },
            vec![src],
        );
        let fan_in = (c_in / groups) * k * k;
        self.add_slot(conv, "w", (c_out, c_in / groups, k, k), Init::FanInNormal { fan_in, gain }, true);
        if bias {
            self.add_slot(conv, "b", (1, c_out, 1, 1), Init::Const(0.0), true);
        }
        let affine = self.push(
            format!("{prefix}.affine"),
            LayerKind::Affine { c: c_out },
            vec![Src::Layer(conv)],
        );
        self.add_slot(affine, "scale", (1, c_out, 1, 1), Init::Const(1.0), true);
        self.add_slot(affine, "shift", (1, c_out, 1, 1), Init::Const(0.0), false);
        let name = match act {
            UnaryKind::Relu => "relu",
            UnaryKind::Relu6 => "relu6",
            UnaryKind::Copy => "copy",
        };
        self.push(
            format!("{prefix}.{name}"),
            LayerKind::Activation(act),
            vec![Src::Layer(affine)],
        )
    }

    /// MobileNet-style encoder: a stride-2 stem then five stages of
    /// inverted-residual blocks (expand 1x1 where expansion > 1, depthwise
    /// 3x3, project 1x1, each followed by affine + relu6; residual add when
    /// stride is 1 and channels match). Taps are emitted at 1/2 .. 1/32.
    pub fn build_backbone(&mut self, schedule: &BackboneSchedule) -> Result<()> {
        if schedule.stages.is_empty() {
            return Err(Error::Config("backbone schedule has no stages".into()));
        }
        if schedule.stem_channels == 0 {
            return Err(Error::Config("stem must have at least one channel".into()));
        }
        for (i, st) in schedule.stages.iter().enumerate() {
            if st.channels == 0 || st.blocks == 0 {
                return Err(Error::Config(format!("stage {} must have channels and blocks >= 1", i + 1)));
            }
            if !matches!(st.stride, 1 | 2) {
                return Err(Error::Config(format!("stage {} stride must be 1 or 2", i + 1)));
            }
            if st.expansion_first == 0 || st.expansion_rest == 0 {
                return Err(Error::Config(format!("stage {} expansion must be >= 1", i + 1)));
            }
        }
        let reach: usize = 2 * schedule.stages.iter().map(|s| s.stride).product::<usize>();
        if reach != 32 {
            return Err(Error::Config(format!(
                "backbone must downsample to exactly 1/32, schedule reaches 1/{reach}"
            )));
        }

        let mut cur = self.conv_unit(
            "backbone.stem",
            Src::Input,
            3,
            schedule.stem_channels,
            3,
            2,
            1,
            false,
            UnaryKind::Relu6,
            2.0,
        );
        let mut cur_c = schedule.stem_channels;
        let mut factor = 2usize;

        for (si, stage) in schedule.stages.iter().enumerate() {
            factor *= stage.stride;
            for b in 0..stage.blocks {
                let stride = if b == 0 { stage.stride } else { 1 };
                let expansion = if b == 0 { stage.expansion_first } else { stage.expansion_rest };
                let prefix = format!("backbone.s{}.b{}", si + 1, b + 1);
                let block_in = cur;
                let block_in_c = cur_c;
                let hidden = block_in_c * expansion;

                let mut h = cur;
                let mut h_src_c = block_in_c;
                if expansion > 1 {
                    h = self.conv_unit(
                        &format!("{prefix}.expand"),
                        Src::Layer(h),
                        block_in_c,
                        hidden,
                        1,
                        1,
                        1,
                        true,
                        UnaryKind::Relu6,
                        2.0,
                    );
                    h_src_c = hidden;
                }
                h = self.conv_unit(
                    &format!("{prefix}.dw"),
                    Src::Layer(h),
                    h_src_c,
                    h_src_c,
                    3,
                    stride,
                    h_src_c,
                    false,
                    UnaryKind::Relu6,
                    2.0,
                );
                h = self.conv_unit(
                    &format!("{prefix}.project"),
                    Src::Layer(h),
                    h_src_c,
                    stage.channels,
                    1,
                    1,
                    1,
                    true,
                    UnaryKind::Relu6,
                    2.0,
                );
                if stride == 1 && block_in_c == stage.channels {
                    h = self.push(
                        format!("{prefix}.add"),
                        LayerKind::Add,
                        vec![Src::Layer(block_in), Src::Layer(h)],
                    );
                }
                cur = h;
                cur_c = stage.channels;
            }
            self.backbone_taps.push((cur, factor));
        }

        let factors: Vec<usize> = self.backbone_taps.iter().map(|&(_, f)| f).collect();
        if factors != [2, 4, 8, 16, 32] {
            return Err(Error::Config(format!(
                "stage taps must sit at 1/2..1/32, schedule yields {factors:?}"
            )));
        }
        Ok(())
    }

    /// Two sequential stride-2 pools condensing the 1/32 features to 1/64 and
    /// 1/128, completing the pyramid the propagation module walks.
    pub fn build_context_pooling(&mut self, cfg: &AblationConfig) -> Result<()> {
        let &(l5, f5) = self
            .backbone_taps
            .last()
            .filter(|&&(_, f)| f == 32)
            .ok_or_else(|| Error::Config("context pooling requires the 1/32 tap".into()))?;
        if !matches!(cfg.context_pool_k, 3 | 5) {
            return Err(Error::Config(format!(
                "context pooling kernel must be 3 or 5, got {}",
                cfg.context_pool_k
            )));
        }
        let params = PoolParams {
            kind: cfg.context_pool_kind,
            k: cfg.context_pool_k,
            stride: 2,
            padding: cfg.context_pool_k / 2,
        };
        let p6 = self.push("context.pool6".into(), LayerKind::Pool(params), vec![Src::Layer(l5)]);
        let p7 = self.push("context.pool7".into(), LayerKind::Pool(params), vec![Src::Layer(p6)]);

        self.pyramid.clear();
        for &(idx, f) in &self.backbone_taps {
            if f >= 4 {
                self.pyramid.push((idx, f));
            }
        }
        self.pyramid.push((p6, f5 * 2));
        self.pyramid.push((p7, f5 * 4));
        Ok(())
    }

    /// One fusion site: weighted sum of the resident feature with the
    /// propagated neighbor, then separable conv, affine and relu.
    fn fusion_site(&mut self, prefix: &str, resident: usize, propagated: usize, width: usize) -> usize {
        let fuse = self.push(
            format!("{prefix}.fuse"),
            LayerKind::Fusion,
            vec![Src::Layer(resident), Src::Layer(propagated)],
        );
        // Resident-dominant start: the propagated neighbor enters at half
        // weight so every level's own features carry the early training
        // signal and the context contribution grows as the scalars learn.
        self.add_slot(fuse, "theta", (1, 1, 1, 1), Init::Const(1.0), false);
        self.add_slot(fuse, "sigma", (1, 1, 1, 1), Init::Const(0.5), false);

        let sep = self.push(
            format!("{prefix}.sep"),
            LayerKind::Separable { c_in: width, c_out: width, k: 3 },
            vec![Src::Layer(fuse)],
        );
        self.add_slot(sep, "dw.w", (width, 1, 3, 3), Init::DeltaKernel { noise: 0.1 / 3.0 }, true);
        self.add_slot(
            sep,
            "pw.w",
            (width, width, 1, 1),
            Init::ScaledIdentity { scale: 0.8, noise: 0.1 / (width as f64).sqrt() },
            true,
        );
        self.add_slot(sep, "pw.b", (1, width, 1, 1), Init::Const(0.0), true);

        let affine = self.push(
            format!("{prefix}.affine"),
            LayerKind::Affine { c: width },
            vec![Src::Layer(sep)],
        );
        self.add_slot(affine, "scale", (1, width, 1, 1), Init::Const(1.0), true);
        self.add_slot(affine, "shift", (1, width, 1, 1), Init::Const(0.0), false);

        self.push(
            format!("{prefix}.relu"),
            LayerKind::Activation(UnaryKind::Relu),
            vec![Src::Layer(affine)],
        )
    }

    /// The bi-directional propagation module: 1x1 lateral projections bring
    /// every pyramid level to `fusion_width` channels, then a top-down path,
    /// a bottom-up path (max-pool downsampling) and a second top-down path
    /// fuse adjacent levels. Every site owns an independent scalar pair.
    pub fn build_bcp_module(&mut self, fusion_width: usize) -> Result<()> {
        let factors: Vec<usize> = self.pyramid.iter().map(|&(_, f)| f).collect();
        if factors != [4, 8, 16, 32, 64, 128] {
            return Err(Error::Config(format!(
                "propagation module needs pyramid levels 1/4..1/128, got {factors:?}"
            )));
        }
        if fusion_width == 0 {
            return Err(Error::Config("fusion width must be >= 1".into()));
        }
        self.fusion_width = fusion_width;

        // Lateral projections, shallow to deep.
        let mut lat = std::collections::BTreeMap::new();
        for &(idx, f) in &self.pyramid.clone() {
            let c_in = self.channels[idx];
            let out = self.conv_unit(
                &format!("bcp.lat{f}"),
                Src::Layer(idx),
                c_in,
                fusion_width,
                1,
                1,
                1,
                true,
                UnaryKind::Relu,
                1.0,
            );
            lat.insert(f, out);
        }

        // First top-down path: deep context flows toward the shallow levels.
        let mut td1 = std::collections::BTreeMap::new();
        td1.insert(128usize, lat[&128]);
        for f in [64usize, 32, 16, 8, 4] {
            let resident = lat[&f];
            let resize = self.push(
                format!("bcp.td1.f{f}.resize"),
                LayerKind::Resize(ResizeTarget::Layer(resident)),
                vec![Src::Layer(td1[&(f * 2)])],
            );
            let out = self.fusion_site(&format!("bcp.td1.f{f}"), resident, resize, fusion_width);
            td1.insert(f, out);
        }

        // Bottom-up path: aggregated detail flows back toward the deep levels.
        let mut bu = std::collections::BTreeMap::new();
        bu.insert(4usize, td1[&4]);
        for f in [8usize, 16, 32, 64, 128] {
            let resident = td1[&f];
            let pool = self.push(
                format!("bcp.bu.f{f}.pool"),
                LayerKind::Pool(PoolParams { kind: PoolKind::Max, k: 3, stride: 2, padding: 1 }),
                vec![Src::Layer(bu[&(f / 2)])],
            );
            let out = self.fusion_site(&format!("bcp.bu.f{f}"), resident, pool, fusion_width);
            bu.insert(f, out);
        }

        // Second top-down path delivers the final context-enriched features.
        let mut td2 = std::collections::BTreeMap::new();
        td2.insert(128usize, bu[&128]);
        for f in [64usize, 32, 16, 8, 4] {
            let resident = bu[&f];
            let resize = self.push(
                format!("bcp.td2.f{f}.resize"),
                LayerKind::Resize(ResizeTarget::Layer(resident)),
                vec![Src::Layer(td2[&(f * 2)])],
            );
            let out = self.fusion_site(&format!("bcp.td2.f{f}"), resident, resize, fusion_width);
            td2.insert(f, out);
        }

        self.bcp_out8 = Some(td2[&8]);
        Ok(())
    }

    /// 1x1 classifier over the enhanced 1/8 features (or the raw 1/8 tap in
    /// the no-propagation baseline), bilinearly upsampled x8 to input size.
    pub fn build_classifier(mut self, num_classes: usize) -> Result<ModelGraph> {
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if num_classes > 255 {
            return Err(Error::Config("at most 255 classes supported".into()));
        }
        let classifier_input = match self.bcp_out8 {
            Some(idx) => idx,
            None => {
                self.backbone_taps
                    .iter()
                    .find(|&&(_, f)| f == 8)
                    .ok_or_else(|| Error::Config("classifier requires a 1/8 feature tap".into()))?
                    .0
            }
        };
        let c_in = self.channels[classifier_input];
        let conv = self.push(
            "classifier.conv".into(),
            LayerKind::Conv { c_in, c_out: num_classes, k: 1, stride: 1, padding: 0, groups: 1, bias: true },
            vec![Src::Layer(classifier_input)],
        );
        self.add_slot(conv, "w", (num_classes, c_in, 1, 1), Init::FanInNormal { fan_in: c_in, gain: 1.0 }, true);
        self.add_slot(conv, "b", (1, num_classes, 1, 1), Init::Const(0.0), true);
        let logits = self.push(
            "classifier.upsample".into(),
            LayerKind::Resize(ResizeTarget::Input),
            vec![Src::Layer(conv)],
        );

        let graph = ModelGraph {
            layers: self.layers,
            slots: self.slots,
            backbone_taps: self.backbone_taps,
            pyramid_levels: self.pyramid,
            classifier_input,
            logits_layer: logits,
            num_classes,
            fusion_width: self.fusion_width,
            variant: AblationConfig::default(),
        };
        graph.validate_topology()?;
        Ok(graph)
    }
}

impl Default for GraphBuilder {
    fn default() -> Self {
        Self::new()
    }
}

/// Compose the full network for a given configuration. With
/// `ablation.use_bcp == false` the pyramid, pooling and fusion layers are
/// omitted and the classifier reads the raw 1/8 tap.
pub fn build_bcpnet(cfg: &ModelConfig) -> Result<ModelGraph> {
    let mut b = GraphBuilder::new();
    b.build_backbone(&cfg.schedule)?;
    if cfg.ablation.use_bcp {
        b.build_context_pooling(&cfg.ablation)?;
        b.build_bcp_module(cfg.fusion_width)?;
    }
    let mut graph = b.build_classifier(cfg.num_classes)?;
    graph.variant = cfg.ablation;
    Ok(graph)
}
