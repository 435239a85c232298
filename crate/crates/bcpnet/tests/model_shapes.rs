//! Structural contracts of the built network: shape formulas at assorted
//! input sizes, pyramid taps, ablation variants, parameter budgets, the
//! identity data path, and forward determinism.

use bcpnet::complexity::{count_macs, infer_shapes};
use bcpnet::graph::{
    build_bcpnet, forward, init_weights, AblationConfig, LayerKind, ModelConfig, ModelGraph, Src,
    WeightStore,
};
use bcpnet::nnops::PoolKind;
use bcpnet::rng::Rng;
use bcpnet::tensor::Tensor4;

fn default_graph(num_classes: usize) -> ModelGraph {
    build_bcpnet(&ModelConfig { num_classes, ..Default::default() }).unwrap()
}

fn random_image(rng: &mut Rng, h: usize, w: usize) -> Tensor4<f32> {
    Tensor4::from_fn((1, 3, h, w), |_, _, _, _| rng.uniform(0.0, 1.0) as f32).unwrap()
}

/// Downsample chain by the conv/pool shape formula (k 3, stride 2, pad 1).
fn halve_chain(mut d: usize, times: usize) -> usize {
    for _ in 0..times {
        d = (d + 2 - 3) / 2 + 1;
    }
    d
}

#[test]
fn logits_match_input_shape_across_sweep() {
    let graph = default_graph(5);
    let weights = init_weights(&graph, 3);
    let mut rng = Rng::new(1);
    for (h, w) in [(64, 64), (113, 97), (360, 640), (713, 713)] {
        let x = random_image(&mut rng, h, w);
        let (logits, taps) = forward(&graph, &weights, &x).unwrap();
        assert_eq!(logits.shape(), (1, 5, h, w), "{h}x{w}");
        assert!(logits.all_finite());
        // Every pyramid tap obeys the repeated halving formula.
        for &(idx, factor) in &graph.pyramid_levels {
            let id = &graph.layers[idx].id;
            let tap = &taps[id];
            let times = factor.trailing_zeros() as usize;
            assert_eq!(
                (tap.height(), tap.width()),
                (halve_chain(h, times), halve_chain(w, times)),
                "tap {id} at factor {factor} for {h}x{w}"
            );
        }
    }
}

#[test]
fn inferred_shapes_match_executed_shapes() {
    let graph = default_graph(4);
    let weights = init_weights(&graph, 5);
    let mut rng = Rng::new(2);
    for (h, w) in [(64, 64), (113, 97)] {
        let x = random_image(&mut rng, h, w);
        let acts = bcpnet::graph::forward_retained(&graph, &weights, &x).unwrap();
        let inferred = infer_shapes(&graph, 1, h, w).unwrap();
        for (idx, shape) in inferred.iter().enumerate() {
            assert_eq!(acts.values[idx].shape(), *shape, "layer {}", graph.layers[idx].id);
        }
    }
}

#[test]
fn deepest_tap_shape_example() {
    // 256 / 128 = 2.
    let graph = default_graph(3);
    let weights = init_weights(&graph, 7);
    let mut rng = Rng::new(3);
    let x = random_image(&mut rng, 256, 256);
    let (_, taps) = forward(&graph, &weights, &x).unwrap();
    let (idx, factor) = *graph.pyramid_levels.last().unwrap();
    assert_eq!(factor, 128);
    let p7 = &taps[&graph.layers[idx].id];
    let (_, c, ph, pw) = p7.shape();
    assert_eq!((ph, pw), (2, 2));
    assert_eq!(c, 116);
}

#[test]
fn forward_is_deterministic() {
    let graph = default_graph(3);
    let weights = init_weights(&graph, 11);
    let mut rng = Rng::new(4);
    let x = random_image(&mut rng, 96, 128);
    let (a, _) = forward(&graph, &weights, &x).unwrap();
    let (b, _) = forward(&graph, &weights, &x).unwrap();
    for (u, v) in a.data().iter().zip(b.data()) {
        assert_eq!(u.to_bits(), v.to_bits());
    }
}

#[test]
fn forward_is_nonlinear_because_activations_are_wired() {
    let graph = default_graph(3);
    let weights = init_weights(&graph, 13);
    let mut rng = Rng::new(5);
    let x = random_image(&mut rng, 64, 64);
    let doubled = x.map(|v| v * 2.0);
    let (fx, _) = forward(&graph, &weights, &x).unwrap();
    let (f2x, _) = forward(&graph, &weights, &doubled).unwrap();
    let linear = fx.map(|v| v * 2.0);
    let diff: f32 = f2x
        .data()
        .iter()
        .zip(linear.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max);
    assert!(diff > 1e-3, "forward looks linear (max dev {diff})");
}

#[test]
fn baseline_census_has_no_fusion_and_only_the_classifier_resize() {
    let cfg = ModelConfig {
        num_classes: 3,
        ablation: AblationConfig { use_bcp: false, ..Default::default() },
        ..Default::default()
    };
    let graph = build_bcpnet(&cfg).unwrap();
    let mut fusion = 0;
    let mut resize = Vec::new();
    let mut pools = 0;
    for layer in &graph.layers {
        match layer.kind {
            LayerKind::Fusion => fusion += 1,
            LayerKind::Resize(_) => resize.push(layer.id.clone()),
            LayerKind::Pool(_) => pools += 1,
            _ => {}
        }
    }
    assert_eq!(fusion, 0);
    assert_eq!(pools, 0);
    assert_eq!(resize, vec!["classifier.upsample".to_string()]);
    assert!(graph.pyramid_levels.is_empty());
}

#[test]
fn ablation_pool_kind_changes_no_shape() {
    let mk = |kind: PoolKind, k: usize| {
        let cfg = ModelConfig {
            num_classes: 3,
            ablation: AblationConfig { use_bcp: true, context_pool_kind: kind, context_pool_k: k },
            ..Default::default()
        };
        build_bcpnet(&cfg).unwrap()
    };
    let max3 = mk(PoolKind::Max, 3);
    let avg3 = mk(PoolKind::Avg, 3);
    let max5 = mk(PoolKind::Max, 5);
    for (h, w) in [(128, 128), (96, 160)] {
        let a = infer_shapes(&max3, 1, h, w).unwrap();
        let b = infer_shapes(&avg3, 1, h, w).unwrap();
        let c = infer_shapes(&max5, 1, h, w).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }
}

#[test]
fn parameter_budgets_per_variant() {
    let full = default_graph(19);
    let total = full.param_count() as f64;
    assert!((total - 610_000.0).abs() / 610_000.0 < 0.10, "total {total}");

    let backbone: usize = full
        .slots
        .iter()
        .filter(|s| s.name.starts_with("backbone."))
        .map(|s| s.elements())
        .sum();
    assert!((backbone as f64 - 430_000.0).abs() / 430_000.0 < 0.15, "backbone {backbone}");

    let bcp: usize = full
        .slots
        .iter()
        .filter(|s| s.name.starts_with("bcp."))
        .map(|s| s.elements())
        .sum();
    assert!((bcp as f64 - 180_000.0).abs() / 180_000.0 < 0.15, "bcp module {bcp}");
}

#[test]
fn fusion_sites_and_pyramid_structure() {
    let graph = default_graph(19);
    let sites = graph.layers.iter().filter(|l| matches!(l.kind, LayerKind::Fusion)).count();
    assert_eq!(sites, 15);
    let factors: Vec<usize> = graph.pyramid_levels.iter().map(|&(_, f)| f).collect();
    assert_eq!(factors, vec![4, 8, 16, 32, 64, 128]);
    graph.validate_topology().unwrap();
}

#[test]
fn backbone_schedule_validation() {
    use bcpnet::graph::{BackboneSchedule, StageSpec};
    // No stages.
    let empty = ModelConfig {
        schedule: BackboneSchedule { stem_channels: 8, stages: vec![] },
        ..Default::default()
    };
    assert!(build_bcpnet(&empty).is_err());
    // Wrong reach (stops at 1/16).
    let shallow = ModelConfig {
        schedule: BackboneSchedule {
            stem_channels: 8,
            stages: vec![
                StageSpec::new(8, 1, 1, 1),
                StageSpec::new(16, 1, 2, 1),
                StageSpec::new(24, 1, 2, 1),
                StageSpec::new(32, 1, 2, 1),
                StageSpec::new(48, 1, 1, 1),
            ],
        },
        ..Default::default()
    };
    assert!(build_bcpnet(&shallow).is_err());
    // num_classes 0.
    let degenerate = ModelConfig { num_classes: 0, ..Default::default() };
    assert!(build_bcpnet(&degenerate).is_err());
}

#[test]
fn identity_initialized_path_reproduces_laterals() {
    // theta = 1, sigma = 0, delta depthwise, identity pointwise, neutral
    // affine: the first top-down path must pass each lateral through
    // unchanged (its relu is a no-op on relu-projected laterals).
    let graph = default_graph(3);
    let mut weights: WeightStore<f64> = init_weights(&graph, 17);
    for slot in &graph.slots {
        let name = &slot.name;
        if name.starts_with("bcp.td1.") {
            if name.ends_with(".fuse.theta") {
                weights.insert(name.clone(), Tensor4::filled((1, 1, 1, 1), 1.0).unwrap());
            } else if name.ends_with(".fuse.sigma") {
                weights.insert(name.clone(), Tensor4::filled((1, 1, 1, 1), 0.0).unwrap());
            } else if name.ends_with(".sep.dw.w") {
                let t = Tensor4::from_fn(slot.shape, |_, _, y, x| {
                    if y == 1 && x == 1 {
                        1.0
                    } else {
                        0.0
                    }
                })
                .unwrap();
                weights.insert(name.clone(), t);
            } else if name.ends_with(".sep.pw.w") {
                let t = Tensor4::from_fn(slot.shape, |o, i, _, _| if o == i { 1.0 } else { 0.0 })
                    .unwrap();
                weights.insert(name.clone(), t);
            } else if name.ends_with(".sep.pw.b") || name.ends_with(".affine.shift") {
                weights.insert(name.clone(), Tensor4::zeros(slot.shape).unwrap());
            } else if name.ends_with(".affine.scale") {
                weights.insert(name.clone(), Tensor4::filled(slot.shape, 1.0).unwrap());
            }
        }
    }
    let mut rng = Rng::new(6);
    let x = Tensor4::from_fn((1, 3, 128, 128), |_, _, _, _| rng.uniform(0.0, 1.0)).unwrap();
    let acts = bcpnet::graph::forward_retained(&graph, &weights, &x).unwrap();
    for factor in [4usize, 8, 16, 32, 64] {
        let lat = graph.layer_index(&format!("bcp.lat{factor}.relu")).unwrap();
        let td1 = graph.layer_index(&format!("bcp.td1.f{factor}.relu")).unwrap();
        let lat_v = &acts.values[lat];
        let td1_v = &acts.values[td1];
        assert_eq!(lat_v.shape(), td1_v.shape());
        for (a, b) in lat_v.data().iter().zip(td1_v.data()) {
            assert!((a - b).abs() < 1e-12, "factor {factor}: {a} vs {b}");
        }
    }
}

#[test]
fn params_constant_across_resolutions_via_reports() {
    let graph = default_graph(19);
    let a = count_macs(&graph, 128, 128).unwrap().total_params;
    let b = count_macs(&graph, 512, 512).unwrap().total_params;
    assert_eq!(a, b);
    assert_eq!(a as usize, graph.param_count());
}

#[test]
fn missing_weight_is_reported() {
    let graph = default_graph(3);
    let weights: WeightStore<f32> = WeightStore::new();
    let x = Tensor4::filled((1, 3, 64, 64), 0.5f32).unwrap();
    match forward(&graph, &weights, &x) {
        Err(bcpnet::error::Error::MissingWeight(name)) => {
            assert!(name.starts_with("backbone.stem"), "{name}");
        }
        other => panic!("expected missing-weight error, got {other:?}"),
    }
}

#[test]
fn no_input_layer_consumes_later_output() {
    let graph = default_graph(19);
    for (i, layer) in graph.layers.iter().enumerate() {
        for src in &layer.inputs {
            if let Src::Layer(j) = src {
                assert!(*j < i, "layer {} consumes {j}", layer.id);
            }
        }
    }
}
