//! Desk-scale training: poly learning-rate schedule, SGD with momentum and
//! weight decay, flip/scale/crop augmentation, the mIoU metric, and a
//! deterministic training loop over the synthetic shape dataset.
//!
//! The loop is single-threaded and fully determined by the seed: the data
//! stream, augmentation draws and weight initialization each use an
//! independent stream derived from it, so two runs with one seed produce
//! identical loss histories and weights, and two model variants trained with
//! one seed see identical data.

mod synth;

pub use synth::{synth_sample, SampleGen, ShapeGen, SynthSample};

use crate::autograd::backward;
use crate::error::{Error, Result};
use crate::graph::{forward, forward_retained, init_weights, ModelGraph, SlotSpec, WeightStore};
use crate::nnops::{argmax_labels, softmax_cross_entropy};
use crate::rng::Rng;
use crate::tensor::{LabelMap, Scalar, Tensor4};

/// Label value excluded from the loss and the metric.
pub const IGNORE_INDEX: u8 = 255;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub init_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_iter: usize,
    pub batch: usize,
    pub crop: (usize, usize),
    pub scale_range: (f64, f64),
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// The desk-scale recipe. The published schedule starts at 0.1 with
    /// mini-batches of 36-48 full-resolution crops; at batch 4 the linear
    /// batch-size scaling rule lands near 0.01-0.02, and 0.02 trains every
    /// variant reliably where 0.1 is an optimization coin flip.
    fn default() -> Self {
        TrainConfig {
            init_lr: 0.02,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-5,
            total_iter: 300,
            batch: 4,
            crop: (96, 96),
            scale_range: (0.5, 2.0),
            flip_prob: 0.5,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.init_lr <= 0.0 {
            return Err(Error::Config("init_lr must be > 0".into()));
        }
        if self.power < 0.0 {
            return Err(Error::Config("power must be >= 0".into()));
        }
        if self.total_iter == 0 {
            return Err(Error::Config("total_iter must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.crop.0 == 0 || self.crop.1 == 0 {
            return Err(Error::Config("crop must be >= 1 in both dimensions".into()));
        }
        if self.scale_range.0 > self.scale_range.1 || self.scale_range.0 <= 0.0 {
            return Err(Error::Config("scale range must satisfy 0 < min <= max".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip_prob must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `init_lr * (1 - iter / total_iter) ^ power`.
pub fn poly_lr(cfg: &TrainConfig, iter: usize) -> Result<f64> {
    if iter > cfg.total_iter {
        return Err(Error::Schedule(format!(
            "iteration {iter} outside schedule of {} iterations",
            cfg.total_iter
        )));
    }
    let frac = 1.0 - iter as f64 / cfg.total_iter as f64;
    Ok(cfg.init_lr * frac.powf(cfg.power))
}

/// One SGD update:
/// `v <- momentum * v + g + weight_decay * w; w <- w - lr * v`.
/// Fusion scalars and affine shifts are excluded from weight decay.
pub fn sgd_step<S: Scalar>(
    slots: &[SlotSpec],
    weights: &mut WeightStore<S>,
    grads: &WeightStore<S>,
    velocity: &mut WeightStore<S>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let momentum = S::from_f64(cfg.momentum);
    let lr_s = S::from_f64(lr);
    for slot in slots {
        let g = grads.get(&slot.name)?;
        let v = velocity.get_mut(&slot.name)?;
        let decay =
            if slot.weight_decay { S::from_f64(cfg.weight_decay) } else { S::ZERO };
        if g.shape() != slot.shape || v.shape() != slot.shape {
            return Err(Error::ShapeMismatch(format!(
                "slot '{}' stores disagree on shape",
                slot.name
            )));
        }
        {
            let w = weights.get(&slot.name)?;
            for ((vv, &gv), &wv) in v.data_mut().iter_mut().zip(g.data()).zip(w.data()) {
                *vv = momentum * *vv + gv + decay * wv;
            }
        }
        let w = weights.get_mut(&slot.name)?;
        let v = velocity.get(&slot.name)?;
        for (wv, &vv) in w.data_mut().iter_mut().zip(v.data()) {
            *wv = *wv - lr_s * vv;
        }
    }
    Ok(())
}

fn zero_store<S: Scalar>(slots: &[SlotSpec]) -> WeightStore<S> {
    let mut store = WeightStore::new();
    for slot in slots {
        store.insert(slot.name.clone(), Tensor4::zeros(slot.shape).expect("valid slot shape"));
    }
    store
}

/// Nearest-neighbor resize for label maps (half-pixel convention).
fn nearest_resize_labels(labels: &LabelMap, out_h: usize, out_w: usize) -> LabelMap {
    let (n, in_h, in_w) = labels.shape();
    let pick = |d: usize, in_dim: usize, out_dim: usize| -> usize {
        let src = (d as f64 + 0.5) * in_dim as f64 / out_dim as f64 - 0.5;
        (src.round().max(0.0) as usize).min(in_dim - 1)
    };
    let mut out = LabelMap::filled(n, out_h, out_w, 0);
    for bn in 0..n {
        for y in 0..out_h {
            let sy = pick(y, in_h, out_h);
            for x in 0..out_w {
                out.set(bn, y, x, labels.at(bn, sy, pick(x, in_w, out_w)));
            }
        }
    }
    out
}

fn hflip_sample(sample: &SynthSample) -> SynthSample {
    let (n, c, h, w) = sample.image.shape();
    let image = Tensor4::from_fn((n, c, h, w), |bn, ch, y, x| sample.image.at(bn, ch, y, w - 1 - x))
        .expect("same shape");
    let mut labels = LabelMap::filled(n, h, w, 0);
    for bn in 0..n {
        for y in 0..h {
            for x in 0..w {
                labels.set(bn, y, x, sample.labels.at(bn, y, w - 1 - x));
            }
        }
    }
    SynthSample { image, labels }
}

/// Random horizontal flip, uniform scale from the configured range (bilinear
/// for the image, nearest for labels), then a random crop to `cfg.crop`,
/// padding with zero pixels and the ignore label when the scaled sample is
/// smaller than the crop.
pub fn augment(sample: &SynthSample, cfg: &TrainConfig, rng: &mut Rng) -> Result<SynthSample> {
    let (_, _, h, w) = sample.image.shape();
    let scale = rng.uniform(cfg.scale_range.0, cfg.scale_range.1);
    let flip = rng.chance(cfg.flip_prob);

    let new_h = ((h as f64 * scale).round() as usize).max(1);
    let new_w = ((w as f64 * scale).round() as usize).max(1);
    let mut scaled = SynthSample {
        image: crate::nnops::bilinear_resize(&sample.image, new_h, new_w)?,
        labels: nearest_resize_labels(&sample.labels, new_h, new_w),
    };
    if flip {
        scaled = hflip_sample(&scaled);
    }

    let (crop_h, crop_w) = cfg.crop;
    let (n, c, sh, sw) = scaled.image.shape();
    let (pad_h, pad_w) = (sh.max(crop_h), sw.max(crop_w));
    if pad_h > sh || pad_w > sw {
        let mut image = Tensor4::zeros((n, c, pad_h, pad_w))?;
        let mut labels = LabelMap::filled(n, pad_h, pad_w, IGNORE_INDEX);
        for bn in 0..n {
            for ch in 0..c {
                for y in 0..sh {
                    image.row_mut(bn, ch, y)[..sw].copy_from_slice(scaled.image.row(bn, ch, y));
                }
            }
            for y in 0..sh {
                for x in 0..sw {
                    labels.set(bn, y, x, scaled.labels.at(bn, y, x));
                }
            }
        }
        scaled = SynthSample { image, labels };
    }

    let (_, _, sh, sw) = scaled.image.shape();
    let oy = rng.below(sh - crop_h + 1);
    let ox = rng.below(sw - crop_w + 1);
    let image = Tensor4::from_fn((n, c, crop_h, crop_w), |bn, ch, y, x| {
        scaled.image.at(bn, ch, oy + y, ox + x)
    })?;
    let mut labels = LabelMap::filled(n, crop_h, crop_w, 0);
    for bn in 0..n {
        for y in 0..crop_h {
            for x in 0..crop_w {
                labels.set(bn, y, x, scaled.labels.at(bn, oy + y, ox + x));
            }
        }
    }
    Ok(SynthSample { image, labels })
}

/// Confusion-matrix accumulator over non-ignored pixels.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    k: usize,
    /// Row-major `k x k`: rows are ground truth, columns predictions.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { k: num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn update(&mut self, pred: &LabelMap, gt: &LabelMap, ignore_index: u8) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(Error::ShapeMismatch(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.shape(),
                gt.shape()
            )));
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == ignore_index {
                continue;
            }
            if (g as usize) >= self.k || (p as usize) >= self.k {
                return Err(Error::Label(format!(
                    "label pair (gt {g}, pred {p}) out of range for {} classes",
                    self.k
                )));
            }
            self.counts[g as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    /// Intersection over union per class; `None` where the union is empty.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let inter = self.counts[c * self.k + c];
                let gt_total: u64 = (0..self.k).map(|p| self.counts[c * self.k + p]).sum();
                let pred_total: u64 = (0..self.k).map(|g| self.counts[g * self.k + c]).sum();
                let union = gt_total + pred_total - inter;
                if union == 0 {
                    None
                } else {
                    Some(inter as f64 / union as f64)
                }
            })
            .collect()
    }

    /// Mean IoU over classes with non-empty union (0 if none).
    pub fn mean_iou(&self) -> f64 {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }
}

/// Per-class IoU and mean over one prediction/ground-truth pair.
pub fn miou(
    pred: &LabelMap,
    gt: &LabelMap,
    num_classes: usize,
    ignore_index: u8,
) -> Result<(Vec<Option<f64>>, f64)> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.update(pred, gt, ignore_index)?;
    Ok((cm.per_class_iou(), cm.mean_iou()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

pub struct TrainOutcome {
    pub weights: WeightStore<f32>,
    pub history: Vec<HistoryRow>,
    pub per_class_iou: Vec<Option<f64>>,
    pub final_miou: f64,
}

/// Number of freshly generated held-out samples used for the final score.
pub const EVAL_SAMPLES: usize = 32;

/// Synthetic samples are generated at 3/2 of the crop size so that
/// downscaling augmentation still leaves room for a full crop.
pub fn generation_size(crop: (usize, usize)) -> (usize, usize) {
    (crop.0 * 3 / 2, crop.1 * 3 / 2)
}

/// Deterministic training loop. Streams `cfg.batch` freshly generated,
/// augmented samples per iteration, records `(iter, lr, loss)` every step
/// and scores mIoU on [`EVAL_SAMPLES`] held-out samples afterwards.
pub fn train_loop(
    graph: &ModelGraph,
    cfg: &TrainConfig,
    gen: &dyn SampleGen,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut weights: WeightStore<f32> = init_weights(graph, cfg.seed);
    let mut velocity: WeightStore<f32> = zero_store(&graph.slots);
    let mut rng_data = Rng::new(cfg.seed).split(0xDA7A);
    let (gen_h, gen_w) = generation_size(cfg.crop);

    let mut history = Vec::with_capacity(cfg.total_iter);
    for iter in 0..cfg.total_iter {
        let lr = poly_lr(cfg, iter)?;
        let mut images = Vec::with_capacity(cfg.batch);
        let mut labels = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let sample = gen.sample(&mut rng_data, gen_h, gen_w);
            let cropped = augment(&sample, cfg, &mut rng_data)?;
            images.push(cropped.image);
            labels.push(cropped.labels);
        }
        let x = Tensor4::stack_batches(&images)?;
        let y = LabelMap::stack_batches(&labels)?;

        let acts = forward_retained(graph, &weights, &x)?;
        let (loss, ce_grad) = softmax_cross_entropy(acts.logits(graph), &y, IGNORE_INDEX)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { iter, msg: format!("loss {loss}") });
        }
        let grads = backward(graph, &weights, &acts, &ce_grad)?;
        sgd_step(&graph.slots, &mut weights, &grads.slots, &mut velocity, lr, cfg)?;
        history.push(HistoryRow { iter, lr, loss });
    }

    // Held-out evaluation on fresh full scenes at the generation size
    // (the training distribution before cropping), no augmentation.
    let mut rng_eval = Rng::new(cfg.seed).split(0xE7A1);
    let mut cm = ConfusionMatrix::new(graph.num_classes);
    for _ in 0..EVAL_SAMPLES {
        let sample = gen.sample(&mut rng_eval, gen_h, gen_w);
        let (logits, _) = forward(graph, &weights, &sample.image)?;
        let pred = argmax_labels(&logits)?;
        cm.update(&pred, &sample.labels, IGNORE_INDEX)?;
    }

    Ok(TrainOutcome {
        weights,
        history,
        per_class_iou: cm.per_class_iou(),
        final_miou: cm.mean_iou(),
    })
}

/// `iter,lr,loss` CSV.
pub fn history_to_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("iter,lr,loss\n");
    for row in history {
        out.push_str(&format!("{},{},{}\n", row.iter, row.lr, row.loss));
    }
    out
}

/// `class,iou` CSV with a final mean row; empty-union classes print `nan`.
pub fn eval_to_csv(per_class: &[Option<f64>], mean: f64) -> String {
    let mut out = String::from("class,iou\n");
    for (c, iou) in per_class.iter().enumerate() {
        match iou {
            Some(v) => out.push_str(&format!("{c},{v}\n")),
            None => out.push_str(&format!("{c},nan\n")),
        }
    }
    out.push_str(&format!("mean,{mean}\n"));
    out
}
