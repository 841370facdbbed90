//! Center-cell target assignment, the composite detection loss and the SGD
//! loop with early stopping on validation mAP50.

use std::fmt::Write as _;

use msdet_tensor::{add, bce_with_logits, iou_loss, narrow_channels, no_grad, scale, Sgd, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boxes::{DetBox, GtBox};
use crate::data::{batch_images, Sample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, ImageRecord};
use crate::nn::Ctx;
use crate::zoo::{Model, MAX_DETECTIONS};

/// Longest-side limits, in pixels, for strides 8 and 16; larger boxes go to
/// stride 32.
pub const SIZE_LIMITS: [f64; 2] = [24.0, 96.0];

/// Above this the loss is treated as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub box_: f64,
    pub obj: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            box_: 5.0,
            obj: 10.0,
            cls: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Epochs without a val mAP50 improvement before stopping.
    pub patience: usize,
    pub loss_weights: LossWeights,
    /// Score cutoff for the detections that feed AP.
    pub eval_conf: f64,
    /// Score cutoff for reported precision and recall.
    pub pr_conf: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 8,
            warmup_epochs: 3,
            seed: 0,
            patience: 50,
            loss_weights: LossWeights::default(),
            eval_conf: 0.001,
            pr_conf: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        TrainConfig {
            epochs: 30,
            patience: 10,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        let w = self.loss_weights;
        if [w.box_, w.obj, w.cls].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Head level (0 = stride 8) responsible for a box.
pub fn level_for(gt: &GtBox) -> usize {
    let side = gt.bbox.width().max(gt.bbox.height());
    SIZE_LIMITS.iter().position(|&l| side <= l).unwrap_or(SIZE_LIMITS.len())
}

/// Dense targets of one level, laid out like the head output.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// N×H×W, 1 on positive cells.
    pub obj: Vec<f64>,
    /// N×K×H×W one-hot on positive cells.
    pub cls: Vec<f64>,
    /// N×4×H×W distances in stride units.
    pub ltrb: Vec<f64>,
    /// Area of the box owning each cell, for collision resolution.
    owner_area: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub num_classes: usize,
    pub levels: Vec<LevelTargets>,
    pub positives: usize,
    /// GTs that lost their cell to a larger box.
    pub collisions: usize,
    /// GTs whose center lies outside the grid.
    pub unassignable: usize,
}

/// Each box goes to one level by size and to the cell holding its center;
/// a shared cell keeps the larger box.
pub fn assign_targets(
    gts: &[&[GtBox]],
    grids: &[(usize, usize)],
    strides: &[usize],
    num_classes: usize,
) -> Targets {
    let n = gts.len();
    let mut levels: Vec<LevelTargets> = grids
        .iter()
        .zip(strides)
        .map(|(&(h, w), &stride)| LevelTargets {
            stride,
            height: h,
            width: w,
            obj: vec![0.0; n * h * w],
            cls: vec![0.0; n * num_classes * h * w],
            ltrb: vec![0.0; n * 4 * h * w],
            owner_area: vec![0.0; n * h * w],
        })
        .collect();
    let mut t = Targets {
        num_classes,
        levels: Vec::new(),
        positives: 0,
        collisions: 0,
        unassignable: 0,
    };
    for (b, image_gts) in gts.iter().enumerate() {
        for gt in image_gts.iter() {
            let li = level_for(gt).min(levels.len().saturating_sub(1));
            let Some(lv) = levels.get_mut(li) else {
                t.unassignable += 1;
                continue;
            };
            let s = lv.stride as f64;
            let (cx, cy) = gt.bbox.center();
            let (j, i) = ((cx / s).floor(), (cy / s).floor());
            if gt.class_id >= num_classes || j < 0.0 || i < 0.0 || j >= lv.width as f64 || i >= lv.height as f64 {
                t.unassignable += 1;
                continue;
            }
            let (i, j) = (i as usize, j as usize);
            let plane = lv.height * lv.width;
            let p = i * lv.width + j;
            let cell = b * plane + p;
            let area = gt.bbox.area();
            if lv.obj[cell] == 1.0 {
                t.collisions += 1;
                if area <= lv.owner_area[cell] {
                    continue;
                }
                for k in 0..num_classes {
                    lv.cls[(b * num_classes + k) * plane + p] = 0.0;
                }
            } else {
                t.positives += 1;
            }
            lv.obj[cell] = 1.0;
            lv.owner_area[cell] = area;
            lv.cls[(b * num_classes + gt.class_id) * plane + p] = 1.0;
            let (ax, ay) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
            let d = [ax - gt.bbox.x_min, ay - gt.bbox.y_min, gt.bbox.x_max - ax, gt.bbox.y_max - ay];
            for (k, v) in d.iter().enumerate() {
                lv.ltrb[(b * 4 + k) * plane + p] = v / s;
            }
        }
    }
    t.levels = levels;
    t
}

/// Loss terms; `total` carries the graph.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Tensor,
    pub box_: f64,
    pub obj: f64,
    pub cls: f64,
}

/// `box = Σ(1 − IoU)/P`, `obj = ΣBCE/cells`, `cls = ΣBCE/P` with `P` the
/// positive count (at least 1); total is their weighted sum.
pub fn compute_loss(preds: &[Tensor], targets: &Targets, weights: LossWeights) -> Result<LossParts> {
    if preds.len() != targets.levels.len() {
        return Err(Error::Validation(format!(
            "loss: {} prediction levels for {} target levels",
            preds.len(),
            targets.levels.len()
        )));
    }
    let k = targets.num_classes;
    let mut box_sum: Option<Tensor> = None;
    let mut obj_sum: Option<Tensor> = None;
    let mut cls_sum: Option<Tensor> = None;
    let mut cells = 0usize;
    let acc = |slot: &mut Option<Tensor>, t: Tensor| -> Result<()> {
        *slot = Some(match slot.take() {
            Some(s) => add(&s, &t)?,
            None => t,
        });
        Ok(())
    };
    for (li, (raw, lv)) in preds.iter().zip(&targets.levels).enumerate() {
        let node = format!("head.p{}", li + 3);
        if !raw.is_finite() {
            return Err(Error::Numeric(format!("{node}: non-finite prediction")));
        }
        let (n, c, h, w) = raw.dims4("loss")?;
        if c != 5 + k || h != lv.height || w != lv.width || n * h * w != lv.obj.len() {
            return Err(Error::Validation(format!(
                "{node}: prediction {:?} does not match targets {}×{}×{}×{}",
                raw.shape(),
                lv.obj.len() / (lv.height * lv.width).max(1),
                5 + k,
                lv.height,
                lv.width
            )));
        }
        let plane = h * w;
        let cls_mask: Vec<f64> = (0..n * k * plane)
            .map(|idx| {
                let (b, p) = (idx / (k * plane), idx % plane);
                lv.obj[b * plane + p]
            })
            .collect();
        acc(&mut box_sum, iou_loss(&narrow_channels(raw, 0, 4)?, &lv.ltrb, &lv.obj)?)?;
        let ones = vec![1.0; n * plane];
        acc(&mut obj_sum, bce_with_logits(&narrow_channels(raw, 4, 1)?, &lv.obj, &ones)?)?;
        acc(&mut cls_sum, bce_with_logits(&narrow_channels(raw, 5, k)?, &lv.cls, &cls_mask)?)?;
        cells += n * plane;
    }
    let (Some(box_sum), Some(obj_sum), Some(cls_sum)) = (box_sum, obj_sum, cls_sum) else {
        return Err(Error::Validation("loss: no prediction levels".into()));
    };
    let pos = targets.positives.max(1) as f64;
    let box_t = scale(&box_sum, 1.0 / pos);
    let obj_t = scale(&obj_sum, 1.0 / cells.max(1) as f64);
    let cls_t = scale(&cls_sum, 1.0 / pos);
    let total = add(
        &add(&scale(&box_t, weights.box_), &scale(&obj_t, weights.obj))?,
        &scale(&cls_t, weights.cls),
    )?;
    Ok(LossParts {
        box_: box_t.item(),
        obj: obj_t.item(),
        cls: cls_t.item(),
        total,
    })
}

/// Stop-after-`patience`-bad-epochs rule on a higher-is-better metric.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    best: Option<f64>,
    best_epoch: Option<usize>,
    bad_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            best_epoch: None,
            bad_epochs: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, metric: f64) -> Verdict {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            return Verdict::Improved;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_box: f64,
    pub loss_obj: f64,
    pub loss_cls: f64,
    pub val_recall: f64,
    pub val_map50: f64,
    pub val_map5095: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

pub const HISTORY_HEADER: &str = "epoch,loss_total,loss_box,loss_obj,loss_cls,val_recall,val_map50,val_map5095";

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{HISTORY_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.epoch, r.loss_total, r.loss_box, r.loss_obj, r.loss_cls, r.val_recall, r.val_map50, r.val_map5095
            );
        }
        s
    }
}

/// Post-NMS detections for every sample, in batches.
pub fn predict(model: &Model, samples: &[&Sample], conf: f64, batch_size: usize) -> Result<Vec<Vec<DetBox>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let x = batch_images(&images)?;
        let mut dets = model.detect(&x, conf)?;
        for d in &mut dets {
            d.truncate(MAX_DETECTIONS);
        }
        out.extend(dets);
    }
    Ok(out)
}

/// Detects at `eval_conf` and scores against the samples' ground truth.
pub fn evaluate_model(model: &Model, samples: &[&Sample], eval_conf: f64, pr_conf: f64) -> Result<EvalReport> {
    let dets = predict(model, samples, eval_conf, 8)?;
    let records: Vec<ImageRecord> = samples
        .iter()
        .zip(dets)
        .map(|(s, d)| ImageRecord {
            gts: s.gts.clone(),
            dets: d,
        })
        .collect();
    Ok(evaluate(&records, pr_conf))
}

/// SGD with linear warmup, per-epoch validation and best-weight restore.
/// `on_epoch` sees each record as it is produced.
pub fn train(
    model: &Model,
    train_set: &[&Sample],
    val_set: &[&Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    if let Some(s) = train_set.iter().find(|t| val_set.iter().any(|v| v.id == t.id)) {
        return Err(Error::Validation(format!("image {} is in both the train and val sets", s.id)));
    }
    let strides = model.head.spec.strides;
    let mut opt = Sgd::new(model.store.params(), cfg.lr, cfg.momentum, cfg.weight_decay);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut history = History::default();
    let mut best_weights = None;
    let mut step = 0usize;
    let ctx = Ctx::train();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            opt.lr = if step < warmup_steps {
                cfg.lr * (step + 1) as f64 / warmup_steps as f64
            } else {
                cfg.lr
            };
            let samples: Vec<&Sample> = chunk.iter().map(|&i| train_set[i]).collect();
            let x = batch_images(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())?;
            let preds = model.forward(&ctx, &x)?;
            let grids: Vec<(usize, usize)> = preds.iter().map(|p| (p.shape()[2], p.shape()[3])).collect();
            let gts: Vec<&[GtBox]> = samples.iter().map(|s| s.gts.as_slice()).collect();
            let targets = assign_targets(&gts, &grids, &strides, model.config.num_classes);
            let loss = compute_loss(&preds, &targets, cfg.loss_weights).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch} step {}: {m}", bi + 1)),
                e => e,
            })?;
            let v = loss.total.item();
            if !v.is_finite() || v > DIVERGENCE_LIMIT {
                return Err(Error::Numeric(format!("epoch {epoch} step {}: loss diverged to {v}", bi + 1)));
            }
            opt.zero_grad();
            loss.total.backward()?;
            opt.step()?;
            for (s, v) in sums.iter_mut().zip([v, loss.box_, loss.obj, loss.cls]) {
                *s += v;
            }
            step += 1;
        }
        let report = no_grad(|| evaluate_model(model, val_set, cfg.eval_conf, cfg.pr_conf))?;
        let n = steps_per_epoch as f64;
        let record = EpochRecord {
            epoch,
            loss_total: sums[0] / n,
            loss_box: sums[1] / n,
            loss_obj: sums[2] / n,
            loss_cls: sums[3] / n,
            val_recall: report.recall,
            val_map50: report.map50.unwrap_or(0.0),
            val_map5095: report.map50_95.unwrap_or(0.0),
        };
        on_epoch(&record);
        let verdict = stopper.update(epoch, record.val_map50);
        history.records.push(record);
        match verdict {
            Verdict::Improved => best_weights = Some(model.store.snapshot()),
            Verdict::Continue => {}
            Verdict::Stop => {
                history.stopped_early = true;
                break;
            }
        }
    }
    if let Some(w) = best_weights {
        model.store.restore(&w);
    }
    history.best_epoch = stopper.best_epoch();
    Ok(history)
}
