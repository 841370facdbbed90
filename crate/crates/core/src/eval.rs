//! IoU matching, precision, recall, all-point AP and mAP over IoU 0.50–0.95.

use std::fmt::Write as _;

use crate::boxes::{DetBox, GtBox};

/// 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Recall and precision use matches at this IoU.
pub const PR_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    /// Overlaps a difficult ground truth; neither rewarded nor penalized.
    Ignored,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchTable {
    /// One entry per detection, in input order.
    pub outcomes: Vec<Outcome>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Matches one image's detections of one class against its ground truth.
///
/// Detections are visited by descending score (ties keep input order). A
/// detection whose best-overlapping box (any box, ties to the lower index)
/// is difficult with IoU ≥ `t` is ignored. Otherwise it takes the unmatched
/// non-difficult box with the highest IoU ≥ `t` (ties to the lower index),
/// or is a false positive.
pub fn match_detections(gts: &[GtBox], dets: &[DetBox], t: f64) -> MatchTable {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    let mut outcomes = vec![Outcome::FalsePositive; dets.len()];
    for &d in &order {
        let mut overall: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let v = gt.bbox.iou(&dets[d].bbox);
            if overall.is_none_or(|(_, b)| v > b) {
                overall = Some((g, v));
            }
        }
        if let Some((g, v)) = overall {
            if gts[g].difficult && v >= t {
                outcomes[d] = Outcome::Ignored;
                continue;
            }
        }
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt.difficult || taken[g] {
                continue;
            }
            let v = gt.bbox.iou(&dets[d].bbox);
            if v >= t && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        outcomes[d] = match best {
            Some((g, _)) => {
                taken[g] = true;
                Outcome::TruePositive
            }
            None => Outcome::FalsePositive,
        };
    }
    let count = |o| outcomes.iter().filter(|&&x| x == o).count();
    let true_positives = count(Outcome::TruePositive);
    MatchTable {
        true_positives,
        false_positives: count(Outcome::FalsePositive),
        false_negatives: gts.iter().filter(|g| !g.difficult).count() - true_positives,
        outcomes,
    }
}

/// `P = TP/(TP+FP)` and `R = TP/(TP+FN)`, each 0 when its denominator is.
pub fn precision_recall(tp: usize, fp: usize, fn_: usize) -> (f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (ratio(tp, tp + fp), ratio(tp, tp + fn_))
}

/// All-point interpolated AP: `Σ (rᵢ − rᵢ₋₁) · max_{j≥i} pⱼ` over the
/// detections sorted by descending score (stable). `scored` holds
/// `(score, is_true_positive)`; ignored detections must be left out.
pub fn average_precision(scored: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 || scored.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(order.len());
    for (k, &i) in order.iter().enumerate() {
        tp += usize::from(scored[i].1);
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut envelope = 0.0f64;
    let mut ap = 0.0;
    let mut envelopes = vec![0.0; points.len()];
    for i in (0..points.len()).rev() {
        envelope = envelope.max(points[i].1);
        envelopes[i] = envelope;
    }
    let mut prev_r = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        ap += (r - prev_r) * envelopes[i];
        prev_r = r;
    }
    ap
}

/// Ground truth and detections of one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageRecord {
    pub gts: Vec<GtBox>,
    pub dets: Vec<DetBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub class_id: usize,
    /// Non-difficult ground-truth boxes.
    pub n_gt: usize,
    /// AP at each of the ten IoU thresholds.
    pub ap: [f64; 10],
    /// Counts at IoU 0.50 over detections at or above the confidence cutoff.
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ClassReport {
    pub fn ap50(&self) -> f64 {
        self.ap[0]
    }

    pub fn ap50_95(&self) -> f64 {
        self.ap.iter().sum::<f64>() / self.ap.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub conf_threshold: f64,
    pub classes: Vec<ClassReport>,
    pub precision: f64,
    pub recall: f64,
    /// `None` when no class has ground truth or detections.
    pub map50: Option<f64>,
    pub map50_95: Option<f64>,
}

impl EvalReport {
    pub fn counts(&self) -> (usize, usize, usize) {
        self.classes
            .iter()
            .fold((0, 0, 0), |(a, b, c), k| (a + k.tp, b + k.fp, c + k.fn_))
    }

    /// `key=value` lines; mAPs of an empty report read `no-classes`.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let metric = |v: Option<f64>| v.map_or_else(|| "no-classes".to_string(), |v| format!("{v:.6}"));
        let (tp, fp, fn_) = self.counts();
        let _ = writeln!(s, "interpolation=all-point");
        let _ = writeln!(s, "iou_thresholds=0.50:0.05:0.95");
        let _ = writeln!(s, "pr_iou={PR_IOU:.2}");
        let _ = writeln!(s, "conf_threshold={:.4}", self.conf_threshold);
        let _ = writeln!(s, "classes={}", self.classes.len());
        let _ = writeln!(s, "tp={tp}\nfp={fp}\nfn={fn_}");
        let _ = writeln!(s, "precision={:.6}", self.precision);
        let _ = writeln!(s, "recall={:.6}", self.recall);
        let _ = writeln!(s, "map50={}", metric(self.map50));
        let _ = writeln!(s, "map50_95={}", metric(self.map50_95));
        for c in &self.classes {
            let k = c.class_id;
            let _ = writeln!(s, "class.{k}.n_gt={}", c.n_gt);
            let _ = writeln!(s, "class.{k}.tp={}\nclass.{k}.fp={}\nclass.{k}.fn={}", c.tp, c.fp, c.fn_);
            let _ = writeln!(s, "class.{k}.ap50={:.6}", c.ap50());
            let _ = writeln!(s, "class.{k}.ap50_95={:.6}", c.ap50_95());
        }
        s
    }

    /// Human-readable table; `names` maps class ids to labels.
    pub fn to_table(&self, names: &[String]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>6} {:>5} {:>5} {:>5} {:>8} {:>10}", "class", "gt", "tp", "fp", "fn", "AP50", "AP50-95");
        for c in &self.classes {
            let name = names.get(c.class_id).cloned().unwrap_or_else(|| c.class_id.to_string());
            let _ = writeln!(
                s,
                "{:<16} {:>6} {:>5} {:>5} {:>5} {:>8.4} {:>10.4}",
                name,
                c.n_gt,
                c.tp,
                c.fp,
                c.fn_,
                c.ap50(),
                c.ap50_95()
            );
        }
        match (self.map50, self.map50_95) {
            (Some(a), Some(b)) => {
                let _ = writeln!(
                    s,
                    "P {:.4}  R {:.4}  mAP50 {a:.4}  mAP50-95 {b:.4}  (all-point AP, P/R at IoU {PR_IOU:.2}, conf >= {:.2})",
                    self.precision, self.recall, self.conf_threshold
                );
            }
            _ => {
                let _ = writeln!(s, "no classes: mAP undefined");
            }
        }
        s
    }
}

/// Per-class AP at the ten thresholds, mAP50, mAP50-95, and dataset
/// precision/recall at IoU 0.50 over detections scoring at least
/// `conf_threshold`.
///
/// A class is reported when it has ground truth or detections; a class with
/// detections but no ground truth has AP 0.
pub fn evaluate(images: &[ImageRecord], conf_threshold: f64) -> EvalReport {
    let mut class_ids: Vec<usize> = images
        .iter()
        .flat_map(|im| {
            im.gts
                .iter()
                .filter(|g| !g.difficult)
                .map(|g| g.class_id)
                .chain(im.dets.iter().map(|d| d.class_id))
        })
        .collect();
    class_ids.sort_unstable();
    class_ids.dedup();

    let thresholds = iou_thresholds();
    let mut classes = Vec::with_capacity(class_ids.len());
    for &k in &class_ids {
        let slices: Vec<(Vec<GtBox>, Vec<DetBox>)> = images
            .iter()
            .map(|im| {
                (
                    im.gts.iter().filter(|g| g.class_id == k).copied().collect(),
                    im.dets.iter().filter(|d| d.class_id == k).copied().collect(),
                )
            })
            .collect();
        let n_gt: usize = slices.iter().map(|(g, _)| g.iter().filter(|g| !g.difficult).count()).sum();
        let mut ap = [0.0; 10];
        for (ti, &t) in thresholds.iter().enumerate() {
            let mut scored = Vec::new();
            for (g, d) in &slices {
                let m = match_detections(g, d, t);
                for (det, o) in d.iter().zip(&m.outcomes) {
                    if *o != Outcome::Ignored {
                        scored.push((det.score, *o == Outcome::TruePositive));
                    }
                }
            }
            ap[ti] = average_precision(&scored, n_gt);
        }
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (g, d) in &slices {
            let confident: Vec<DetBox> = d.iter().filter(|d| d.score >= conf_threshold).copied().collect();
            let m = match_detections(g, &confident, PR_IOU);
            tp += m.true_positives;
            fp += m.false_positives;
            fn_ += m.false_negatives;
        }
        classes.push(ClassReport {
            class_id: k,
            n_gt,
            ap,
            tp,
            fp,
            fn_,
        });
    }

    let (tp, fp, fn_) = classes
        .iter()
        .fold((0, 0, 0), |(a, b, c), k| (a + k.tp, b + k.fp, c + k.fn_));
    let (precision, recall) = precision_recall(tp, fp, fn_);
    let n = classes.len() as f64;
    let (map50, map50_95) = if classes.is_empty() {
        (None, None)
    } else {
        (
            Some(classes.iter().map(|c| c.ap50()).sum::<f64>() / n),
            Some(classes.iter().map(|c| c.ap50_95()).sum::<f64>() / n),
        )
    };
    EvalReport {
        conf_threshold,
        classes,
        precision,
        recall,
        map50,
        map50_95,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;

    fn gt(b: [f64; 4]) -> GtBox {
        GtBox {
            class_id: 0,
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
            difficult: false,
        }
    }

    fn det(score: f64, b: [f64; 4]) -> DetBox {
        DetBox {
            class_id: 0,
            score,
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
        }
    }

    #[test]
    fn thresholds_are_ten_steps_of_five_hundredths() {
        let t = iou_thresholds();
        assert_eq!(t[0], 0.5);
        assert_eq!(t[9], 0.95);
        assert_eq!(t.len(), 10);
    }

    #[test]
    fn single_match_rule() {
        let g = [gt([0.0, 0.0, 10.0, 10.0])];
        let m = match_detections(&g, &[det(0.9, [0.0, 0.0, 10.0, 6.0])], 0.5);
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (1, 0, 0));
        let m = match_detections(&g, &[det(0.7, [0.0, 0.0, 10.0, 9.0]), det(0.9, [0.0, 0.0, 10.0, 8.0])], 0.5);
        assert_eq!(m.outcomes, vec![Outcome::FalsePositive, Outcome::TruePositive]);
    }

    #[test]
    fn difficult_overlap_is_ignored() {
        let mut g = gt([0.0, 0.0, 10.0, 10.0]);
        g.difficult = true;
        let m = match_detections(&[g], &[det(0.9, [0.0, 0.0, 10.0, 10.0])], 0.5);
        assert_eq!(m.outcomes, vec![Outcome::Ignored]);
        assert_eq!(m.false_negatives, 0);
    }

    #[test]
    fn precision_recall_conventions() {
        assert_eq!(precision_recall(8, 2, 0).0, 0.8);
        assert_eq!(precision_recall(8, 0, 2).1, 0.8);
        assert_eq!(precision_recall(0, 0, 3), (0.0, 0.0));
    }

    #[test]
    fn ap_hand_case() {
        // (TP, FP, TP) with two ground truths
        let ap = average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2);
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[(0.5, true)], 1), 1.0);
        assert_eq!(average_precision(&[], 3), 0.0);
    }

    #[test]
    fn empty_dataset_has_no_classes_marker() {
        let r = evaluate(&[], 0.25);
        assert!(r.map50.is_none());
        assert!(r.to_kv().contains("map50=no-classes"));
    }
}
