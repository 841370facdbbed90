//! Straightforward re-implementation of detection evaluation, written
//! without reference to `msdet::eval`, plus random instance generators.

use msdet::boxes::{BBox, DetBox, GtBox};
use msdet::eval::ImageRecord;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

#[derive(Debug)]
pub struct OracleClass {
    pub class_id: usize,
    pub ap: [f64; 10],
}

#[derive(Debug)]
pub struct OracleReport {
    pub classes: Vec<OracleClass>,
    pub precision: f64,
    pub recall: f64,
    pub map50: Option<f64>,
    pub map50_95: Option<f64>,
}

pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    let union = (a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Per detection (input order): `None` ignored, `Some(true)` TP, `Some(false)` FP.
pub fn oracle_match(gts: &[GtBox], dets: &[DetBox], t: f64) -> Vec<Option<bool>> {
    let mut order: Vec<(f64, usize)> = dets.iter().enumerate().map(|(i, d)| (d.score, i)).collect();
    // descending score, then input position
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && (order[j - 1].0 < order[j].0 || (order[j - 1].0 == order[j].0 && order[j - 1].1 > order[j].1)) {
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut used = vec![false; gts.len()];
    let mut result = vec![Some(false); dets.len()];
    for &(_, d) in &order {
        let ious: Vec<f64> = gts.iter().map(|g| oracle_iou(&g.bbox, &dets[d].bbox)).collect();
        let mut top = None;
        for g in 0..gts.len() {
            match top {
                Some(b) if ious[g] <= ious[b] => {}
                _ => top = Some(g),
            }
        }
        if let Some(b) = top {
            if gts[b].difficult && ious[b] >= t {
                result[d] = None;
                continue;
            }
        }
        let mut pick = None;
        for g in 0..gts.len() {
            if gts[g].difficult || used[g] || ious[g] < t {
                continue;
            }
            match pick {
                Some(b) if ious[g] <= ious[b] => {}
                _ => pick = Some(g),
            }
        }
        if let Some(g) = pick {
            used[g] = true;
            result[d] = Some(true);
        }
    }
    result
}

/// Step-sum AP: every true positive adds `1/n_gt` recall times the best
/// precision reached at that recall or beyond. `ranked` is already in rank
/// order.
pub fn oracle_ap(ranked: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    let mut tp = 0;
    for (k, &hit) in ranked.iter().enumerate() {
        if hit {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    let mut ap = 0.0;
    for k in 0..ranked.len() {
        if ranked[k] {
            let mut best = 0.0f64;
            for j in 0..ranked.len() {
                if recall[j] >= recall[k] {
                    best = best.max(precision[j]);
                }
            }
            ap += best / n_gt as f64;
        }
    }
    ap
}

pub fn oracle_report(images: &[ImageRecord], conf: f64) -> OracleReport {
    let mut ids = Vec::new();
    for im in images {
        for g in im.gts.iter().filter(|g| !g.difficult) {
            ids.push(g.class_id);
        }
        for d in &im.dets {
            ids.push(d.class_id);
        }
    }
    ids.sort();
    ids.dedup();
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    let mut classes = Vec::new();
    for &k in &ids {
        let gts: Vec<Vec<GtBox>> = images.iter().map(|im| im.gts.iter().filter(|g| g.class_id == k).copied().collect()).collect();
        let dets: Vec<Vec<DetBox>> = images.iter().map(|im| im.dets.iter().filter(|d| d.class_id == k).copied().collect()).collect();
        let n_gt: usize = gts.iter().flatten().filter(|g| !g.difficult).count();
        let mut ap = [0.0; 10];
        for (ti, &t) in THRESHOLDS.iter().enumerate() {
            // (score, image, index, hit)
            let mut all: Vec<(f64, usize, usize, bool)> = Vec::new();
            for i in 0..images.len() {
                for (j, m) in oracle_match(&gts[i], &dets[i], t).into_iter().enumerate() {
                    if let Some(hit) = m {
                        all.push((dets[i][j].score, i, j, hit));
                    }
                }
            }
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let ranked: Vec<bool> = all.iter().map(|x| x.3).collect();
            ap[ti] = oracle_ap(&ranked, n_gt);
        }
        for i in 0..images.len() {
            let confident: Vec<DetBox> = dets[i].iter().filter(|d| d.score >= conf).copied().collect();
            let m = oracle_match(&gts[i], &confident, 0.5);
            let hits = m.iter().filter(|x| **x == Some(true)).count();
            tp += hits;
            fp += m.iter().filter(|x| **x == Some(false)).count();
            fn_ += gts[i].iter().filter(|g| !g.difficult).count() - hits;
        }
        classes.push(OracleClass { class_id: k, ap });
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let (map50, map50_95) = if classes.is_empty() {
        (None, None)
    } else {
        let n = classes.len() as f64;
        let m50 = classes.iter().map(|c| c.ap[0]).sum::<f64>() / n;
        let m = classes.iter().map(|c| c.ap.iter().sum::<f64>() / 10.0).sum::<f64>() / n;
        (Some(m50), Some(m))
    };
    OracleReport {
        classes,
        precision,
        recall,
        map50,
        map50_95,
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    // a coarse grid makes exact IoU ties and threshold hits common
    let x = f64::from(rng.gen_range(0..12u32));
    let y = f64::from(rng.gen_range(0..12u32));
    let w = f64::from(rng.gen_range(1..8u32));
    let h = f64::from(rng.gen_range(1..8u32));
    BBox::new(x, y, x + w, y + h)
}

fn near(rng: &mut ChaCha8Rng, b: &BBox) -> BBox {
    let j = |rng: &mut ChaCha8Rng| f64::from(rng.gen_range(-1..=1i32)) * 0.5;
    let x0 = b.x_min + j(rng);
    let y0 = b.y_min + j(rng);
    BBox::new(x0, y0, (b.x_max + j(rng)).max(x0 + 0.5), (b.y_max + j(rng)).max(y0 + 0.5))
}

/// A dataset with at most `max_gt` ground truths and `max_det` detections
/// in total, over `images` images and up to three classes.
pub fn random_instance(rng: &mut ChaCha8Rng, images: usize, max_gt: usize, max_det: usize) -> Vec<ImageRecord> {
    let classes = rng.gen_range(1..=3);
    let n_gt = rng.gen_range(0..=max_gt);
    let n_det = rng.gen_range(0..=max_det);
    let mut out = vec![ImageRecord::default(); images];
    for _ in 0..n_gt {
        let i = rng.gen_range(0..images);
        out[i].gts.push(GtBox {
            class_id: rng.gen_range(0..classes),
            bbox: random_box(rng),
            difficult: rng.gen_bool(0.2),
        });
    }
    for _ in 0..n_det {
        let i = rng.gen_range(0..images);
        let bbox = match out[i].gts.len() {
            0 => random_box(rng),
            n if rng.gen_bool(0.7) => {
                let g = out[i].gts[rng.gen_range(0..n)].bbox;
                near(rng, &g)
            }
            _ => random_box(rng),
        };
        out[i].dets.push(DetBox {
            class_id: rng.gen_range(0..classes),
            // coarse scores so ties occur
            score: f64::from(rng.gen_range(1..=10u32)) / 10.0,
            bbox,
        });
    }
    out
}
