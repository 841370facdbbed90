mod support;

use msdet::boxes::{iou, BBox, DetBox, GtBox};
use msdet::eval::{average_precision, evaluate, match_detections, precision_recall, ImageRecord, Outcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::eval_oracle::{oracle_report, random_instance, OracleReport};

const TOL: f64 = 1e-9;

fn gt(class_id: usize, b: [f64; 4]) -> GtBox {
    GtBox {
        class_id,
        bbox: BBox::new(b[0], b[1], b[2], b[3]),
        difficult: false,
    }
}

fn det(class_id: usize, score: f64, b: [f64; 4]) -> DetBox {
    DetBox {
        class_id,
        score,
        bbox: BBox::new(b[0], b[1], b[2], b[3]),
    }
}

fn agrees(images: &[ImageRecord], conf: f64) -> Result<(), String> {
    let r = evaluate(images, conf);
    let o: OracleReport = oracle_report(images, conf);
    let close = |a: f64, b: f64| (a - b).abs() <= TOL;
    if r.classes.len() != o.classes.len() {
        return Err(format!("class count {} vs {}", r.classes.len(), o.classes.len()));
    }
    for (c, oc) in r.classes.iter().zip(&o.classes) {
        if c.class_id != oc.class_id {
            return Err(format!("class ids {} vs {}", c.class_id, oc.class_id));
        }
        for t in 0..10 {
            if !close(c.ap[t], oc.ap[t]) {
                return Err(format!("class {} threshold {t}: {} vs {}", c.class_id, c.ap[t], oc.ap[t]));
            }
        }
    }
    let opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => close(a, b),
        (None, None) => true,
        _ => false,
    };
    if !opt(r.map50, o.map50) || !opt(r.map50_95, o.map50_95) {
        return Err(format!("mAP {:?}/{:?} vs {:?}/{:?}", r.map50, r.map50_95, o.map50, o.map50_95));
    }
    if !close(r.precision, o.precision) || !close(r.recall, o.recall) {
        return Err(format!("P/R {}/{} vs {}/{}", r.precision, r.recall, o.precision, o.recall));
    }
    Ok(())
}

#[test]
fn iou_examples() {
    let a = BBox::new(0.0, 0.0, 2.0, 2.0);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
    assert!((iou(&a, &BBox::new(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
}

#[test]
fn matching_examples() {
    let g = [gt(0, [0.0, 0.0, 10.0, 10.0])];
    // IoU 0.6
    let d = det(0, 0.9, [0.0, 0.0, 10.0, 6.0]);
    assert!((g[0].bbox.iou(&d.bbox) - 0.6).abs() < 1e-12);
    let m = match_detections(&g, &[d], 0.5);
    assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (1, 0, 0));

    let lo = det(0, 0.7, [0.0, 0.0, 10.0, 9.0]);
    let m = match_detections(&g, &[lo, d], 0.5);
    assert_eq!(m.outcomes, vec![Outcome::FalsePositive, Outcome::TruePositive]);
    assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (1, 1, 0));
}

#[test]
fn difficult_overlap_is_ignored() {
    let mut hard = gt(0, [0.0, 0.0, 10.0, 10.0]);
    hard.difficult = true;
    let g = [hard, gt(0, [20.0, 20.0, 30.0, 30.0])];
    let m = match_detections(&g, &[det(0, 0.9, [0.0, 0.0, 10.0, 9.0]), det(0, 0.8, [40.0, 40.0, 45.0, 45.0])], 0.5);
    assert_eq!(m.outcomes, vec![Outcome::Ignored, Outcome::FalsePositive]);
    assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (0, 1, 1));
}

#[test]
fn precision_recall_examples() {
    assert_eq!(precision_recall(8, 2, 0).0, 0.8);
    assert_eq!(precision_recall(8, 0, 2).1, 0.8);
    assert_eq!(precision_recall(0, 0, 3), (0.0, 0.0));
    assert_eq!(precision_recall(0, 4, 0), (0.0, 0.0));
}

#[test]
fn ap_examples() {
    assert_eq!(average_precision(&[(0.9, true)], 1), 1.0);
    assert_eq!(average_precision(&[], 3), 0.0);
    let ap = average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2);
    assert!((ap - 5.0 / 6.0).abs() <= 1e-15, "{ap}");
    assert_eq!(support::eval_oracle::oracle_ap(&[true, false, true], 2), ap);
}

#[test]
fn oracle_equivalence_on_300_small_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..300 {
        let images = rng.gen_range(1..=3);
        let inst = random_instance(&mut rng, images, 10, 20);
        assert!(inst.iter().map(|i| i.gts.len()).sum::<usize>() <= 10);
        if let Err(e) = agrees(&inst, 0.25) {
            panic!("case {case}: {e}\n{inst:?}");
        }
    }
}

#[test]
fn fifty_images_end_to_end() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let inst = random_instance(&mut rng, 50, 200, 400);
    agrees(&inst, 0.25).unwrap();
    agrees(&inst, 0.0).unwrap();
}

#[test]
fn metrics_stay_in_unit_range_and_map_is_the_class_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let inst = random_instance(&mut rng, 2, 10, 20);
        let r = evaluate(&inst, 0.25);
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        assert!(unit(r.precision) && unit(r.recall));
        for c in &r.classes {
            assert!(c.ap.iter().all(|&v| unit(v)));
        }
        if let (Some(m50), Some(m)) = (r.map50, r.map50_95) {
            let n = r.classes.len() as f64;
            assert_eq!(m50, r.classes.iter().map(|c| c.ap50()).sum::<f64>() / n);
            assert_eq!(m, r.classes.iter().map(|c| c.ap50_95()).sum::<f64>() / n);
            assert!(unit(m50) && unit(m));
        }
    }
}

#[test]
fn ap_depends_only_on_score_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let inst = random_instance(&mut rng, 3, 10, 20);
        let moved: Vec<ImageRecord> = inst
            .iter()
            .map(|im| ImageRecord {
                gts: im.gts.clone(),
                dets: im.dets.iter().map(|d| DetBox { score: (3.0_f64 * d.score).exp() / 50.0, ..*d }).collect(),
            })
            .collect();
        let (a, b) = (evaluate(&inst, 0.0), evaluate(&moved, 0.0));
        for (x, y) in a.classes.iter().zip(&b.classes) {
            assert_eq!(x.ap, y.ap);
        }
    }
}

#[test]
fn duplicating_a_false_positive_never_raises_ap() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = 0;
    for _ in 0..300 {
        let inst = random_instance(&mut rng, 2, 10, 20);
        let base = evaluate(&inst, 0.0);
        for (i, im) in inst.iter().enumerate() {
            for (j, d) in im.dets.iter().enumerate() {
                let own: Vec<GtBox> = im.gts.iter().filter(|g| g.class_id == d.class_id).copied().collect();
                let dets: Vec<DetBox> = im.dets.iter().filter(|x| x.class_id == d.class_id).copied().collect();
                let pos = im.dets[..j].iter().filter(|x| x.class_id == d.class_id).count();
                for (t_idx, t) in msdet::eval::iou_thresholds().iter().enumerate() {
                    if match_detections(&own, &dets, *t).outcomes[pos] != Outcome::FalsePositive {
                        continue;
                    }
                    let mut dup = inst.clone();
                    dup[i].dets.push(*d);
                    let after = evaluate(&dup, 0.0);
                    let ap = |r: &msdet::eval::EvalReport| r.classes.iter().find(|c| c.class_id == d.class_id).unwrap().ap[t_idx];
                    assert!(ap(&after) <= ap(&base) + 1e-15);
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 100);
}

#[test]
fn perfect_detector_scores_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..20 {
        let inst: Vec<ImageRecord> = random_instance(&mut rng, 4, 10, 0)
            .into_iter()
            .map(|im| {
                let gts: Vec<GtBox> = im.gts.into_iter().map(|g| GtBox { difficult: false, ..g }).collect();
                let dets = gts.iter().map(|g| DetBox { class_id: g.class_id, score: 0.9, bbox: g.bbox }).collect();
                ImageRecord { gts, dets }
            })
            .collect();
        let r = evaluate(&inst, 0.25);
        if r.classes.is_empty() {
            continue;
        }
        assert_eq!(r.map50, Some(1.0));
        assert_eq!(r.map50_95, Some(1.0));
        assert_eq!(r.recall, 1.0);
    }
}

#[test]
fn empty_dataset_has_no_classes() {
    let r = evaluate(&[], 0.25);
    assert!(r.classes.is_empty());
    assert_eq!((r.map50, r.map50_95), (None, None));
    let kv = r.to_kv();
    assert!(kv.contains("map50=no-classes"));
    assert!(kv.contains("interpolation=all-point"));
    let r = evaluate(&vec![ImageRecord::default(); 3], 0.25);
    assert_eq!(r.map50, None);
}

#[test]
fn unlabelled_class_with_detections_scores_zero() {
    let images = [ImageRecord {
        gts: vec![gt(0, [0.0, 0.0, 4.0, 4.0])],
        dets: vec![det(0, 0.9, [0.0, 0.0, 4.0, 4.0]), det(1, 0.8, [10.0, 10.0, 12.0, 12.0])],
    }];
    let r = evaluate(&images, 0.25);
    assert_eq!(r.classes.len(), 2);
    assert_eq!(r.classes[1].ap, [0.0; 10]);
    assert_eq!(r.map50, Some(0.5));
    assert_eq!(r.precision, 0.5);
}
