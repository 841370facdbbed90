//! Finite-difference suite over every differentiable op and composite block.

use msdet_tensor::gradcheck::{DEFAULT_STEP, DEFAULT_TOLERANCE};
use msdet_tensor::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::{BBox, GtBox};
use crate::error::Result;
use crate::gd_neck::{Gather, Inject, Laf};
use crate::lska::{Lska, LskaSpec};
use crate::nn::{Ctx, ParamKind, ParamStore};
use crate::seam_head::{Csmm, Head, HeadSpec, MultiSeam, SeamSpec};
use crate::train::{assign_targets, compute_loss, LossWeights};

/// Seeded instances per case.
pub const INSTANCES: u64 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradRow {
    pub name: &'static str,
    /// Worst over all instances and inputs.
    pub max_rel_error: f64,
    pub instances: u64,
    pub coordinates: usize,
}

impl GradRow {
    pub fn passes(&self) -> bool {
        self.max_rel_error <= DEFAULT_TOLERANCE
    }
}

type Case = fn(&mut ChaCha8Rng) -> Result<GradCheckReport>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::parameter(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Values at least 0.01 apart so max-pool winners survive the probes.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    v.shuffle(rng);
    Tensor::parameter(shape, v).expect("shape matches data")
}

/// Magnitudes in [0.05, 2) with random sign, clear of the ReLU kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::parameter(shape, v).expect("shape matches data")
}

fn probe(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn check(f: impl FnMut() -> Result<Tensor, TensorError>, inputs: &[Tensor]) -> Result<GradCheckReport> {
    Ok(check_gradients(f, inputs, DEFAULT_STEP)?)
}

/// Jitters every trainable tensor so biases and norm affines are generic.
fn jitter(store: &ParamStore, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    for e in store.entries() {
        if e.kind == ParamKind::Param {
            for v in e.tensor.data_mut().iter_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
    }
    store.params()
}

/// Pushes depthwise weights to magnitude at least `min`. A 1×1 depthwise
/// weight near zero ahead of a train-mode norm makes the output
/// `w/√(w²σ² + ε)`, too stiff in `w` for a 1e-3 central difference.
fn clear_of_zero(store: &ParamStore, min: f64) {
    for e in store.entries() {
        if e.name.ends_with(".dw.weight") {
            for v in e.tensor.data_mut().iter_mut() {
                *v = v.signum() * v.abs().max(min);
            }
        }
    }
}

/// Checks a block through a closure that maps core errors into tensor
/// errors, since the checker wants the latter.
fn check_block(
    mut f: impl FnMut() -> Result<Tensor>,
    inputs: &[Tensor],
) -> Result<GradCheckReport> {
    let mut failure = None;
    let report = check_gradients(
        || {
            f().map_err(|e| {
                let msg = e.to_string();
                failure.get_or_insert(e);
                TensorError::Numeric(msg)
            })
        },
        inputs,
        DEFAULT_STEP,
    );
    match (report, failure) {
        (Ok(r), _) => Ok(r),
        (Err(_), Some(e)) => Err(e),
        (Err(e), None) => Err(e.into()),
    }
}

fn with_inputs(x: &[Tensor], params: Vec<Tensor>) -> Vec<Tensor> {
    x.iter().cloned().chain(params).collect()
}

fn dense_conv(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let spec = ConvSpec::new(3, 4, 3, 3).with_stride(2).with_padding(Padding::uniform(1));
    let (x, w, b) = (random(rng, &[2, 3, 7, 6]), random(rng, &spec.weight_shape()), random(rng, &[4]));
    let p = probe(rng, 2 * 4 * 4 * 3);
    check(|| weighted_sum(&conv2d(&x, &w, Some(&b), &spec)?, &p), &[x.clone(), w.clone(), b.clone()])
}

fn grouped_dilated_conv(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let spec = ConvSpec::new(4, 6, 3, 2).with_bias(false).with_groups(2).with_dilation(2).same_padding();
    let (x, w) = (random(rng, &[1, 4, 8, 7]), random(rng, &spec.weight_shape()));
    let p = probe(rng, 6 * 8 * 7);
    check(|| weighted_sum(&conv2d(&x, &w, None, &spec)?, &p), &[x.clone(), w.clone()])
}

fn depthwise_conv(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let spec = ConvSpec::depthwise(3, 1, 4).with_dilation(3).same_padding();
    let (x, w, b) = (random(rng, &[2, 3, 5, 12]), random(rng, &spec.weight_shape()), random(rng, &[3]));
    let p = probe(rng, 2 * 3 * 5 * 12);
    check(|| weighted_sum(&conv2d(&x, &w, Some(&b), &spec)?, &p), &[x.clone(), w.clone(), b.clone()])
}

fn add_broadcast(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (x, y) = (random(rng, &[2, 3, 4, 4]), random(rng, &[2, 3, 1, 1]));
    let p = probe(rng, 96);
    check(|| weighted_sum(&add(&x, &y)?, &p), &[x.clone(), y.clone()])
}

fn hadamard(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (x, y) = (random(rng, &[2, 3, 4, 4]), random(rng, &[2, 3, 1, 1]));
    let z = random(rng, &[2, 3, 4, 4]);
    let p = probe(rng, 96);
    check(
        || add(&weighted_sum(&mul(&x, &y)?, &p)?, &weighted_sum(&mul(&x, &z)?, &p)?),
        &[x.clone(), y.clone(), z.clone()],
    )
}

fn concat(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (a, b) = (random(rng, &[2, 2, 3, 3]), random(rng, &[2, 3, 3, 3]));
    let p = probe(rng, 90);
    check(|| weighted_sum(&concat_channels(&[a.clone(), b.clone()])?, &p), &[a.clone(), b.clone()])
}

fn split_narrow(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let x = random(rng, &[2, 5, 3, 3]);
    let (p1, p2, p3) = (probe(rng, 18), probe(rng, 72), probe(rng, 36));
    check(
        || {
            let parts = split_channels(&x, &[1, 4])?;
            let n = narrow_channels(&x, 2, 2)?;
            add(
                &add(&weighted_sum(&parts[0], &p1)?, &weighted_sum(&parts[1], &p2)?)?,
                &weighted_sum(&n, &p3)?,
            )
        },
        std::slice::from_ref(&x),
    )
}

fn avg_pool_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let x = random(rng, &[2, 2, 6, 6]);
    let p = probe(rng, 36);
    check(|| weighted_sum(&avg_pool(&x, 2, 2)?, &p), std::slice::from_ref(&x))
}

fn max_pool_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let x = spaced(rng, &[2, 2, 6, 6]);
    let p = probe(rng, 16);
    check(|| weighted_sum(&max_pool(&x, 3, 2)?, &p), std::slice::from_ref(&x))
}

fn global_pool_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let x = random(rng, &[2, 3, 4, 5]);
    let p = probe(rng, 6);
    check(|| weighted_sum(&global_avg_pool(&x)?, &p), std::slice::from_ref(&x))
}

fn resize_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let x = random(rng, &[1, 2, 4, 6]);
    let (up, odd) = (probe(rng, 2 * 8 * 12), probe(rng, 2 * 3 * 5));
    check(
        || add(&weighted_sum(&resize_nearest(&x, 8, 12)?, &up)?, &weighted_sum(&resize_nearest(&x, 3, 5)?, &odd)?),
        std::slice::from_ref(&x),
    )
}

fn act_case(rng: &mut ChaCha8Rng, kind: Activation) -> Result<GradCheckReport> {
    let x = off_zero(rng, &[1, 2, 3, 3]);
    let p = probe(rng, 18);
    check(|| weighted_sum(&activation(&x, kind), &p), std::slice::from_ref(&x))
}

fn exp_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let x = random(rng, &[1, 2, 3, 3]);
    let p = probe(rng, 18);
    check(|| weighted_sum(&exp(&x), &p), std::slice::from_ref(&x))
}

fn bn_case(rng: &mut ChaCha8Rng, mode: NormMode) -> Result<GradCheckReport> {
    let x = random(rng, &[3, 2, 3, 3]);
    let mut state = BatchNormState::identity(2);
    state.weight = random(rng, &[2]);
    state.bias = random(rng, &[2]);
    state.running_var = Tensor::full(&[2], 1.7);
    let p = probe(rng, 54);
    let inputs = [x.clone(), state.weight.clone(), state.bias.clone()];
    check(|| weighted_sum(&batch_norm(&x, &state, mode)?, &p), &inputs)
}

fn reductions(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let x = random(rng, &[2, 3]);
    let p = probe(rng, 6);
    check(
        || {
            let sq = mul(&x, &x)?;
            add(&add(&sum(&sq), &mean(&sq))?, &weighted_sum(&scale(&x, -1.7), &p)?)
        },
        std::slice::from_ref(&x),
    )
}

fn bce_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let logits = random(rng, &[12]);
    let targets: Vec<f64> = (0..12).map(|_| f64::from(rng.gen_range(0..2))).collect();
    let weights: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..2.0)).collect();
    check(|| bce_with_logits(&logits, &targets, &weights), std::slice::from_ref(&logits))
}

fn iou_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let raw = random(rng, &[1, 4, 2, 3]);
    // Targets stay 0.01 from the predicted distances so no probe crosses a
    // min() inside the IoU.
    let pred: Vec<f64> = raw.data().iter().map(|&v| v.exp().ln_1p()).collect();
    let target: Vec<f64> = pred
        .iter()
        .map(|&d| loop {
            let t = rng.gen_range(0.3..2.5);
            if (t - d).abs() > 0.01 {
                break t;
            }
        })
        .collect();
    let w: Vec<f64> = (0..6).map(|i| if i % 3 == 1 { 0.0 } else { 1.0 }).collect();
    check(|| iou_loss(&raw, &target, &w), std::slice::from_ref(&raw))
}

fn lska_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut store = ParamStore::new(rng.gen());
    let block = Lska::new(&mut store, "lska", LskaSpec::new(3, 7, 2)?)?;
    let x = random(rng, &[1, 3, 6, 7]);
    let p = probe(rng, 3 * 6 * 7);
    let inputs = with_inputs(std::slice::from_ref(&x), jitter(&store, rng));
    let ctx = Ctx::train();
    check_block(|| Ok(weighted_sum(&block.forward(&ctx, &x)?, &p)?), &inputs)
}

fn gather_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut store = ParamStore::new(rng.gen());
    let g = Gather::new(&mut store, "gd.low", &[2, 3, 2], 1, 3)?;
    let levels = [random(rng, &[2, 2, 8, 8]), random(rng, &[2, 3, 4, 4]), random(rng, &[2, 2, 2, 2])];
    let p = probe(rng, 2 * 3 * 4 * 4);
    let inputs = with_inputs(&levels, jitter(&store, rng));
    let ctx = Ctx::train();
    check_block(|| Ok(weighted_sum(&g.forward(&ctx, &levels)?, &p)?), &inputs)
}

fn inject_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut store = ParamStore::new(rng.gen());
    let inj = Inject::new(&mut store, "gd.inject.p4.low", 3, 2, 3)?;
    let local = random(rng, &[2, 3, 4, 4]);
    let global = random(rng, &[2, 2, 2, 2]);
    let p = probe(rng, 2 * 3 * 4 * 4);
    let inputs = with_inputs(&[local.clone(), global.clone()], jitter(&store, rng));
    let ctx = Ctx::train();
    check_block(|| Ok(weighted_sum(&inj.forward(&ctx, &local, &global)?, &p)?), &inputs)
}

fn laf_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut store = ParamStore::new(rng.gen());
    let laf = Laf::new(&mut store, "gd.laf.p4.low", Some(2), 3, Some(4))?;
    let (s, c, d) = (random(rng, &[1, 2, 8, 8]), random(rng, &[1, 3, 4, 4]), random(rng, &[1, 4, 2, 2]));
    let p = probe(rng, 3 * 4 * 4);
    let inputs = with_inputs(&[s.clone(), c.clone(), d.clone()], jitter(&store, rng));
    let ctx = Ctx::train();
    check_block(|| Ok(weighted_sum(&laf.forward(&ctx, Some(&s), &c, Some(&d))?, &p)?), &inputs)
}

fn csmm_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut store = ParamStore::new(rng.gen());
    let block = Csmm::new(&mut store, "head.p3.seam.csmm2", 3, 2, Activation::Gelu)?;
    let x = random(rng, &[2, 3, 4, 6]);
    let p = probe(rng, 2 * 3 * 4 * 6);
    let inputs = with_inputs(std::slice::from_ref(&x), jitter(&store, rng));
    clear_of_zero(&store, 0.3);
    let ctx = Ctx::train();
    check_block(|| Ok(weighted_sum(&block.forward(&ctx, &x)?, &p)?), &inputs)
}

fn multiseam_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut store = ParamStore::new(rng.gen());
    let spec = SeamSpec {
        patch_sizes: vec![1, 2],
        hidden_ratio: 0.5,
        ..SeamSpec::new(4)
    };
    let block = MultiSeam::new(&mut store, "head.p3.seam", spec)?;
    let x = random(rng, &[2, 4, 4, 4]);
    let p = probe(rng, 2 * 4 * 4 * 4);
    let inputs = with_inputs(std::slice::from_ref(&x), jitter(&store, rng));
    clear_of_zero(&store, 0.3);
    let ctx = Ctx::train();
    check_block(|| Ok(weighted_sum(&block.forward(&ctx, &x)?, &p)?), &inputs)
}

/// The detection loss through a small head, w.r.t. the pyramid and every
/// head parameter.
fn loss_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut store = ParamStore::new(rng.gen());
    // A 1×1 deepest level would leave its norm layers two samples per
    // channel, a near-singular regime for finite differences.
    let sizes = [(4, 4), (2, 2), (2, 2)];
    let head = Head::new(&mut store, 3, HeadSpec::new(2), None, sizes)?;
    let pyramid: Vec<Tensor> = sizes.iter().map(|&(h, w)| random(rng, &[2, 3, h, w])).collect();
    let mut image_gts = Vec::new();
    for _ in 0..2 {
        let mut v = Vec::new();
        for (lo, hi) in [(6.0, 20.0), (26.0, 32.0)] {
            let side: f64 = rng.gen_range(lo..hi);
            let x0: f64 = rng.gen_range(0.0..32.0 - side);
            let y0: f64 = rng.gen_range(0.0..32.0 - side);
            v.push(GtBox {
                class_id: rng.gen_range(0..2),
                bbox: BBox::new(x0, y0, x0 + side, y0 + side),
                difficult: false,
            });
        }
        image_gts.push(v);
    }
    let gts: Vec<&[GtBox]> = image_gts.iter().map(Vec::as_slice).collect();
    let targets = assign_targets(&gts, &sizes, &[8, 16, 32], 2);
    let inputs = with_inputs(&pyramid, jitter(&store, rng));
    // Predicted distances well above the targets keep every min() in the
    // IoU on one branch, away from its kinks.
    for e in store.entries() {
        if e.name.ends_with("reg.box.bias") {
            e.tensor.data_mut().iter_mut().for_each(|v| *v += 3.0);
        }
    }
    let ctx = Ctx::train();
    check_block(
        || Ok(compute_loss(&head.forward(&ctx, &pyramid)?, &targets, LossWeights::default())?.total),
        &inputs,
    )
}

pub const CASES: &[(&str, Case)] = &[
    ("conv2d", dense_conv),
    ("conv2d.grouped_dilated", grouped_dilated_conv),
    ("conv2d.depthwise", depthwise_conv),
    ("add", add_broadcast),
    ("hadamard", hadamard),
    ("concat_channels", concat),
    ("split_narrow", split_narrow),
    ("avg_pool", avg_pool_case),
    ("max_pool", max_pool_case),
    ("global_avg_pool", global_pool_case),
    ("resize_nearest", resize_case),
    ("sigmoid", |r| act_case(r, Activation::Sigmoid)),
    ("silu", |r| act_case(r, Activation::Silu)),
    ("relu", |r| act_case(r, Activation::Relu)),
    ("gelu", |r| act_case(r, Activation::Gelu)),
    ("exp", exp_case),
    ("batch_norm.train", |r| bn_case(r, NormMode::Train)),
    ("batch_norm.infer", |r| bn_case(r, NormMode::Infer)),
    ("scale_sum_mean", reductions),
    ("bce_with_logits", bce_case),
    ("iou_loss", iou_case),
    ("lska", lska_case),
    ("gather", gather_case),
    ("inject", inject_case),
    ("laf", laf_case),
    ("csmm", csmm_case),
    ("multiseam", multiseam_case),
    ("loss", loss_case),
];

/// Runs every case on `instances` seeds (`seed`, `seed + 1`, …).
pub fn gradient_suite(seed: u64, instances: u64) -> Result<Vec<GradRow>> {
    CASES
        .iter()
        .map(|(name, case)| {
            let mut row = GradRow {
                name,
                max_rel_error: 0.0,
                instances,
                coordinates: 0,
            };
            for i in 0..instances {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i));
                let r = case(&mut rng)?;
                row.max_rel_error = row.max_rel_error.max(r.max_rel_error);
                row.coordinates += r.coordinates;
            }
            Ok(row)
        })
        .collect()
}
