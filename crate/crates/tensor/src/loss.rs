//! Fused detection-loss primitives with closed-form gradients.

use crate::error::{Result, TensorError};
use crate::ops::{sigmoid_scalar, softplus_scalar};
use crate::tensor::{tracking, Backward, BackwardCtx, Tensor};

/// `Σ wᵢ · BCE(σ(xᵢ), tᵢ)` computed from logits in the stable form
/// `max(x,0) − x·t + ln(1 + e^{−|x|})`.
pub fn bce_with_logits(logits: &Tensor, targets: &[f64], weights: &[f64]) -> Result<Tensor> {
    let n = logits.numel();
    if targets.len() != n {
        return Err(TensorError::dim("bce_with_logits", "targets", n, targets.len()));
    }
    if weights.len() != n {
        return Err(TensorError::dim("bce_with_logits", "weights", n, weights.len()));
    }
    let value = logits
        .data()
        .iter()
        .zip(targets)
        .zip(weights)
        .filter(|(_, &w)| w != 0.0)
        .map(|((&x, &t), &w)| w * (x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()))
        .sum();
    let op: Option<Box<dyn Backward>> = tracking(&[logits]).then(|| {
        Box::new(BceBackward {
            targets: targets.to_vec(),
            weights: weights.to_vec(),
        }) as _
    });
    Ok(Tensor::from_op(Vec::new(), vec![value], &[logits], op))
}

struct BceBackward {
    targets: Vec<f64>,
    weights: Vec<f64>,
}

impl Backward for BceBackward {
    fn name(&self) -> &'static str {
        "bce_with_logits"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let g = ctx.grad[0];
        let x = ctx.parents[0].data();
        let dx = x
            .iter()
            .zip(&self.targets)
            .zip(&self.weights)
            .map(|((&x, &t), &w)| if w == 0.0 { 0.0 } else { g * w * (sigmoid_scalar(x) - t) })
            .collect();
        vec![Some(dx)]
    }
}

const UNION_EPS: f64 = 1e-9;

/// IoU of two boxes given as (left, top, right, bottom) distances from a
/// shared anchor point, with partial derivatives w.r.t. the first box.
pub fn ltrb_iou_with_grad(pred: [f64; 4], target: [f64; 4]) -> (f64, [f64; 4]) {
    let [l, t, r, b] = pred;
    let [tl, tt, tr, tb] = target;
    let iw_raw = r.min(tr) + l.min(tl);
    let ih_raw = b.min(tb) + t.min(tt);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let (pw, ph) = (l + r, t + b);
    let union = pw * ph + (tl + tr) * (tt + tb) - inter + UNION_EPS;
    let iou = inter / union;

    let w_on = if iw_raw > 0.0 { 1.0 } else { 0.0 };
    let h_on = if ih_raw > 0.0 { 1.0 } else { 0.0 };
    // dI/d{l,t,r,b}
    let d_inter = [
        w_on * if l < tl { 1.0 } else { 0.0 } * ih,
        h_on * if t < tt { 1.0 } else { 0.0 } * iw,
        w_on * if r < tr { 1.0 } else { 0.0 } * ih,
        h_on * if b < tb { 1.0 } else { 0.0 } * iw,
    ];
    let d_area = [ph, pw, ph, pw];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        grad[k] = (d_inter[k] * union - inter * d_union) / (union * union);
    }
    (iou, grad)
}

/// `Σ wₚ · (1 − IoU(softplus(raw)ₚ, targetₚ))` over cells `p`.
///
/// `raw` is N×4×H×W (left, top, right, bottom); `target` has the same
/// layout; `weights` is N×H×W. Cells with zero weight are skipped.
pub fn iou_loss(raw: &Tensor, target: &[f64], weights: &[f64]) -> Result<Tensor> {
    let (n, c, h, w) = raw.dims4("iou_loss")?;
    if c != 4 {
        return Err(TensorError::dim("iou_loss", "channels", 4, c));
    }
    if target.len() != raw.numel() {
        return Err(TensorError::dim("iou_loss", "targets", raw.numel(), target.len()));
    }
    if weights.len() != n * h * w {
        return Err(TensorError::dim("iou_loss", "weights", n * h * w, weights.len()));
    }
    let plane = h * w;
    let rd = raw.data();
    let mut value = 0.0;
    let mut grads = Vec::new();
    let track = tracking(&[raw]);
    for b in 0..n {
        for p in 0..plane {
            let wgt = weights[b * plane + p];
            if wgt == 0.0 {
                continue;
            }
            let idx = |k: usize| (b * 4 + k) * plane + p;
            let pred = [0, 1, 2, 3].map(|k| softplus_scalar(rd[idx(k)]));
            let tgt = [0, 1, 2, 3].map(|k| target[idx(k)]);
            let (iou, d) = ltrb_iou_with_grad(pred, tgt);
            value += wgt * (1.0 - iou);
            if track {
                for k in 0..4 {
                    grads.push((idx(k), -wgt * d[k] * sigmoid_scalar(rd[idx(k)])));
                }
            }
        }
    }
    drop(rd);
    let op: Option<Box<dyn Backward>> = track.then(|| Box::new(IouBackward { grads, len: n * 4 * plane }) as _);
    Ok(Tensor::from_op(Vec::new(), vec![value], &[raw], op))
}

struct IouBackward {
    grads: Vec<(usize, f64)>,
    len: usize,
}

impl Backward for IouBackward {
    fn name(&self) -> &'static str {
        "iou_loss"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; self.len];
        for &(i, d) in &self.grads {
            dx[i] += ctx.grad[0] * d;
        }
        vec![Some(dx)]
    }
}
