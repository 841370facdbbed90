//! Detection head with optional MultiSEAM blocks, box decoding and NMS.

use msdet_tensor::ops::{sigmoid_scalar, softplus_scalar};
use msdet_tensor::{
    activation, add, concat_channels, exp, global_avg_pool, mul, resize_nearest, Activation, ConvSpec, Tensor,
    TensorError,
};

use crate::boxes::{detection_order, BBox, DetBox};
use crate::error::{Error, Result};
use crate::nn::{at, Conv, ConvBnAct, Ctx, Init, Norm, ParamStore};

/// Logit bias for objectness and class outputs at init: σ(−4.6) ≈ 0.01.
pub const PRIOR_LOGIT: f64 = -4.6;
/// Smallest decoded distance, in stride units.
pub const MIN_DISTANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct SeamSpec {
    pub channels: usize,
    pub patch_sizes: Vec<usize>,
    /// Bottleneck width of the channel reweighting as a fraction of
    /// `channels`.
    pub hidden_ratio: f64,
    pub activation: Activation,
}

impl SeamSpec {
    pub fn new(channels: usize) -> Self {
        SeamSpec {
            channels,
            patch_sizes: vec![1, 2, 3],
            hidden_ratio: 0.25,
            activation: Activation::Gelu,
        }
    }

    pub fn hidden(&self) -> usize {
        ((self.channels as f64 * self.hidden_ratio).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("multiseam: channels must be positive".into()));
        }
        if self.patch_sizes.is_empty() || self.patch_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "multiseam: patch sizes must be positive and non-empty, got {:?}",
                self.patch_sizes
            )));
        }
        if !(self.hidden_ratio > 0.0 && self.hidden_ratio.is_finite()) {
            return Err(Error::Config(format!("multiseam: hidden ratio {} must be positive", self.hidden_ratio)));
        }
        Ok(())
    }

    /// The patch sizes usable on an `h`×`w` map: those dividing both sides.
    pub fn patches_for(&self, h: usize, w: usize) -> Vec<usize> {
        self.patch_sizes
            .iter()
            .copied()
            .filter(|&p| p <= h && p <= w && h % p == 0 && w % p == 0)
            .collect()
    }
}

/// Channel and spatial mixing: depthwise patch embedding (kernel = stride =
/// patch), norm, activation, pointwise conv, resize back.
#[derive(Debug, Clone)]
pub struct Csmm {
    pub name: String,
    pub patch: usize,
    pub depthwise: Conv,
    pub norm: Norm,
    pub act: Activation,
    pub pointwise: Conv,
}

impl Csmm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, patch: usize, act: Activation) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Config(format!("{name}: patch must be positive")));
        }
        let dw = ConvSpec::depthwise(channels, patch, patch).with_stride(patch).with_bias(false);
        Ok(Csmm {
            name: name.to_string(),
            patch,
            depthwise: Conv::new(store, &format!("{name}.dw"), dw)?,
            norm: Norm::new(store, &format!("{name}.bn"), channels)?,
            act,
            pointwise: Conv::pointwise(store, &format!("{name}.pw"), channels, channels)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = at(&self.name, x, x.dims4("csmm"))?;
        for (axis, extent) in [("height", h), ("width", w)] {
            if extent % self.patch != 0 {
                return Err(Error::Node {
                    node: self.name.clone(),
                    shape: x.shape().to_vec(),
                    source: TensorError::Dimension {
                        op: "csmm",
                        axis,
                        expected: extent.div_ceil(self.patch) * self.patch,
                        actual: extent,
                    },
                });
            }
        }
        let y = self.norm.forward(ctx, &self.depthwise.forward(ctx, x)?)?;
        let y = self.pointwise.forward(ctx, &activation(&y, self.act))?;
        if self.patch == 1 {
            return Ok(y);
        }
        at(&self.name, &y, resize_nearest(&y, h, w))
    }
}

/// Parallel mixing branches summed into `y`, reweighted per channel by
/// `exp(fc2(act(fc1(gap(y)))))`, plus the input.
#[derive(Debug, Clone)]
pub struct MultiSeam {
    pub name: String,
    pub spec: SeamSpec,
    pub branches: Vec<Csmm>,
    pub fc1: Conv,
    pub fc2: Conv,
}

impl MultiSeam {
    pub fn new(store: &mut ParamStore, name: &str, spec: SeamSpec) -> Result<Self> {
        spec.validate()?;
        let (c, hidden) = (spec.channels, spec.hidden());
        let branches = spec
            .patch_sizes
            .iter()
            .map(|&p| Csmm::new(store, &format!("{name}.csmm{p}"), c, p, spec.activation))
            .collect::<Result<Vec<_>>>()?;
        let fc1 = Conv::pointwise(store, &format!("{name}.fc1"), c, hidden)?;
        // small start keeps the initial weights near exp(0) = 1
        let fc2 = Conv::with_init(
            store,
            &format!("{name}.fc2"),
            ConvSpec::pointwise(hidden, c),
            Init::He { fan_in: hidden, gain: 0.1 },
            0.0,
        )?;
        Ok(MultiSeam {
            name: name.to_string(),
            spec,
            branches,
            fc1,
            fc2,
        })
    }

    /// Sum of the mixing branches.
    pub fn mix(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = at(&self.name, x, x.dims4("multiseam"))?;
        if c != self.spec.channels {
            return Err(Error::Node {
                node: self.name.clone(),
                shape: x.shape().to_vec(),
                source: TensorError::Dimension {
                    op: "multiseam",
                    axis: "channels",
                    expected: self.spec.channels,
                    actual: c,
                },
            });
        }
        let mut y: Option<Tensor> = None;
        for b in &self.branches {
            let z = b.forward(ctx, x)?;
            y = Some(match y {
                None => z,
                Some(acc) => at(&self.name, x, add(&acc, &z))?,
            });
        }
        y.ok_or_else(|| Error::Config(format!("{}: no branches", self.name)))
    }

    /// N×C×1×1 positive channel weights for a mixed map `y`.
    pub fn channel_weights(&self, ctx: &Ctx, y: &Tensor) -> Result<Tensor> {
        let pooled = at(&self.name, y, global_avg_pool(y))?;
        let hidden = activation(&self.fc1.forward(ctx, &pooled)?, self.spec.activation);
        Ok(exp(&self.fc2.forward(ctx, &hidden)?))
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let y = self.mix(ctx, x)?;
        let w = self.channel_weights(ctx, &y)?;
        let out = at(&self.name, x, add(&at(&self.name, &y, mul(&y, &w))?, x))?;
        ctx.record(&self.name, "multiseam", &out, 0);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadSpec {
    pub num_classes: usize,
    pub strides: [usize; 3],
    pub conf_threshold: f64,
    pub iou_threshold_nms: f64,
}

impl HeadSpec {
    pub fn new(num_classes: usize) -> Self {
        HeadSpec {
            num_classes,
            strides: [8, 16, 32],
            conf_threshold: 0.25,
            iou_threshold_nms: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("head: num_classes must be at least 1".into()));
        }
        for (name, t) in [("conf_threshold", self.conf_threshold), ("iou_threshold_nms", self.iou_threshold_nms)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("head: {name} {t} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn outputs_per_cell(&self) -> usize {
        self.num_classes + 5
    }
}

#[derive(Debug, Clone)]
pub struct HeadLevel {
    pub name: String,
    pub seam: Option<MultiSeam>,
    pub cls_stem: ConvBnAct,
    pub cls_out: Conv,
    pub reg_stem: ConvBnAct,
    pub box_out: Conv,
    pub obj_out: Conv,
}

impl HeadLevel {
    fn new(store: &mut ParamStore, name: &str, channels: usize, num_classes: usize, seam: Option<SeamSpec>) -> Result<Self> {
        let c = channels;
        let seam = seam
            .map(|s| MultiSeam::new(store, &format!("{name}.seam"), s))
            .transpose()?;
        let prior = |store: &mut ParamStore, n: &str, out| {
            Conv::with_init(store, n, ConvSpec::pointwise(c, out), Init::he(c), PRIOR_LOGIT)
        };
        Ok(HeadLevel {
            name: name.to_string(),
            seam,
            cls_stem: ConvBnAct::new(store, &format!("{name}.cls.stem"), c, c, 3, 1, Activation::Silu)?,
            cls_out: prior(store, &format!("{name}.cls.out"), num_classes)?,
            reg_stem: ConvBnAct::new(store, &format!("{name}.reg.stem"), c, c, 3, 1, Activation::Silu)?,
            box_out: Conv::pointwise(store, &format!("{name}.reg.box"), c, 4)?,
            obj_out: prior(store, &format!("{name}.reg.obj"), 1)?,
        })
    }

    /// N×(5+classes)×H×W laid out as `[l, t, r, b, obj, cls…]`.
    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let x = match &self.seam {
            Some(s) => s.forward(ctx, x)?,
            None => x.clone(),
        };
        let cls = self.cls_out.forward(ctx, &self.cls_stem.forward(ctx, &x)?)?;
        let reg = self.reg_stem.forward(ctx, &x)?;
        let parts = [self.box_out.forward(ctx, &reg)?, self.obj_out.forward(ctx, &reg)?, cls];
        let out = at(&self.name, &x, concat_channels(&parts))?;
        ctx.record(&format!("{}.out", self.name), "concat", &out, 0);
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct Head {
    pub spec: HeadSpec,
    pub levels: Vec<HeadLevel>,
}

impl Head {
    /// `level_sizes` are the (H, W) of the three input levels; MultiSEAM
    /// patch sizes that do not divide a level are left out for that level.
    pub fn new(
        store: &mut ParamStore,
        channels: usize,
        spec: HeadSpec,
        seam: Option<&SeamSpec>,
        level_sizes: [(usize, usize); 3],
    ) -> Result<Self> {
        spec.validate()?;
        let mut levels = Vec::with_capacity(3);
        for (i, &(h, w)) in level_sizes.iter().enumerate() {
            let level_seam = seam.map(|s| SeamSpec {
                channels,
                patch_sizes: s.patches_for(h, w),
                ..s.clone()
            });
            levels.push(HeadLevel::new(store, &format!("head.p{}", i + 3), channels, spec.num_classes, level_seam)?);
        }
        Ok(Head { spec, levels })
    }

    pub fn forward(&self, ctx: &Ctx, pyramid: &[Tensor]) -> Result<Vec<Tensor>> {
        if pyramid.len() != self.levels.len() {
            return Err(Error::Config(format!(
                "head: expected {} levels, got {}",
                self.levels.len(),
                pyramid.len()
            )));
        }
        self.levels.iter().zip(pyramid).map(|(l, x)| l.forward(ctx, x)).collect()
    }
}

/// Detections of one head level, per batch item. The image extent is the
/// grid extent times the stride.
pub fn decode(raw: &Tensor, stride: usize, conf_threshold: f64) -> Result<Vec<Vec<DetBox>>> {
    let (n, c, h, w) = raw.dims4("decode")?;
    if c < 6 {
        return Err(Error::Tensor(TensorError::Dimension {
            op: "decode",
            axis: "channels",
            expected: 6,
            actual: c,
        }));
    }
    let classes = c - 5;
    let s = stride as f64;
    let (img_w, img_h) = ((w * stride) as f64, (h * stride) as f64);
    let d = raw.data();
    let plane = h * w;
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let at = |ch: usize, p: usize| d[(b * c + ch) * plane + p];
        let mut dets = Vec::new();
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let obj = sigmoid_scalar(at(4, p));
                if obj < conf_threshold {
                    continue;
                }
                let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
                let dist = |k: usize| softplus_scalar(at(k, p)).max(MIN_DISTANCE) * s;
                let bbox = BBox::new(
                    (cx - dist(0)).max(0.0),
                    (cy - dist(1)).max(0.0),
                    (cx + dist(2)).min(img_w),
                    (cy + dist(3)).min(img_h),
                );
                for k in 0..classes {
                    let score = obj * sigmoid_scalar(at(5 + k, p));
                    if score >= conf_threshold {
                        dets.push(DetBox { class_id: k, score, bbox });
                    }
                }
            }
        }
        out.push(dets);
    }
    Ok(out)
}

/// Per-class greedy suppression: a box is dropped when its IoU with a kept
/// box of the same class exceeds `iou_threshold`. Output is sorted by
/// descending score with deterministic tie-breaks.
pub fn nms(dets: &[DetBox], iou_threshold: f64) -> Vec<DetBox> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(detection_order);
    let mut kept: Vec<DetBox> = Vec::new();
    for d in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && k.bbox.iou(&d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Decode every level, merge, suppress, and keep the `max_detections` best
/// per image.
pub fn postprocess(
    levels: &[Tensor],
    strides: &[usize],
    conf_threshold: f64,
    iou_threshold: f64,
    max_detections: usize,
) -> Result<Vec<Vec<DetBox>>> {
    let mut per_image: Vec<Vec<DetBox>> = Vec::new();
    for (raw, &s) in levels.iter().zip(strides) {
        for (i, dets) in decode(raw, s, conf_threshold)?.into_iter().enumerate() {
            if per_image.len() <= i {
                per_image.resize_with(i + 1, Vec::new);
            }
            per_image[i].extend(dets);
        }
    }
    Ok(per_image
        .into_iter()
        .map(|d| {
            let mut kept = nms(&d, iou_threshold);
            kept.truncate(max_detections);
            kept
        })
        .collect())
}
