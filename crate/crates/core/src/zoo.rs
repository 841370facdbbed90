//! The six ablation variants, built from one shared backbone, plus
//! parameter, MAC and shape accounting.

use std::fmt;
use std::str::FromStr;

use msdet_tensor::{no_grad, NormMode, Tensor};

use crate::backbone::Backbone;
use crate::boxes::DetBox;
use crate::error::{Error, Result};
use crate::gd_neck::{Fpn, GdNeck, GdSpec};
use crate::lska::LskaSpec;
use crate::nn::{Ctx, ParamStore, TraceEntry};
use crate::seam_head::{postprocess, Head, HeadSpec, SeamSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelVariant {
    Baseline,
    LskaOnly,
    GdOnly,
    SeamOnly,
    LskaGd,
    GdSeam,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 6] = [
        ModelVariant::Baseline,
        ModelVariant::LskaOnly,
        ModelVariant::GdOnly,
        ModelVariant::SeamOnly,
        ModelVariant::LskaGd,
        ModelVariant::GdSeam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Baseline => "baseline",
            ModelVariant::LskaOnly => "lska_only",
            ModelVariant::GdOnly => "gd_only",
            ModelVariant::SeamOnly => "seam_only",
            ModelVariant::LskaGd => "lska_gd",
            ModelVariant::GdSeam => "gd_seam",
        }
    }

    pub fn uses_lska(self) -> bool {
        matches!(self, ModelVariant::LskaOnly | ModelVariant::LskaGd)
    }

    pub fn uses_gd(self) -> bool {
        matches!(self, ModelVariant::GdOnly | ModelVariant::LskaGd | ModelVariant::GdSeam)
    }

    pub fn uses_seam(self) -> bool {
        matches!(self, ModelVariant::SeamOnly | ModelVariant::GdSeam)
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ModelVariant::ALL.iter().map(|v| v.name()).collect();
                Error::Validation(format!("unknown variant `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Square input side; a multiple of 32, at least 64.
    pub input_size: usize,
    /// Backbone tap widths at strides 4, 8, 16, 32.
    pub widths: [usize; 4],
    pub num_classes: usize,
    pub seed: u64,
    /// Channel width of the three head levels.
    pub neck_channels: usize,
    /// Width of the GD descriptors.
    pub fuse_channels: usize,
    pub lska_kernel: usize,
    pub lska_dilation: usize,
    /// Backbone tap the LSKA block is attached to.
    pub lska_stage: usize,
    pub patch_sizes: Vec<usize>,
    pub hidden_ratio: f64,
    pub conf_threshold: f64,
    pub iou_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 256,
            widths: [16, 32, 64, 128],
            num_classes: 15,
            seed: 0,
            neck_channels: 32,
            fuse_channels: 32,
            lska_kernel: 11,
            lska_dilation: 3,
            lska_stage: 3,
            patch_sizes: vec![1, 2, 3],
            hidden_ratio: 0.25,
            conf_threshold: 0.25,
            iou_threshold: 0.5,
        }
    }
}

impl ModelConfig {
    /// 96-pixel inputs, two classes: the synthetic benchmark.
    pub fn toy() -> Self {
        ModelConfig {
            input_size: 96,
            num_classes: 2,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 64 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input_size must be a multiple of 32 and at least 64, got {}",
                self.input_size
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!("widths must be positive, got {:?}", self.widths)));
        }
        if self.neck_channels == 0 || self.fuse_channels == 0 {
            return Err(Error::Config("neck widths must be positive".into()));
        }
        Ok(())
    }

    pub fn lska_spec(&self) -> Result<LskaSpec> {
        let stage = self.lska_stage;
        let channels = *self
            .widths
            .get(stage)
            .ok_or_else(|| Error::Config(format!("lska: unknown backbone stage {stage}")))?;
        LskaSpec::new(channels, self.lska_kernel, self.lska_dilation)
    }

    pub fn head_spec(&self) -> HeadSpec {
        HeadSpec {
            conf_threshold: self.conf_threshold,
            iou_threshold_nms: self.iou_threshold,
            ..HeadSpec::new(self.num_classes)
        }
    }

    pub fn seam_spec(&self) -> SeamSpec {
        SeamSpec {
            patch_sizes: self.patch_sizes.clone(),
            hidden_ratio: self.hidden_ratio,
            ..SeamSpec::new(self.neck_channels)
        }
    }

    /// (H, W) of the three head levels.
    pub fn level_sizes(&self) -> [(usize, usize); 3] {
        [8, 16, 32].map(|s| (self.input_size / s, self.input_size / s))
    }
}

#[derive(Debug, Clone)]
pub enum Neck {
    Fpn(Fpn),
    Gd(GdNeck),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub variant: ModelVariant,
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub neck: Neck,
    pub head: Head,
}

/// Detections per image from the default post-processing budget.
pub const MAX_DETECTIONS: usize = 100;

pub fn build(variant: ModelVariant, config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut store = ParamStore::new(config.seed);
    let mut backbone = Backbone::new(&mut store, config.widths)?;
    if variant.uses_lska() {
        backbone.attach_lska(&mut store, config.lska_stage, config.lska_spec()?)?;
    }
    let neck = if variant.uses_gd() {
        Neck::Gd(GdNeck::new(
            &mut store,
            config.widths,
            GdSpec::new(config.fuse_channels, config.neck_channels),
        )?)
    } else {
        Neck::Fpn(Fpn::new(&mut store, config.widths, config.neck_channels)?)
    };
    let seam = variant.uses_seam().then(|| config.seam_spec());
    let head = Head::new(
        &mut store,
        config.neck_channels,
        config.head_spec(),
        seam.as_ref(),
        config.level_sizes(),
    )?;
    Ok(Model {
        variant,
        config: config.clone(),
        store,
        backbone,
        neck,
        head,
    })
}

impl Model {
    /// Raw head outputs for strides 8, 16 and 32.
    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = x.dims4("model")?;
        if c != 3 {
            return Err(Error::Validation(format!("model input must have 3 channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Validation(format!("model input {h}×{w} is not divisible by 32")));
        }
        let taps = self.backbone.forward(ctx, x)?;
        let pyramid = match &self.neck {
            Neck::Fpn(n) => n.forward(ctx, &taps)?,
            Neck::Gd(n) => n.forward(ctx, &taps)?,
        };
        self.head.forward(ctx, &pyramid)
    }

    /// Inference-mode detections after NMS, one list per batch item.
    pub fn detect(&self, x: &Tensor, conf_threshold: f64) -> Result<Vec<Vec<DetBox>>> {
        let raw = no_grad(|| self.forward(&Ctx::infer(), x))?;
        postprocess(
            &raw,
            &self.head.spec.strides,
            conf_threshold,
            self.head.spec.iou_threshold_nms,
            MAX_DETECTIONS,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountRow {
    pub module: String,
    pub count: u64,
}

/// Per-module counts in first-seen order plus their total.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountTable {
    pub rows: Vec<CountRow>,
    pub total: u64,
}

impl CountTable {
    fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, u64)>) -> Self {
        let mut rows: Vec<CountRow> = Vec::new();
        for (name, n) in pairs {
            let module = module_of(name);
            match rows.iter_mut().find(|r| r.module == module) {
                Some(r) => r.count += n,
                None => rows.push(CountRow { module, count: n }),
            }
        }
        let total = rows.iter().map(|r| r.count).sum();
        CountTable { rows, total }
    }

    pub fn get(&self, module: &str) -> Option<u64> {
        self.rows.iter().find(|r| r.module == module).map(|r| r.count)
    }
}

/// Module a parameter or node belongs to for reporting.
pub fn module_of(name: &str) -> String {
    let seg: Vec<&str> = name.split('.').collect();
    match seg[0] {
        "lska" | "fpn" => seg[0].to_string(),
        "head" if seg.get(2) == Some(&"seam") => "head.seam".to_string(),
        "head" => "head".to_string(),
        _ if seg.len() > 2 => format!("{}.{}", seg[0], seg[1]),
        _ => seg[0].to_string(),
    }
}

/// Exact trainable element counts.
pub fn count_params(model: &Model) -> CountTable {
    CountTable::from_pairs(
        model
            .store
            .entries()
            .iter()
            .filter(|e| e.kind == crate::nn::ParamKind::Param)
            .map(|e| (e.name.as_str(), e.tensor.numel() as u64)),
    )
}

/// Forward of a batch-1 zero image with every node logged. Touches no
/// parameter or statistic.
pub fn trace_shapes(model: &Model, input_size: usize) -> Result<Vec<TraceEntry>> {
    let ctx = Ctx::traced(NormMode::Infer);
    let x = Tensor::zeros(&[1, 3, input_size, input_size]);
    no_grad(|| model.forward(&ctx, &x))?;
    Ok(ctx.take_trace())
}

/// Analytic multiply-accumulates of every convolution, grouped by module.
pub fn estimate_macs(model: &Model, input_size: usize) -> Result<CountTable> {
    let trace = trace_shapes(model, input_size)?;
    Ok(CountTable::from_pairs(
        trace.iter().filter(|t| t.op == "conv").map(|t| (t.name.as_str(), t.macs)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in ModelVariant::ALL {
            assert_eq!(v.name().parse::<ModelVariant>().unwrap(), v);
        }
        assert!("yolo".parse::<ModelVariant>().unwrap_err().is_validation());
    }

    #[test]
    fn module_grouping() {
        assert_eq!(module_of("backbone.stage1.res0.reduce.conv.weight"), "backbone.stage1");
        assert_eq!(module_of("lska.h5.weight"), "lska");
        assert_eq!(module_of("gd.inject.p3.low.gate.bias"), "gd.inject");
        assert_eq!(module_of("head.p4.seam.fc1.weight"), "head.seam");
        assert_eq!(module_of("head.p4.cls.out.bias"), "head");
    }

    #[test]
    fn bad_input_size_is_config_error() {
        let cfg = ModelConfig {
            input_size: 100,
            ..ModelConfig::toy()
        };
        assert!(matches!(build(ModelVariant::Baseline, &cfg), Err(Error::Config(_))));
    }
}
