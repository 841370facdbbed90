//! Flat `key = value` run configuration.
//!
//! ```text
//! # toy.cfg
//! preset = toy
//! variant = lska_gd
//! k = 11
//! d = 3
//! patch_sizes = 1,2,3
//! ```
//!
//! `preset` (`toy` or `default`) must come first when present. Unknown and
//! repeated keys are rejected.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::train::TrainConfig;
use crate::zoo::{ModelConfig, ModelVariant};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub variant: Option<ModelVariant>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn toy() -> Self {
        RunConfig {
            variant: None,
            model: ModelConfig::toy(),
            train: TrainConfig::toy(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "preset",
    "variant",
    "input_size",
    "widths",
    "num_classes",
    "seed",
    "neck_channels",
    "fuse_channels",
    "k",
    "d",
    "lska_stage",
    "patch_sizes",
    "hidden_ratio",
    "conf_threshold",
    "iou_threshold",
    "epochs",
    "lr",
    "momentum",
    "weight_decay",
    "batch_size",
    "warmup_epochs",
    "patience",
    "box_weight",
    "obj_weight",
    "cls_weight",
    "eval_conf",
];

fn value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("line {line}: `{key}` has invalid value {v:?}")))
}

fn list(line: usize, key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| value(line, key, p.trim())).collect()
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, v) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`, got {line:?}")))?;
        if !KEYS.contains(&key) {
            return Err(Error::Config(format!("line {line_no}: unknown key `{key}`")));
        }
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!("line {line_no}: `{key}` given twice")));
        }
        let (m, t) = (&mut cfg.model, &mut cfg.train);
        match key {
            "preset" => {
                if seen.len() > 1 {
                    return Err(Error::Config(format!("line {line_no}: `preset` must be the first key")));
                }
                cfg = match v {
                    "toy" => RunConfig::toy(),
                    "default" => RunConfig::default(),
                    _ => return Err(Error::Config(format!("line {line_no}: unknown preset {v:?}"))),
                };
            }
            "variant" => cfg.variant = Some(v.parse()?),
            "input_size" => m.input_size = value(line_no, key, v)?,
            "widths" => {
                m.widths = list(line_no, key, v)?
                    .try_into()
                    .map_err(|w: Vec<usize>| Error::Config(format!("line {line_no}: `widths` needs 4 values, got {}", w.len())))?
            }
            "num_classes" => m.num_classes = value(line_no, key, v)?,
            "seed" => {
                m.seed = value(line_no, key, v)?;
                t.seed = m.seed;
            }
            "neck_channels" => m.neck_channels = value(line_no, key, v)?,
            "fuse_channels" => m.fuse_channels = value(line_no, key, v)?,
            "k" => m.lska_kernel = value(line_no, key, v)?,
            "d" => m.lska_dilation = value(line_no, key, v)?,
            "lska_stage" => m.lska_stage = value(line_no, key, v)?,
            "patch_sizes" => m.patch_sizes = list(line_no, key, v)?,
            "hidden_ratio" => m.hidden_ratio = value(line_no, key, v)?,
            "conf_threshold" => {
                m.conf_threshold = value(line_no, key, v)?;
                t.pr_conf = m.conf_threshold;
            }
            "iou_threshold" => m.iou_threshold = value(line_no, key, v)?,
            "epochs" => t.epochs = value(line_no, key, v)?,
            "lr" => t.lr = value(line_no, key, v)?,
            "momentum" => t.momentum = value(line_no, key, v)?,
            "weight_decay" => t.weight_decay = value(line_no, key, v)?,
            "batch_size" => t.batch_size = value(line_no, key, v)?,
            "warmup_epochs" => t.warmup_epochs = value(line_no, key, v)?,
            "patience" => t.patience = value(line_no, key, v)?,
            "box_weight" => t.loss_weights.box_ = value(line_no, key, v)?,
            "obj_weight" => t.loss_weights.obj = value(line_no, key, v)?,
            "cls_weight" => t.loss_weights.cls = value(line_no, key, v)?,
            "eval_conf" => t.eval_conf = value(line_no, key, v)?,
            _ => unreachable!("key list and match arms agree"),
        }
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
