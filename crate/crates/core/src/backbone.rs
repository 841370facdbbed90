//! Plain residual backbone tapping strides 4, 8, 16 and 32.

use msdet_tensor::{add, Activation, Tensor};

use crate::error::{Error, Result};
use crate::lska::{Lska, LskaSpec};
use crate::nn::{at, ConvBnAct, Ctx, ParamStore};

pub const TAP_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone)]
struct Residual {
    name: String,
    reduce: ConvBnAct,
    expand: ConvBnAct,
}

impl Residual {
    fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        let hidden = (width / 2).max(1);
        Ok(Residual {
            name: name.to_string(),
            reduce: ConvBnAct::new(store, &format!("{name}.reduce"), width, hidden, 1, 1, Activation::Silu)?,
            expand: ConvBnAct::new(store, &format!("{name}.expand"), hidden, width, 3, 1, Activation::Silu)?,
        })
    }

    fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let y = self.expand.forward(ctx, &self.reduce.forward(ctx, x)?)?;
        let out = at(&self.name, x, add(x, &y))?;
        ctx.record(&self.name, "residual_add", &out, 0);
        Ok(out)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: ConvBnAct,
    blocks: Vec<Residual>,
}

/// Stem to stride 4, then three stages of a stride-2 conv and two residual
/// blocks. LSKA may be attached to one tap.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub widths: [usize; 4],
    stem: [ConvBnAct; 2],
    stages: Vec<Stage>,
    lska: Option<(usize, Lska)>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, widths: [usize; 4]) -> Result<Self> {
        if widths.iter().any(|&w| w < 2) {
            return Err(Error::Config(format!("backbone widths must be at least 2, got {widths:?}")));
        }
        let half = (widths[0] / 2).max(1);
        let stem = [
            ConvBnAct::new(store, "backbone.stem.0", 3, half, 3, 2, Activation::Silu)?,
            ConvBnAct::new(store, "backbone.stem.1", half, widths[0], 3, 2, Activation::Silu)?,
        ];
        let mut stages = Vec::new();
        for i in 1..4 {
            let name = format!("backbone.stage{i}");
            stages.push(Stage {
                down: ConvBnAct::new(store, &format!("{name}.down"), widths[i - 1], widths[i], 3, 2, Activation::Silu)?,
                blocks: vec![
                    Residual::new(store, &format!("{name}.res0"), widths[i])?,
                    Residual::new(store, &format!("{name}.res1"), widths[i])?,
                ],
            });
        }
        Ok(Backbone {
            widths,
            stem,
            stages,
            lska: None,
        })
    }

    /// Routes tap `stage_index` (0 = stride 4 … 3 = stride 32) through an
    /// LSKA block named `lska`.
    pub fn attach_lska(&mut self, store: &mut ParamStore, stage_index: usize, spec: LskaSpec) -> Result<()> {
        if stage_index >= self.widths.len() {
            return Err(Error::Config(format!(
                "lska: unknown backbone stage {stage_index}; stages are 0..={}",
                self.widths.len() - 1
            )));
        }
        if spec.channels != self.widths[stage_index] {
            return Err(Error::Config(format!(
                "lska: stage {stage_index} has {} channels but the block expects {}",
                self.widths[stage_index], spec.channels
            )));
        }
        if self.lska.is_some() {
            return Err(Error::Config("lska: a block is already attached".into()));
        }
        self.lska = Some((stage_index, Lska::new(store, "lska", spec)?));
        Ok(())
    }

    /// Removes the attached block from the forward path. Its parameters stay
    /// in the store.
    pub fn detach_lska(&mut self) -> Option<(usize, Lska)> {
        self.lska.take()
    }

    pub fn lska(&self) -> Option<&(usize, Lska)> {
        self.lska.as_ref()
    }

    /// The four taps, shallow to deep.
    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut y = self.stem[1].forward(ctx, &self.stem[0].forward(ctx, x)?)?;
        let mut taps = vec![y.clone()];
        for stage in &self.stages {
            y = stage.down.forward(ctx, &y)?;
            for b in &stage.blocks {
                y = b.forward(ctx, &y)?;
            }
            taps.push(y.clone());
        }
        if let Some((i, block)) = &self.lska {
            taps[*i] = block.forward(ctx, &taps[*i])?;
        }
        Ok(taps)
    }
}
