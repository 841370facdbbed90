//! Gather-and-distribute neck.
//!
//! The low branch aligns all four backbone taps to stride 8, fuses them into
//! one descriptor and injects it into the stride-8 and stride-16 levels. The
//! high branch gathers those two outputs plus the stride-32 tap at stride 32
//! and injects into the stride-16 and stride-32 levels. Each inject is
//! preceded by a lightweight fusion with the adjacent levels.

use msdet_tensor::{
    activation, add, avg_pool, concat_channels, mul, resize_nearest, Activation, Tensor, TensorError,
};

use crate::error::{Error, Result};
use crate::nn::{at, Conv, ConvBnAct, Ctx, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Low,
    High,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Low => "low",
            Branch::High => "high",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GdSpec {
    /// Level of the four backbone taps whose size the low gather targets.
    pub low_align_index: usize,
    /// Level of the high gather's three inputs (stride 8, 16, 32) whose size
    /// it targets.
    pub high_align_index: usize,
    pub fuse_channels: usize,
    pub out_channels: usize,
}

impl GdSpec {
    pub fn new(fuse_channels: usize, out_channels: usize) -> Self {
        GdSpec {
            low_align_index: 1,
            high_align_index: 2,
            fuse_channels,
            out_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fuse_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("gd neck: channel widths must be positive".into()));
        }
        if self.low_align_index >= 4 || self.high_align_index >= 3 {
            return Err(Error::Config(format!(
                "gd neck: align indices ({}, {}) out of range",
                self.low_align_index, self.high_align_index
            )));
        }
        Ok(())
    }
}

fn dim_error(node: &str, x: &Tensor, axis: &'static str, expected: usize, actual: usize) -> Error {
    Error::Node {
        node: node.to_string(),
        shape: x.shape().to_vec(),
        source: TensorError::Dimension {
            op: node_op(node),
            axis,
            expected,
            actual,
        },
    }
}

fn node_op(node: &str) -> &'static str {
    if node.contains("laf") {
        "laf"
    } else if node.contains("inject") {
        "inject"
    } else {
        "gather"
    }
}

/// Brings `x` to `th`×`tw`: average pooling when larger, nearest resize when
/// smaller. The scale factor must be an integer.
pub fn align(node: &str, x: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let (_, _, h, w) = at(node, x, x.dims4("align"))?;
    if (h, w) == (th, tw) {
        return Ok(x.clone());
    }
    if h > th {
        if h % th != 0 {
            return Err(dim_error(node, x, "height", th * (h / th + 1), h));
        }
        let f = h / th;
        if w != tw * f {
            return Err(dim_error(node, x, "width", tw * f, w));
        }
        return at(node, x, avg_pool(x, f, f));
    }
    if th % h != 0 {
        return Err(dim_error(node, x, "height", th, h));
    }
    if tw % w != 0 || tw / w != th / h {
        return Err(dim_error(node, x, "width", tw / (th / h), w));
    }
    at(node, x, resize_nearest(x, th, tw))
}

/// Alignment plus fusion: concat of the aligned levels followed by a 1×1
/// and a 3×3 conv block.
#[derive(Debug, Clone)]
pub struct Gather {
    pub name: String,
    pub align_index: usize,
    pub in_channels: Vec<usize>,
    pub ifm: [ConvBnAct; 2],
}

impl Gather {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: &[usize],
        align_index: usize,
        fuse_channels: usize,
    ) -> Result<Self> {
        if align_index >= in_channels.len() {
            return Err(Error::Config(format!(
                "{name}: align index {align_index} with {} levels",
                in_channels.len()
            )));
        }
        let total: usize = in_channels.iter().sum();
        Ok(Gather {
            name: name.to_string(),
            align_index,
            in_channels: in_channels.to_vec(),
            ifm: [
                ConvBnAct::new(store, &format!("{name}.ifm.0"), total, fuse_channels, 1, 1, Activation::Silu)?,
                ConvBnAct::new(store, &format!("{name}.ifm.1"), fuse_channels, fuse_channels, 3, 1, Activation::Silu)?,
            ],
        })
    }

    /// Aligned, channel-concatenated levels.
    pub fn fam(&self, ctx: &Ctx, levels: &[Tensor]) -> Result<Tensor> {
        if levels.len() != self.in_channels.len() {
            return Err(Error::Config(format!(
                "{}: expected {} levels, got {}",
                self.name,
                self.in_channels.len(),
                levels.len()
            )));
        }
        let target = &levels[self.align_index];
        let (_, _, th, tw) = at(&self.name, target, target.dims4("gather"))?;
        let mut aligned = Vec::with_capacity(levels.len());
        for (x, &c) in levels.iter().zip(&self.in_channels) {
            let (_, xc, _, _) = at(&self.name, x, x.dims4("gather"))?;
            if xc != c {
                return Err(dim_error(&self.name, x, "channels", c, xc));
            }
            aligned.push(align(&self.name, x, th, tw)?);
        }
        let out = at(&self.name, target, concat_channels(&aligned))?;
        ctx.record(&format!("{}.fam", self.name), "concat", &out, 0);
        Ok(out)
    }

    pub fn forward(&self, ctx: &Ctx, levels: &[Tensor]) -> Result<Tensor> {
        let f = self.fam(ctx, levels)?;
        self.ifm[1].forward(ctx, &self.ifm[0].forward(ctx, &f)?)
    }
}

/// Adjacent fusion: the shallower neighbour is pooled 2×, the deeper one
/// upsampled 2×, each projected to the current width; the concat
/// `[shallower, current, deeper]` is fused back by a 1×1 conv.
#[derive(Debug, Clone)]
pub struct Laf {
    pub name: String,
    pub channels: usize,
    pub shallow: Option<Conv>,
    pub deep: Option<Conv>,
    pub fuse: Conv,
}

impl Laf {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        shallow_channels: Option<usize>,
        channels: usize,
        deep_channels: Option<usize>,
    ) -> Result<Self> {
        let shallow = shallow_channels
            .map(|c| Conv::pointwise(store, &format!("{name}.shallow"), c, channels))
            .transpose()?;
        let deep = deep_channels
            .map(|c| Conv::pointwise(store, &format!("{name}.deep"), c, channels))
            .transpose()?;
        let parts = 1 + usize::from(shallow.is_some()) + usize::from(deep.is_some());
        Ok(Laf {
            name: name.to_string(),
            channels,
            fuse: Conv::pointwise(store, &format!("{name}.fuse"), parts * channels, channels)?,
            shallow,
            deep,
        })
    }

    pub fn forward(
        &self,
        ctx: &Ctx,
        shallower: Option<&Tensor>,
        current: &Tensor,
        deeper: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (_, _, h, w) = at(&self.name, current, current.dims4("laf"))?;
        let mut parts = Vec::with_capacity(3);
        match (&self.shallow, shallower) {
            (Some(conv), Some(s)) => {
                let (_, _, sh, sw) = at(&self.name, s, s.dims4("laf"))?;
                if sh != 2 * h {
                    return Err(dim_error(&self.name, s, "height", 2 * h, sh));
                }
                if sw != 2 * w {
                    return Err(dim_error(&self.name, s, "width", 2 * w, sw));
                }
                parts.push(conv.forward(ctx, &at(&self.name, s, avg_pool(s, 2, 2))?)?);
            }
            (None, None) => {}
            _ => return Err(Error::Config(format!("{}: shallower neighbour presence mismatch", self.name))),
        }
        parts.push(current.clone());
        match (&self.deep, deeper) {
            (Some(conv), Some(d)) => {
                let (_, _, dh, dw) = at(&self.name, d, d.dims4("laf"))?;
                if 2 * dh != h {
                    return Err(dim_error(&self.name, d, "height", h / 2, dh));
                }
                if 2 * dw != w {
                    return Err(dim_error(&self.name, d, "width", w / 2, dw));
                }
                parts.push(conv.forward(ctx, &at(&self.name, d, resize_nearest(d, h, w))?)?);
            }
            (None, None) => {}
            _ => return Err(Error::Config(format!("{}: deeper neighbour presence mismatch", self.name))),
        }
        let cat = at(&self.name, current, concat_channels(&parts))?;
        self.fuse.forward(ctx, &cat)
    }
}

/// `refine(local_pw(local) ⊙ σ(gate_pw(g)) + global_pw(g))` with `g` the
/// descriptor resized to the local level.
#[derive(Debug, Clone)]
pub struct Inject {
    pub name: String,
    pub local: Conv,
    pub gate: Conv,
    pub global: Conv,
    pub refine: ConvBnAct,
}

impl Inject {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        local_channels: usize,
        global_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        Ok(Inject {
            name: name.to_string(),
            local: Conv::pointwise(store, &format!("{name}.local"), local_channels, out_channels)?,
            gate: Conv::pointwise(store, &format!("{name}.gate"), global_channels, out_channels)?,
            global: Conv::pointwise(store, &format!("{name}.global"), global_channels, out_channels)?,
            refine: ConvBnAct::new(
                store,
                &format!("{name}.refine"),
                out_channels,
                out_channels,
                3,
                1,
                Activation::Silu,
            )?,
        })
    }

    pub fn forward(&self, ctx: &Ctx, local: &Tensor, global_info: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = at(&self.name, local, local.dims4("inject"))?;
        let (_, _, gh, gw) = at(&self.name, global_info, global_info.dims4("inject"))?;
        let g = if (gh, gw) == (h, w) {
            global_info.clone()
        } else {
            at(&self.name, global_info, resize_nearest(global_info, h, w))?
        };
        let gate = activation(&self.gate.forward(ctx, &g)?, Activation::Sigmoid);
        let gated = at(&self.name, local, mul(&self.local.forward(ctx, local)?, &gate))?;
        let mixed = at(&self.name, local, add(&gated, &self.global.forward(ctx, &g)?))?;
        let out = self.refine.forward(ctx, &mixed)?;
        ctx.record(&self.name, "inject", &out, 0);
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct GdNeck {
    pub spec: GdSpec,
    pub low: Gather,
    pub high: Gather,
    pub laf_p3_low: Laf,
    pub laf_p4_low: Laf,
    pub laf_p4_high: Laf,
    pub laf_p5_high: Laf,
    pub inject_p3_low: Inject,
    pub inject_p4_low: Inject,
    pub inject_p4_high: Inject,
    pub inject_p5_high: Inject,
}

impl GdNeck {
    /// `widths` are the channel counts of the four backbone taps.
    pub fn new(store: &mut ParamStore, widths: [usize; 4], spec: GdSpec) -> Result<Self> {
        spec.validate()?;
        let [w2, w3, w4, w5] = widths;
        let (f, c) = (spec.fuse_channels, spec.out_channels);
        Ok(GdNeck {
            spec,
            low: Gather::new(store, "gd.low", &widths, spec.low_align_index, f)?,
            high: Gather::new(store, "gd.high", &[c, c, w5], spec.high_align_index, f)?,
            laf_p3_low: Laf::new(store, "gd.laf.p3.low", Some(w2), w3, Some(w4))?,
            laf_p4_low: Laf::new(store, "gd.laf.p4.low", Some(w3), w4, Some(w5))?,
            laf_p4_high: Laf::new(store, "gd.laf.p4.high", Some(c), c, Some(w5))?,
            laf_p5_high: Laf::new(store, "gd.laf.p5.high", Some(c), w5, None)?,
            inject_p3_low: Inject::new(store, "gd.inject.p3.low", w3, f, c)?,
            inject_p4_low: Inject::new(store, "gd.inject.p4.low", w4, f, c)?,
            inject_p4_high: Inject::new(store, "gd.inject.p4.high", c, f, c)?,
            inject_p5_high: Inject::new(store, "gd.inject.p5.high", w5, f, c)?,
        })
    }

    /// Maps the four taps (strides 4–32) to the three head levels (strides
    /// 8–32), each with `out_channels` channels.
    pub fn forward(&self, ctx: &Ctx, taps: &[Tensor]) -> Result<Vec<Tensor>> {
        let [p2, p3, p4, p5] = taps else {
            return Err(Error::Config(format!("gd neck: expected 4 pyramid levels, got {}", taps.len())));
        };
        let low = self.low.forward(ctx, taps)?;
        let n3 = self
            .inject_p3_low
            .forward(ctx, &self.laf_p3_low.forward(ctx, Some(p2), p3, Some(p4))?, &low)?;
        let n4_low = self
            .inject_p4_low
            .forward(ctx, &self.laf_p4_low.forward(ctx, Some(p3), p4, Some(p5))?, &low)?;

        let high = self.high.forward(ctx, &[n3.clone(), n4_low.clone(), p5.clone()])?;
        let n4 = self
            .inject_p4_high
            .forward(ctx, &self.laf_p4_high.forward(ctx, Some(&n3), &n4_low, Some(p5))?, &high)?;
        let n5 = self
            .inject_p5_high
            .forward(ctx, &self.laf_p5_high.forward(ctx, Some(&n4_low), p5, None)?, &high)?;
        Ok(vec![n3, n4, n5])
    }
}

/// Top-down pyramid over the stride 8–32 taps, used by the variants without
/// the GD neck.
#[derive(Debug, Clone)]
pub struct Fpn {
    lateral: [ConvBnAct; 3],
    merge: [ConvBnAct; 2],
}

impl Fpn {
    pub fn new(store: &mut ParamStore, widths: [usize; 4], out_channels: usize) -> Result<Self> {
        let c = out_channels;
        let lat = |store: &mut ParamStore, i: usize| {
            ConvBnAct::new(store, &format!("fpn.lateral.p{}", i + 2), widths[i], c, 1, 1, Activation::Silu)
        };
        Ok(Fpn {
            lateral: [lat(store, 1)?, lat(store, 2)?, lat(store, 3)?],
            merge: [
                ConvBnAct::new(store, "fpn.merge.p3", 2 * c, c, 3, 1, Activation::Silu)?,
                ConvBnAct::new(store, "fpn.merge.p4", 2 * c, c, 3, 1, Activation::Silu)?,
            ],
        })
    }

    pub fn forward(&self, ctx: &Ctx, taps: &[Tensor]) -> Result<Vec<Tensor>> {
        let [_, p3, p4, p5] = taps else {
            return Err(Error::Config(format!("fpn: expected 4 pyramid levels, got {}", taps.len())));
        };
        let n5 = self.lateral[2].forward(ctx, p5)?;
        let merge = |ctx: &Ctx, block: &ConvBnAct, lateral: Tensor, deeper: &Tensor| -> Result<Tensor> {
            let (_, _, h, w) = lateral.dims4("fpn")?;
            let up = at("fpn", deeper, resize_nearest(deeper, h, w))?;
            block.forward(ctx, &at("fpn", &lateral, concat_channels(&[lateral.clone(), up]))?)
        };
        let n4 = merge(ctx, &self.merge[1], self.lateral[1].forward(ctx, p4)?, &n5)?;
        let n3 = merge(ctx, &self.merge[0], self.lateral[0].forward(ctx, p3)?, &n4)?;
        Ok(vec![n3, n4, n5])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fam_shape_arithmetic() {
        let mut store = ParamStore::new(0);
        let g = Gather::new(&mut store, "gd.low", &[8, 16, 32], 1, 8).unwrap();
        let levels = [
            Tensor::zeros(&[1, 8, 64, 64]),
            Tensor::zeros(&[1, 16, 32, 32]),
            Tensor::zeros(&[1, 32, 16, 16]),
        ];
        assert_eq!(g.fam(&Ctx::infer(), &levels).unwrap().shape(), &[1, 56, 32, 32]);
    }

    #[test]
    fn align_rejects_indivisible_sizes() {
        let x = Tensor::zeros(&[1, 1, 6, 6]);
        assert!(align("gd.low", &x, 4, 4).unwrap_err().is_validation());
        assert!(align("gd.low", &Tensor::zeros(&[1, 1, 3, 3]), 4, 4).is_err());
    }

    #[test]
    fn laf_rejects_wrong_octave() {
        let mut store = ParamStore::new(0);
        let laf = Laf::new(&mut store, "gd.laf.p3.low", Some(2), 4, None).unwrap();
        let err = laf
            .forward(&Ctx::infer(), Some(&Tensor::zeros(&[1, 2, 8, 8])), &Tensor::zeros(&[1, 4, 8, 8]), None)
            .unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
    }
}
