//! Large separable kernel attention.
//!
//! A k×k depthwise attention kernel is approximated by a horizontal and a
//! vertical depthwise pair of size `2d−1`, followed by a dilated horizontal
//! and vertical pair of size `ceil(k/d)` at dilation `d`, and a 1×1 conv.
//! The resulting map multiplies the input.

use msdet_tensor::{mul, ConvSpec, Tensor};

use crate::error::{Error, Result};
use crate::nn::{at, Conv, Ctx, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LskaSpec {
    pub channels: usize,
    /// Effective large-kernel size; odd.
    pub kernel: usize,
    pub dilation: usize,
}

impl LskaSpec {
    pub fn new(channels: usize, kernel: usize, dilation: usize) -> Result<Self> {
        let spec = LskaSpec {
            channels,
            kernel,
            dilation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("lska: channels must be positive".into()));
        }
        if self.kernel < 3 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!("lska: kernel must be odd and at least 3, got {}", self.kernel)));
        }
        if self.dilation == 0 || self.dilation > self.kernel {
            return Err(Error::Config(format!(
                "lska: dilation must lie in 1..={}, got {}",
                self.kernel, self.dilation
            )));
        }
        debug_assert!(self.receptive_field() >= self.kernel);
        Ok(())
    }

    pub fn local_kernel(&self) -> usize {
        2 * self.dilation - 1
    }

    pub fn dilated_kernel(&self) -> usize {
        self.kernel.div_ceil(self.dilation)
    }

    /// Extent covered by the cascade along each axis.
    pub fn receptive_field(&self) -> usize {
        (self.local_kernel() - 1) + self.dilation * (self.dilated_kernel() - 1) + 1
    }
}

/// Weight counts of the attention path, biases excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LskaParamCount {
    /// The four 1-D depthwise kernels.
    pub lska_depthwise: usize,
    /// A single k×k depthwise kernel.
    pub naive_depthwise: usize,
    /// The 1×1 conv, shared by both designs.
    pub pointwise: usize,
}

impl LskaParamCount {
    pub fn ratio(&self) -> f64 {
        self.lska_depthwise as f64 / self.naive_depthwise as f64
    }
}

pub fn lska_param_count(spec: &LskaSpec) -> LskaParamCount {
    let c = spec.channels;
    LskaParamCount {
        lska_depthwise: c * (2 * spec.local_kernel() + 2 * spec.dilated_kernel()),
        naive_depthwise: c * spec.kernel * spec.kernel,
        pointwise: c * c,
    }
}

#[derive(Debug, Clone)]
pub struct Lska {
    pub spec: LskaSpec,
    pub name: String,
    pub h_local: Conv,
    pub v_local: Conv,
    pub h_dilated: Conv,
    pub v_dilated: Conv,
    pub pointwise: Conv,
}

impl Lska {
    /// Parameters live under `{name}.h5`, `.v5`, `.hd`, `.vd` and `.pw`.
    pub fn new(store: &mut ParamStore, name: &str, spec: LskaSpec) -> Result<Self> {
        spec.validate()?;
        let (c, lk, dk, d) = (spec.channels, spec.local_kernel(), spec.dilated_kernel(), spec.dilation);
        let dw = |kh, kw, dil| ConvSpec::depthwise(c, kh, kw).with_dilation(dil).same_padding();
        Ok(Lska {
            spec,
            name: name.to_string(),
            h_local: Conv::new(store, &format!("{name}.h5"), dw(1, lk, 1))?,
            v_local: Conv::new(store, &format!("{name}.v5"), dw(lk, 1, 1))?,
            h_dilated: Conv::new(store, &format!("{name}.hd"), dw(1, dk, d))?,
            v_dilated: Conv::new(store, &format!("{name}.vd"), dw(dk, 1, d))?,
            pointwise: Conv::pointwise(store, &format!("{name}.pw"), c, c)?,
        })
    }

    pub fn convs(&self) -> [&Conv; 5] {
        [&self.h_local, &self.v_local, &self.h_dilated, &self.v_dilated, &self.pointwise]
    }

    pub fn attention_map(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = at(&self.name, x, x.dims4("lska"))?;
        if c != self.spec.channels {
            return Err(Error::Node {
                node: self.name.clone(),
                shape: x.shape().to_vec(),
                source: msdet_tensor::TensorError::Dimension {
                    op: "lska",
                    axis: "channels",
                    expected: self.spec.channels,
                    actual: c,
                },
            });
        }
        let mut a = x.clone();
        for conv in self.convs() {
            a = conv.forward(ctx, &a)?;
        }
        Ok(a)
    }

    /// `attention_map(x) ⊙ x`.
    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let a = self.attention_map(ctx, x)?;
        let y = at(&self.name, x, mul(&a, x))?;
        ctx.record(&format!("{}.reweight", self.name), "hadamard", &y, 0);
        Ok(y)
    }
}
