//! Parameter storage and the handful of layers every block is built from.

use std::cell::RefCell;
use std::collections::HashMap;

use msdet_tensor::{activation, batch_norm, conv2d, Activation, BatchNormState, ConvSpec, NormMode, Padding, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by the optimizer.
    Param,
    /// State that is saved with the model but not trained (norm statistics).
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform with the variance of He-normal: `U(±sqrt(6 / fan_in))`, times `gain`.
    He { fan_in: usize, gain: f64 },
    Constant(f64),
}

impl Init {
    pub fn he(fan_in: usize) -> Self {
        Init::He { fan_in, gain: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
}

/// Named parameters in creation order. Each random tensor draws from its own
/// generator, seeded from the model seed and the parameter name, so values
/// do not depend on the order in which blocks are built.
#[derive(Debug, Clone)]
pub struct ParamStore {
    seed: u64,
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn insert(&mut self, name: &str, tensor: Tensor, kind: ParamKind) -> Result<Tensor> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            tensor: tensor.clone(),
            kind,
        });
        Ok(tensor)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Constant(v) => vec![v; n],
            Init::He { fan_in, gain } => {
                let bound = gain * (6.0 / fan_in.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        let t = Tensor::parameter(shape, data)?;
        self.insert(name, t, ParamKind::Param)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        self.insert(name, Tensor::full(shape, value), ParamKind::Buffer)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    /// Trainable tensors in creation order.
    pub fn params(&self) -> Vec<Tensor> {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Param)
            .map(|e| e.tensor.clone())
            .collect()
    }

    /// Element count over trainable tensors.
    pub fn param_count(&self) -> usize {
        self.count_where(|e| e.kind == ParamKind::Param)
    }

    /// Trainable element count under a dotted name prefix.
    pub fn param_count_under(&self, prefix: &str) -> usize {
        self.count_where(|e| e.kind == ParamKind::Param && under(&e.name, prefix))
    }

    fn count_where(&self, f: impl Fn(&Entry) -> bool) -> usize {
        self.entries.iter().filter(|e| f(e)).map(|e| e.tensor.numel()).sum()
    }

    /// Every tensor, parameters and buffers, for serialization.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.entries.iter().map(|e| (e.name.clone(), e.tensor.clone())).collect()
    }

    /// Copies values in by name; every stored tensor must be present with a
    /// matching shape.
    pub fn load(&self, named: &[(String, Tensor)]) -> Result<()> {
        let given: HashMap<&str, &Tensor> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for e in &self.entries {
            let src = given
                .get(e.name.as_str())
                .ok_or_else(|| Error::Validation(format!("weights are missing `{}`", e.name)))?;
            if src.shape() != e.tensor.shape() {
                return Err(Error::Validation(format!(
                    "`{}` has shape {:?} in the weights but {:?} in the model",
                    e.name,
                    src.shape(),
                    e.tensor.shape()
                )));
            }
            e.tensor.data_mut().copy_from_slice(&src.data());
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| e.tensor.to_vec()).collect()
    }

    pub fn restore(&self, snapshot: &[Vec<f64>]) {
        for (e, v) in self.entries.iter().zip(snapshot) {
            e.tensor.data_mut().copy_from_slice(v);
        }
    }
}

/// `name` equals `prefix` or continues it after a dot.
pub fn under(name: &str, prefix: &str) -> bool {
    name == prefix || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}

/// One logged node of a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub name: String,
    pub op: &'static str,
    pub shape: Vec<usize>,
    /// Analytic multiply-accumulates; zero for non-convolution nodes.
    pub macs: u64,
}

/// Per-forward settings: norm mode and an optional node log.
#[derive(Debug)]
pub struct Ctx {
    pub mode: NormMode,
    trace: Option<RefCell<Vec<TraceEntry>>>,
}

impl Ctx {
    pub fn train() -> Self {
        Ctx {
            mode: NormMode::Train,
            trace: None,
        }
    }

    pub fn infer() -> Self {
        Ctx {
            mode: NormMode::Infer,
            trace: None,
        }
    }

    pub fn traced(mode: NormMode) -> Self {
        Ctx {
            mode,
            trace: Some(RefCell::new(Vec::new())),
        }
    }

    pub fn record(&self, name: &str, op: &'static str, out: &Tensor, macs: u64) {
        if let Some(t) = &self.trace {
            t.borrow_mut().push(TraceEntry {
                name: name.to_string(),
                op,
                shape: out.shape().to_vec(),
                macs,
            });
        }
    }

    pub fn take_trace(&self) -> Vec<TraceEntry> {
        self.trace.as_ref().map(|t| t.take()).unwrap_or_default()
    }
}

/// Attaches the node name and input shape to a failing op.
pub(crate) fn at<T>(node: &str, input: &Tensor, r: msdet_tensor::Result<T>) -> Result<T> {
    r.map_err(|source| Error::Node {
        node: node.to_string(),
        shape: input.shape().to_vec(),
        source,
    })
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Conv {
    /// He-initialized weight, zero bias. Parameters are `{name}.weight` and
    /// `{name}.bias`.
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.in_channels / spec.groups * spec.kernel_h * spec.kernel_w;
        Self::with_init(store, name, spec, Init::he(fan_in), 0.0)
    }

    pub fn with_init(store: &mut ParamStore, name: &str, spec: ConvSpec, weight: Init, bias: f64) -> Result<Self> {
        spec.validate()?;
        let weight = store.param(&format!("{name}.weight"), &spec.weight_shape(), weight)?;
        let bias = if spec.has_bias {
            Some(store.param(&format!("{name}.bias"), &[spec.out_channels], Init::Constant(bias))?)
        } else {
            None
        };
        Ok(Conv {
            name: name.to_string(),
            spec,
            weight,
            bias,
        })
    }

    /// 1×1 convolution with bias.
    pub fn pointwise(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Self::new(store, name, ConvSpec::pointwise(cin, cout))
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let y = at(&self.name, x, conv2d(x, &self.weight, self.bias.as_ref(), &self.spec))?;
        let (n, _, oh, ow) = y.dims4("conv2d")?;
        ctx.record(&self.name, "conv", &y, self.spec.macs(n, oh, ow));
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub name: String,
    pub state: BatchNormState,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let mut state = BatchNormState::identity(channels);
        state.weight = store.param(&format!("{name}.weight"), &[channels], Init::Constant(1.0))?;
        state.bias = store.param(&format!("{name}.bias"), &[channels], Init::Constant(0.0))?;
        state.running_mean = store.buffer(&format!("{name}.running_mean"), &[channels], 0.0)?;
        state.running_var = store.buffer(&format!("{name}.running_var"), &[channels], 1.0)?;
        Ok(Norm {
            name: name.to_string(),
            state,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let y = at(&self.name, x, batch_norm(x, &self.state, ctx.mode))?;
        ctx.record(&self.name, "batch_norm", &y, 0);
        Ok(y)
    }
}

/// Convolution without bias, batch norm, activation. Odd kernels get "same"
/// padding, so the output is the input size divided by the stride.
#[derive(Debug, Clone)]
pub struct ConvBnAct {
    pub conv: Conv,
    pub norm: Norm,
    pub act: Activation,
}

impl ConvBnAct {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        act: Activation,
    ) -> Result<Self> {
        let spec = ConvSpec::new(cin, cout, kernel, kernel)
            .with_bias(false)
            .with_stride(stride)
            .with_padding(Padding::uniform(kernel / 2));
        Ok(ConvBnAct {
            conv: Conv::new(store, &format!("{name}.conv"), spec)?,
            norm: Norm::new(store, &format!("{name}.bn"), cout)?,
            act,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let y = self.norm.forward(ctx, &self.conv.forward(ctx, x)?)?;
        Ok(activation(&y, self.act))
    }

    pub fn out_channels(&self) -> usize {
        self.conv.spec.out_channels
    }
}
