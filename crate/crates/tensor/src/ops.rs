use crate::error::{Result, TensorError};
use crate::tensor::{tracking, Backward, BackwardCtx, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Hadamard,
}

/// `x + y` or `x ⊙ y`. `y` either matches `x` exactly or has extent 1 on
/// any axis it broadcasts over (e.g. an N×C×1×1 per-channel scale).
pub fn elementwise(x: &Tensor, y: &Tensor, kind: ElementwiseKind) -> Result<Tensor> {
    let bcast = Broadcast::new(x.shape(), y.shape())?;
    let out = {
        let xd = x.data();
        let yd = y.data();
        let mut out = Vec::with_capacity(xd.len());
        bcast.for_each(|xi, yi| {
            out.push(match kind {
                ElementwiseKind::Add => xd[xi] + yd[yi],
                ElementwiseKind::Hadamard => xd[xi] * yd[yi],
            })
        });
        out
    };
    let op: Option<Box<dyn Backward>> = tracking(&[x, y]).then(|| Box::new(ElementwiseBackward { kind, bcast: bcast.clone() }) as _);
    Ok(Tensor::from_op(x.shape().to_vec(), out, &[x, y], op))
}

pub fn add(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    elementwise(x, y, ElementwiseKind::Add)
}

pub fn mul(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    elementwise(x, y, ElementwiseKind::Hadamard)
}

#[derive(Debug, Clone)]
struct Broadcast {
    x_shape: Vec<usize>,
    y_strides: Vec<usize>,
    y_len: usize,
    same: bool,
}

impl Broadcast {
    fn new(xs: &[usize], ys: &[usize]) -> Result<Self> {
        if xs == ys {
            return Ok(Broadcast {
                x_shape: xs.to_vec(),
                y_strides: Vec::new(),
                y_len: ys.iter().product(),
                same: true,
            });
        }
        if xs.len() != ys.len() {
            return Err(TensorError::dim("elementwise", "rank", xs.len(), ys.len()));
        }
        const AXES: [&str; 4] = ["batch", "channels", "height", "width"];
        let mut strides = vec![0; ys.len()];
        let mut acc = 1;
        for a in (0..ys.len()).rev() {
            if ys[a] != xs[a] && ys[a] != 1 {
                return Err(TensorError::dim("elementwise", AXES.get(a).copied().unwrap_or("axis"), xs[a], ys[a]));
            }
            strides[a] = if ys[a] == 1 { 0 } else { acc };
            acc *= ys[a];
        }
        Ok(Broadcast {
            x_shape: xs.to_vec(),
            y_strides: strides,
            y_len: acc,
            same: false,
        })
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let n: usize = self.x_shape.iter().product();
        if self.same {
            (0..n).for_each(|i| f(i, i));
            return;
        }
        // The innermost run of broadcast axes repeats one y element; walk
        // the outer index with an odometer.
        let rank = self.x_shape.len();
        let mut inner = 1;
        let mut split = rank;
        while split > 0 && self.y_strides[split - 1] == 0 {
            split -= 1;
            inner *= self.x_shape[split];
        }
        let mut idx = vec![0usize; split];
        let mut xi = 0;
        loop {
            let yi: usize = idx.iter().zip(&self.y_strides).map(|(i, s)| i * s).sum();
            for _ in 0..inner {
                f(xi, yi);
                xi += 1;
            }
            let mut a = split;
            loop {
                if a == 0 {
                    return;
                }
                a -= 1;
                idx[a] += 1;
                if idx[a] < self.x_shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
    }
}

struct ElementwiseBackward {
    kind: ElementwiseKind,
    bcast: Broadcast,
}

impl Backward for ElementwiseBackward {
    fn name(&self) -> &'static str {
        match self.kind {
            ElementwiseKind::Add => "add",
            ElementwiseKind::Hadamard => "hadamard",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (x, y) = (&ctx.parents[0], &ctx.parents[1]);
        let g = ctx.grad;
        let mut dx = x.tracks().then(|| vec![0.0; g.len()]);
        let mut dy = y.tracks().then(|| vec![0.0; self.bcast.y_len]);
        match self.kind {
            ElementwiseKind::Add => self.bcast.for_each(|xi, yi| {
                if let Some(dx) = dx.as_mut() {
                    dx[xi] += g[xi];
                }
                if let Some(dy) = dy.as_mut() {
                    dy[yi] += g[xi];
                }
            }),
            ElementwiseKind::Hadamard => {
                let xd = x.data();
                let yd = y.data();
                self.bcast.for_each(|xi, yi| {
                    if let Some(dx) = dx.as_mut() {
                        dx[xi] += g[xi] * yd[yi];
                    }
                    if let Some(dy) = dy.as_mut() {
                        dy[yi] += g[xi] * xd[xi];
                    }
                })
            }
        }
        vec![dx, dy]
    }
}

/// Multiplies every element by a constant.
pub fn scale(x: &Tensor, factor: f64) -> Tensor {
    let out = x.data().iter().map(|v| v * factor).collect();
    let op: Option<Box<dyn Backward>> = tracking(&[x]).then(|| Box::new(ScaleBackward(factor)) as _);
    Tensor::from_op(x.shape().to_vec(), out, &[x], op)
}

struct ScaleBackward(f64);

impl Backward for ScaleBackward {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![Some(ctx.grad.iter().map(|g| g * self.0).collect())]
    }
}

/// Sum of all elements as a 0-dim tensor.
pub fn sum(x: &Tensor) -> Tensor {
    weighted_sum_impl(x, None)
}

pub fn mean(x: &Tensor) -> Tensor {
    scale(&sum(x), 1.0 / x.numel().max(1) as f64)
}

/// `Σ wᵢ·xᵢ` with constant weights; the usual projection for gradient checks.
pub fn weighted_sum(x: &Tensor, weights: &[f64]) -> Result<Tensor> {
    if weights.len() != x.numel() {
        return Err(TensorError::dim("weighted_sum", "numel", x.numel(), weights.len()));
    }
    Ok(weighted_sum_impl(x, Some(weights.to_vec())))
}

fn weighted_sum_impl(x: &Tensor, weights: Option<Vec<f64>>) -> Tensor {
    let value = match &weights {
        Some(w) => x.data().iter().zip(w).map(|(a, b)| a * b).sum(),
        None => x.data().iter().sum(),
    };
    let op: Option<Box<dyn Backward>> = tracking(&[x]).then(|| Box::new(SumBackward { weights, n: x.numel() }) as _);
    Tensor::from_op(Vec::new(), vec![value], &[x], op)
}

struct SumBackward {
    weights: Option<Vec<f64>>,
    n: usize,
}

impl Backward for SumBackward {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let g = ctx.grad[0];
        vec![Some(match &self.weights {
            Some(w) => w.iter().map(|v| v * g).collect(),
            None => vec![g; self.n],
        })]
    }
}

/// Concatenates N×Cᵢ×H×W parts along the channel axis.
pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::Usage("concat_channels: no parts".into()))?;
    let (n, _, h, w) = first.dims4("concat_channels")?;
    let mut sizes = Vec::with_capacity(parts.len());
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4("concat_channels")?;
        if pn != n {
            return Err(TensorError::dim("concat_channels", "batch", n, pn));
        }
        if ph != h {
            return Err(TensorError::dim("concat_channels", "height", h, ph));
        }
        if pw != w {
            return Err(TensorError::dim("concat_channels", "width", w, pw));
        }
        sizes.push(pc);
    }
    let total: usize = sizes.iter().sum();
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total * plane);
    let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
    for b in 0..n {
        for (d, &c) in datas.iter().zip(&sizes) {
            out.extend_from_slice(&d[b * c * plane..(b + 1) * c * plane]);
        }
    }
    drop(datas);
    let refs: Vec<&Tensor> = parts.iter().collect();
    let op: Option<Box<dyn Backward>> = tracking(&refs).then(|| Box::new(ConcatBackward { sizes, n, plane }) as _);
    Ok(Tensor::from_op(vec![n, total, h, w], out, &refs, op))
}

struct ConcatBackward {
    sizes: Vec<usize>,
    n: usize,
    plane: usize,
}

impl Backward for ConcatBackward {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let total: usize = self.sizes.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.sizes.len());
        for (p, &c) in ctx.parents.iter().zip(&self.sizes) {
            if p.tracks() {
                let mut g = Vec::with_capacity(self.n * c * self.plane);
                for b in 0..self.n {
                    let start = (b * total + offset) * self.plane;
                    g.extend_from_slice(&ctx.grad[start..start + c * self.plane]);
                }
                out.push(Some(g));
            } else {
                out.push(None);
            }
            offset += c;
        }
        out
    }
}

/// Channels `start..start+len` of an N×C×H×W tensor.
pub fn narrow_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("narrow_channels")?;
    if start + len > c {
        return Err(TensorError::dim("narrow_channels", "channels", c, start + len));
    }
    let plane = h * w;
    let out = {
        let d = x.data();
        let mut out = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let s = (b * c + start) * plane;
            out.extend_from_slice(&d[s..s + len * plane]);
        }
        out
    };
    let op: Option<Box<dyn Backward>> = tracking(&[x]).then(|| Box::new(NarrowBackward { n, c, start, len, plane }) as _);
    Ok(Tensor::from_op(vec![n, len, h, w], out, &[x], op))
}

struct NarrowBackward {
    n: usize,
    c: usize,
    start: usize,
    len: usize,
    plane: usize,
}

impl Backward for NarrowBackward {
    fn name(&self) -> &'static str {
        "narrow_channels"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let mut g = vec![0.0; self.n * self.c * self.plane];
        let chunk = self.len * self.plane;
        for b in 0..self.n {
            let s = (b * self.c + self.start) * self.plane;
            g[s..s + chunk].copy_from_slice(&ctx.grad[b * chunk..(b + 1) * chunk]);
        }
        vec![Some(g)]
    }
}

/// Exact inverse of [`concat_channels`].
pub fn split_channels(x: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let (_, c, _, _) = x.dims4("split_channels")?;
    let total: usize = sizes.iter().sum();
    if total != c {
        return Err(TensorError::dim("split_channels", "channels", c, total));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let part = narrow_channels(x, start, len);
            start += len;
            part
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
    GlobalAvg,
}

/// Unpadded pooling. `GlobalAvg` ignores `window` and `stride` and yields
/// N×C×1×1. Max-pool ties go to the first position in row-major order.
pub fn pool(x: &Tensor, kind: PoolKind, window: usize, stride: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("pool")?;
    let (k, s) = match kind {
        PoolKind::GlobalAvg => (0, 0),
        _ => {
            if window == 0 {
                return Err(TensorError::Config("pool: window must be positive".into()));
            }
            if stride == 0 {
                return Err(TensorError::Config("pool: stride must be positive".into()));
            }
            if window > h {
                return Err(TensorError::dim("pool", "height", window, h));
            }
            if window > w {
                return Err(TensorError::dim("pool", "width", window, w));
            }
            (window, stride)
        }
    };
    let (oh, ow) = if kind == PoolKind::GlobalAvg {
        (1, 1)
    } else {
        ((h - k) / s + 1, (w - k) / s + 1)
    };
    let d = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    let mut argmax = if kind == PoolKind::Max { vec![0usize; out.len()] } else { Vec::new() };
    for plane in 0..n * c {
        let src = &d[plane * h * w..(plane + 1) * h * w];
        if kind == PoolKind::GlobalAvg {
            out[plane] = src.iter().sum::<f64>() / (h * w) as f64;
            continue;
        }
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (plane * oh + oy) * ow + ox;
                match kind {
                    PoolKind::Avg => {
                        let mut acc = 0.0;
                        for i in 0..k {
                            let row = (oy * s + i) * w + ox * s;
                            acc += src[row..row + k].iter().sum::<f64>();
                        }
                        out[o] = acc / (k * k) as f64;
                    }
                    PoolKind::Max => {
                        let mut best = f64::NEG_INFINITY;
                        let mut at = 0;
                        for i in 0..k {
                            for j in 0..k {
                                let idx = (oy * s + i) * w + ox * s + j;
                                if src[idx] > best {
                                    best = src[idx];
                                    at = idx;
                                }
                            }
                        }
                        out[o] = best;
                        argmax[o] = plane * h * w + at;
                    }
                    PoolKind::GlobalAvg => unreachable!(),
                }
            }
        }
    }
    drop(d);
    let op: Option<Box<dyn Backward>> = tracking(&[x]).then(|| {
        Box::new(PoolBackward {
            kind,
            k,
            s,
            h,
            w,
            oh,
            ow,
            argmax,
        }) as _
    });
    Ok(Tensor::from_op(vec![n, c, oh, ow], out, &[x], op))
}

pub fn avg_pool(x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    pool(x, PoolKind::Avg, window, stride)
}

pub fn max_pool(x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    pool(x, PoolKind::Max, window, stride)
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    pool(x, PoolKind::GlobalAvg, 0, 0)
}

struct PoolBackward {
    kind: PoolKind,
    k: usize,
    s: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    argmax: Vec<usize>,
}

impl Backward for PoolBackward {
    fn name(&self) -> &'static str {
        match self.kind {
            PoolKind::Avg => "avg_pool",
            PoolKind::Max => "max_pool",
            PoolKind::GlobalAvg => "global_avg_pool",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let planes = ctx.grad.len() / (self.oh * self.ow);
        let (h, w) = (self.h, self.w);
        let mut dx = vec![0.0; planes * h * w];
        match self.kind {
            PoolKind::GlobalAvg => {
                for (p, g) in ctx.grad.iter().enumerate() {
                    let v = g / (h * w) as f64;
                    dx[p * h * w..(p + 1) * h * w].iter_mut().for_each(|d| *d = v);
                }
            }
            PoolKind::Max => {
                for (o, g) in ctx.grad.iter().enumerate() {
                    dx[self.argmax[o]] += g;
                }
            }
            PoolKind::Avg => {
                let norm = 1.0 / (self.k * self.k) as f64;
                for p in 0..planes {
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            let g = ctx.grad[(p * self.oh + oy) * self.ow + ox] * norm;
                            for i in 0..self.k {
                                let row = p * h * w + (oy * self.s + i) * w + ox * self.s;
                                dx[row..row + self.k].iter_mut().for_each(|d| *d += g);
                            }
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Nearest-neighbour resize; destination index `d` reads source
/// `floor(d · src / dst)` on each axis.
pub fn resize_nearest(x: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("resize_nearest")?;
    if target_h == 0 || target_w == 0 {
        return Err(TensorError::Config("resize_nearest: target size must be at least 1".into()));
    }
    let index: Vec<usize> = (0..target_h)
        .flat_map(|dy| {
            let sy = dy * h / target_h;
            (0..target_w).map(move |dx| sy * w + dx * w / target_w)
        })
        .collect();
    let out = {
        let d = x.data();
        let mut out = Vec::with_capacity(n * c * index.len());
        for p in 0..n * c {
            let src = &d[p * h * w..(p + 1) * h * w];
            out.extend(index.iter().map(|&i| src[i]));
        }
        out
    };
    let op: Option<Box<dyn Backward>> = tracking(&[x]).then(|| Box::new(ResizeBackward { index, plane: h * w }) as _);
    Ok(Tensor::from_op(vec![n, c, target_h, target_w], out, &[x], op))
}

struct ResizeBackward {
    index: Vec<usize>,
    plane: usize,
}

impl Backward for ResizeBackward {
    fn name(&self) -> &'static str {
        "resize_nearest"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let planes = ctx.grad.len() / self.index.len();
        let mut dx = vec![0.0; planes * self.plane];
        for p in 0..planes {
            let g = &ctx.grad[p * self.index.len()..(p + 1) * self.index.len()];
            let d = &mut dx[p * self.plane..(p + 1) * self.plane];
            for (&i, gv) in self.index.iter().zip(g) {
                d[i] += gv;
            }
        }
        vec![Some(dx)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Silu,
    Relu,
    /// tanh approximation of GELU.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid_scalar(x),
            Activation::Silu => x * sigmoid_scalar(x),
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid_scalar(x);
                s * (1.0 - s)
            }
            Activation::Silu => {
                let s = sigmoid_scalar(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Silu => "silu",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        }
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    let out = x.data().iter().map(|&v| kind.apply(v)).collect();
    let op: Option<Box<dyn Backward>> = tracking(&[x]).then(|| Box::new(ActivationBackward(kind)) as _);
    Tensor::from_op(x.shape().to_vec(), out, &[x], op)
}

struct ActivationBackward(Activation);

impl Backward for ActivationBackward {
    fn name(&self) -> &'static str {
        self.0.name()
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let x = ctx.parents[0].data();
        let dx = match self.0 {
            Activation::Sigmoid => ctx.out.iter().zip(ctx.grad).map(|(s, g)| g * s * (1.0 - s)).collect(),
            kind => x.iter().zip(ctx.grad).map(|(&v, g)| g * kind.derivative(v)).collect(),
        };
        vec![Some(dx)]
    }
}

/// Largest exponent fed to `exp`; keeps the output finite.
pub const EXP_CLAMP: f64 = 80.0;

/// Elementwise `exp(min(x, EXP_CLAMP))`.
pub fn exp(x: &Tensor) -> Tensor {
    let out = x.data().iter().map(|v| v.min(EXP_CLAMP).exp()).collect();
    let op: Option<Box<dyn Backward>> = tracking(&[x]).then(|| Box::new(ExpBackward) as _);
    Tensor::from_op(x.shape().to_vec(), out, &[x], op)
}

struct ExpBackward;

impl Backward for ExpBackward {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let x = ctx.parents[0].data();
        let dx = ctx
            .out
            .iter()
            .zip(ctx.grad)
            .zip(x.iter())
            .map(|((e, g), &v)| if v > EXP_CLAMP { 0.0 } else { g * e })
            .collect();
        vec![Some(dx)]
    }
}
