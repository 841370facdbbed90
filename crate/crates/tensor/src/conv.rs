//! 2-D cross-correlation with stride, per-side zero padding, dilation and
//! channel groups.
//!
//! Dense and grouped convolutions lower to im2col + GEMM. Depthwise
//! convolutions (one input and one output channel per group) run a direct
//! loop. [`conv2d_reference`] is the seven-loop definition; it is used by the
//! MAC counter and as a test oracle.

use std::cell::Cell;

use crate::error::{Result, TensorError};
use crate::tensor::{tracking, Backward, BackwardCtx, Tensor};

/// Zero padding added on each side of the spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(p: usize) -> Self {
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// Padding that keeps H×W unchanged at stride 1. Odd extents pad evenly;
    /// an even extent puts the extra row/column after.
    pub fn same(kernel_h: usize, kernel_w: usize, dilation: usize) -> Self {
        let th = dilation * (kernel_h - 1);
        let tw = dilation * (kernel_w - 1);
        Padding {
            top: th / 2,
            bottom: th - th / 2,
            left: tw / 2,
            right: tw - tw / 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: Padding,
    pub dilation: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Stride 1, no padding, no dilation, one group, with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel_h: usize, kernel_w: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride: 1,
            padding: Padding::default(),
            dilation: 1,
            groups: 1,
            has_bias: true,
        }
    }

    pub fn depthwise(channels: usize, kernel_h: usize, kernel_w: usize) -> Self {
        ConvSpec {
            groups: channels,
            ..ConvSpec::new(channels, channels, kernel_h, kernel_w)
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec::new(in_channels, out_channels, 1, 1)
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    /// "Same" padding for the current kernel and dilation.
    pub fn same_padding(mut self) -> Self {
        self.padding = Padding::same(self.kernel_h, self.kernel_w, self.dilation);
        self
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel_h", self.kernel_h),
            ("kernel_w", self.kernel_w),
            ("stride", self.stride),
            ("dilation", self.dilation),
            ("groups", self.groups),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(TensorError::Config(format!("conv2d: {name} must be positive")));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(TensorError::Config(format!(
                "conv2d: groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    /// Weight plus bias element count.
    pub fn param_count(&self) -> usize {
        let w: usize = self.weight_shape().iter().product();
        w + if self.has_bias { self.out_channels } else { 0 }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ext_h = self.dilation * (self.kernel_h - 1) + 1;
        let ext_w = self.dilation * (self.kernel_w - 1) + 1;
        let ph = h + self.padding.top + self.padding.bottom;
        let pw = w + self.padding.left + self.padding.right;
        if ext_h > ph {
            return Err(TensorError::dim("conv2d", "height", ext_h, ph));
        }
        if ext_w > pw {
            return Err(TensorError::dim("conv2d", "width", ext_w, pw));
        }
        Ok(((ph - ext_h) / self.stride + 1, (pw - ext_w) / self.stride + 1))
    }

    /// Multiply-accumulates for a batch producing `out_h`×`out_w` maps.
    pub fn macs(&self, batch: usize, out_h: usize, out_w: usize) -> u64 {
        (batch * self.out_channels * out_h * out_w) as u64
            * (self.in_channels / self.groups * self.kernel_h * self.kernel_w) as u64
    }
}

thread_local! {
    static MAC_COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Runs `f` with convolution instrumentation on, returning the number of
/// multiply-accumulates executed by every `conv2d` call inside it. While
/// instrumented, convolutions run the brute-force reference loop, which
/// counts every tap including those that land on zero padding.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let prev = MAC_COUNTER.with(|c| c.replace(Some(0)));
    let r = f();
    let counted = MAC_COUNTER.with(|c| c.replace(prev)).unwrap_or(0);
    if let Some(outer) = prev {
        MAC_COUNTER.with(|c| c.set(Some(outer + counted)));
    }
    (r, counted)
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: Padding,
    dil: usize,
    groups: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn k_g(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn plane_out(&self) -> usize {
        self.oh * self.ow
    }
    fn plane_in(&self) -> usize {
        self.h * self.w
    }
    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }
    fn is_plain_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == Padding::default()
    }

    /// Output columns `ox` whose input column for kernel column `j` is in range.
    fn ox_range(&self, j: usize) -> (usize, usize) {
        axis_range(self.ow, self.w, self.stride, j * self.dil, self.pad.left)
    }
    fn oy_range(&self, i: usize) -> (usize, usize) {
        axis_range(self.oh, self.h, self.stride, i * self.dil, self.pad.top)
    }
}

/// Half-open range of output indices `o` with `0 <= o*s + off - pad < len`.
fn axis_range(out_len: usize, len: usize, s: usize, off: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > off { (pad - off).div_ceil(s) } else { 0 };
    let hi = if len + pad > off {
        ((len + pad - off - 1) / s + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn check_inputs(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    let (n, c, h, w) = x.dims4("conv2d")?;
    if c != spec.in_channels {
        return Err(TensorError::dim("conv2d", "channels", spec.in_channels, c));
    }
    let ws = spec.weight_shape();
    if weight.rank() != 4 {
        return Err(TensorError::Rank {
            op: "conv2d",
            expected: 4,
            shape: weight.shape().to_vec(),
        });
    }
    let axes = ["out_channels", "in_channels/groups", "kernel_h", "kernel_w"];
    for ((axis, &want), &got) in axes.iter().zip(ws.iter()).zip(weight.shape()) {
        if want != got {
            return Err(TensorError::dim("conv2d", axis, want, got));
        }
    }
    match (bias, spec.has_bias) {
        (Some(b), true) => {
            if b.numel() != spec.out_channels {
                return Err(TensorError::dim("conv2d", "bias", spec.out_channels, b.numel()));
            }
        }
        (None, false) => {}
        (Some(_), false) => return Err(TensorError::Config("conv2d: bias given but has_bias is false".into())),
        (None, true) => return Err(TensorError::Config("conv2d: has_bias is true but no bias given".into())),
    }
    let (oh, ow) = spec.output_hw(h, w)?;
    Ok(Geometry {
        n,
        cin: c,
        h,
        w,
        cout: spec.out_channels,
        kh: spec.kernel_h,
        kw: spec.kernel_w,
        stride: spec.stride,
        pad: spec.padding,
        dil: spec.dilation,
        groups: spec.groups,
        oh,
        ow,
    })
}

/// Convolution of an N×C×H×W input with an (out, in/groups, kh, kw) weight.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let g = check_inputs(x, weight, bias, spec)?;
    let out = {
        let xd = x.data();
        let wd = weight.data();
        let bd = bias.map(|b| b.data());
        let bslice = bd.as_deref();
        if MAC_COUNTER.with(|c| c.get().is_some()) {
            let (out, macs) = reference_kernel(&xd, &wd, bslice, &g);
            MAC_COUNTER.with(|c| c.set(c.get().map(|v| v + macs)));
            out
        } else if g.is_depthwise() {
            depthwise_forward(&xd, &wd, bslice, &g)
        } else {
            gemm_forward(&xd, &wd, bslice, &g)
        }
    };
    let shape = vec![g.n, g.cout, g.oh, g.ow];
    let mut parents = vec![x, weight];
    if let Some(b) = bias {
        parents.push(b);
    }
    let op: Option<Box<dyn Backward>> = tracking(&parents).then(|| Box::new(ConvBackward { geo: g }) as _);
    Ok(Tensor::from_op(shape, out, &parents, op))
}

struct ConvBackward {
    geo: Geometry,
}

impl Backward for ConvBackward {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let g = &self.geo;
        let x = &ctx.parents[0];
        let w = &ctx.parents[1];
        let bias = ctx.parents.get(2);
        let xd = x.data();
        let wd = w.data();
        let (dx, dw) = if g.is_depthwise() {
            depthwise_backward(&xd, &wd, ctx.grad, g, x.tracks(), w.tracks())
        } else {
            gemm_backward(&xd, &wd, ctx.grad, g, x.tracks(), w.tracks())
        };
        let mut out = vec![dx, dw];
        if let Some(b) = bias {
            out.push(b.tracks().then(|| bias_grad(ctx.grad, g)));
        }
        out
    }
}

fn bias_grad(grad: &[f64], g: &Geometry) -> Vec<f64> {
    let p = g.plane_out();
    let mut db = vec![0.0; g.cout];
    for n in 0..g.n {
        for (oc, acc) in db.iter_mut().enumerate() {
            let base = (n * g.cout + oc) * p;
            *acc += grad[base..base + p].iter().sum::<f64>();
        }
    }
    db
}

/// C = alpha·A·B + beta·C over strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + n - 1 < c.len());
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], g: &Geometry, col: &mut [f64]) {
    let p = g.plane_out();
    col.fill(0.0);
    for ic in 0..g.cin {
        let plane = &x[ic * g.plane_in()..(ic + 1) * g.plane_in()];
        for i in 0..g.kh {
            let (oy0, oy1) = g.oy_range(i);
            for j in 0..g.kw {
                let row = ((ic * g.kh + i) * g.kw + j) * p;
                let (ox0, ox1) = g.ox_range(j);
                if ox0 == ox1 {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + i * g.dil - g.pad.top;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut col[row + oy * g.ow..row + (oy + 1) * g.ow];
                    if g.stride == 1 {
                        let ix0 = ox0 + j * g.dil - g.pad.left;
                        dst[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            dst[ox] = src[ox * g.stride + j * g.dil - g.pad.left];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &Geometry, dx: &mut [f64]) {
    let p = g.plane_out();
    for ic in 0..g.cin {
        let plane = &mut dx[ic * g.plane_in()..(ic + 1) * g.plane_in()];
        for i in 0..g.kh {
            let (oy0, oy1) = g.oy_range(i);
            for j in 0..g.kw {
                let row = ((ic * g.kh + i) * g.kw + j) * p;
                let (ox0, ox1) = g.ox_range(j);
                if ox0 == ox1 {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + i * g.dil - g.pad.top;
                    let src = &col[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in ox0..ox1 {
                        dst[ox * g.stride + j * g.dil - g.pad.left] += src[ox];
                    }
                }
            }
        }
    }
}

fn gemm_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &Geometry) -> Vec<f64> {
    let p = g.plane_out();
    let (kg, cg) = (g.k_g(), g.cout_g());
    let mut out = vec![0.0; g.n * g.cout * p];
    let mut col = if g.is_plain_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.cin * g.kh * g.kw * p]
    };
    for n in 0..g.n {
        let xn = &x[n * g.cin * g.plane_in()..(n + 1) * g.cin * g.plane_in()];
        let cols: &[f64] = if g.is_plain_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut col);
            &col
        };
        let on = &mut out[n * g.cout * p..(n + 1) * g.cout * p];
        for grp in 0..g.groups {
            gemm(
                cg,
                kg,
                p,
                &w[grp * cg * kg..],
                (kg, 1),
                &cols[grp * kg * p..],
                (p, 1),
                0.0,
                &mut on[grp * cg * p..],
                p,
            );
        }
        if let Some(b) = bias {
            for (oc, &bv) in b.iter().enumerate() {
                on[oc * p..(oc + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

fn gemm_backward(
    x: &[f64],
    w: &[f64],
    grad: &[f64],
    g: &Geometry,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let p = g.plane_out();
    let (kg, cg) = (g.k_g(), g.cout_g());
    let pointwise = g.is_plain_pointwise();
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0; w.len()]);
    let mut col = vec![0.0; if pointwise && !need_dx { 0 } else { g.cin * g.kh * g.kw * p }];
    for n in 0..g.n {
        let xn = &x[n * g.cin * g.plane_in()..(n + 1) * g.cin * g.plane_in()];
        let gn = &grad[n * g.cout * p..(n + 1) * g.cout * p];
        if let Some(dw) = dw.as_mut() {
            let cols: &[f64] = if pointwise {
                xn
            } else {
                im2col(xn, g, &mut col);
                &col
            };
            for grp in 0..g.groups {
                // dW_g (cg×kg) += dOut_g (cg×p) · col_gᵀ (p×kg)
                gemm(
                    cg,
                    p,
                    kg,
                    &gn[grp * cg * p..],
                    (p, 1),
                    &cols[grp * kg * p..],
                    (1, p),
                    1.0,
                    &mut dw[grp * cg * kg..],
                    kg,
                );
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * g.cin * g.plane_in()..(n + 1) * g.cin * g.plane_in()];
            let target: &mut [f64] = if pointwise { dxn } else { &mut col };
            for grp in 0..g.groups {
                // dcol_g (kg×p) = W_gᵀ (kg×cg) · dOut_g (cg×p)
                gemm(
                    kg,
                    cg,
                    p,
                    &w[grp * cg * kg..],
                    (1, kg),
                    &gn[grp * cg * p..],
                    (p, 1),
                    if pointwise { 1.0 } else { 0.0 },
                    &mut target[grp * kg * p..],
                    p,
                );
            }
            if !pointwise {
                let dxn = &mut dx[n * g.cin * g.plane_in()..(n + 1) * g.cin * g.plane_in()];
                col2im(&col, g, dxn);
            }
        }
    }
    (dx, dw)
}

fn depthwise_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &Geometry) -> Vec<f64> {
    let (pi, po) = (g.plane_in(), g.plane_out());
    let mut out = vec![0.0; g.n * g.cout * po];
    for n in 0..g.n {
        for c in 0..g.cin {
            let xp = &x[(n * g.cin + c) * pi..(n * g.cin + c + 1) * pi];
            let op = &mut out[(n * g.cout + c) * po..(n * g.cout + c + 1) * po];
            if let Some(b) = bias {
                op.fill(b[c]);
            }
            for i in 0..g.kh {
                let (oy0, oy1) = g.oy_range(i);
                for j in 0..g.kw {
                    let wv = w[(c * g.kh + i) * g.kw + j];
                    let (ox0, ox1) = g.ox_range(j);
                    if ox0 == ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + i * g.dil - g.pad.top;
                        let src = &xp[iy * g.w..(iy + 1) * g.w];
                        let dst = &mut op[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let ix0 = ox0 + j * g.dil - g.pad.left;
                            for (d, s) in dst[ox0..ox1].iter_mut().zip(&src[ix0..]) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                dst[ox] += wv * src[ox * g.stride + j * g.dil - g.pad.left];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    grad: &[f64],
    g: &Geometry,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (pi, po) = (g.plane_in(), g.plane_out());
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0; w.len()]);
    for n in 0..g.n {
        for c in 0..g.cin {
            let xp = &x[(n * g.cin + c) * pi..(n * g.cin + c + 1) * pi];
            let gp = &grad[(n * g.cout + c) * po..(n * g.cout + c + 1) * po];
            for i in 0..g.kh {
                let (oy0, oy1) = g.oy_range(i);
                for j in 0..g.kw {
                    let widx = (c * g.kh + i) * g.kw + j;
                    let wv = w[widx];
                    let (ox0, ox1) = g.ox_range(j);
                    if ox0 == ox1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + i * g.dil - g.pad.top;
                        for ox in ox0..ox1 {
                            let ix = ox * g.stride + j * g.dil - g.pad.left;
                            let go = gp[oy * g.ow + ox];
                            acc += go * xp[iy * g.w + ix];
                            if let Some(dx) = dx.as_mut() {
                                dx[(n * g.cin + c) * pi + iy * g.w + ix] += wv * go;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw)
}

fn reference_kernel(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &Geometry) -> (Vec<f64>, u64) {
    let mut out = vec![0.0; g.n * g.cout * g.plane_out()];
    let mut macs = 0u64;
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    for n in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = bias.map_or(0.0, |b| b[oc]);
                    for icg in 0..cin_g {
                        let ic = grp * cin_g + icg;
                        for i in 0..g.kh {
                            for j in 0..g.kw {
                                let iy = (oy * g.stride + i * g.dil) as isize - g.pad.top as isize;
                                let ix = (ox * g.stride + j * g.dil) as isize - g.pad.left as isize;
                                let inside = iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w;
                                let xv = if inside {
                                    x[((n * g.cin + ic) * g.h + iy as usize) * g.w + ix as usize]
                                } else {
                                    0.0
                                };
                                acc += w[((oc * cin_g + icg) * g.kh + i) * g.kw + j] * xv;
                                macs += 1;
                            }
                        }
                    }
                    out[((n * g.cout + oc) * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
    }
    (out, macs)
}

/// Brute-force convolution by definition. Returns the output and the number
/// of multiply-accumulates performed. Records no gradient.
pub fn conv2d_reference(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<(Tensor, u64)> {
    let g = check_inputs(x, weight, bias, spec)?;
    let bd = bias.map(|b| b.to_vec());
    let (out, macs) = reference_kernel(&x.data(), &weight.data(), bd.as_deref(), &g);
    Ok((Tensor::new(&[g.n, g.cout, g.oh, g.ow], out)?, macs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |i| ((i * 7919) % 23) as f64 / 7.0 - 1.5)
    }

    #[test]
    fn ones_kernel_sums_ones() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, &ConvSpec::new(1, 1, 3, 3).with_bias(false)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let x = seq(&[2, 1, 5, 4]);
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let y = conv2d(&x, &w, None, &ConvSpec::pointwise(1, 1).with_bias(false)).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn output_size_formula() {
        let spec = ConvSpec::new(3, 4, 3, 3)
            .with_stride(2)
            .with_padding(Padding::uniform(1))
            .with_dilation(2);
        // floor((17 + 2 - 2*2 - 1)/2) + 1 = 8
        assert_eq!(spec.output_hw(17, 17).unwrap(), (8, 8));
    }

    #[test]
    fn same_padding_for_even_dilated_kernel() {
        let spec = ConvSpec::depthwise(2, 1, 4).with_dilation(3).same_padding();
        assert_eq!(spec.padding.left + spec.padding.right, 9);
        assert_eq!(spec.output_hw(16, 16).unwrap(), (16, 16));
    }

    #[test]
    fn bad_groups_is_config_error() {
        let x = seq(&[1, 3, 4, 4]);
        let w = seq(&[4, 1, 1, 1]);
        let err = conv2d(&x, &w, None, &ConvSpec::pointwise(3, 4).with_groups(2).with_bias(false)).unwrap_err();
        assert!(matches!(err, TensorError::Config(_)));
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let x = seq(&[1, 3, 4, 4]);
        let w = seq(&[4, 2, 1, 1]);
        let err = conv2d(&x, &w, None, &ConvSpec::pointwise(2, 4).with_bias(false)).unwrap_err();
        assert!(matches!(err, TensorError::Dimension { axis: "channels", .. }));
        let w = seq(&[4, 3, 1, 2]);
        let err = conv2d(&x, &w, None, &ConvSpec::pointwise(3, 4).with_bias(false)).unwrap_err();
        assert!(matches!(err, TensorError::Dimension { axis: "kernel_w", .. }));
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        let x = seq(&[1, 1, 2, 2]);
        let w = seq(&[1, 1, 3, 3]);
        let err = conv2d(&x, &w, None, &ConvSpec::new(1, 1, 3, 3).with_bias(false)).unwrap_err();
        assert!(matches!(err, TensorError::Dimension { axis: "height", .. }));
    }

    #[test]
    fn fast_paths_match_reference() {
        let cases = [
            ConvSpec::new(3, 5, 3, 3).with_padding(Padding::uniform(1)),
            ConvSpec::new(3, 4, 3, 3).with_stride(2).same_padding().with_bias(false),
            ConvSpec::new(4, 6, 3, 2).with_groups(2).with_dilation(2).same_padding(),
            ConvSpec::pointwise(4, 3),
            ConvSpec::depthwise(4, 1, 5).same_padding(),
            ConvSpec::depthwise(4, 4, 1).with_dilation(3).same_padding(),
            ConvSpec::depthwise(4, 2, 2).with_stride(2).with_bias(false),
            ConvSpec::new(2, 2, 1, 1).with_stride(2),
        ];
        for spec in cases {
            let x = seq(&[2, spec.in_channels, 9, 8]);
            let w = Tensor::from_fn(&spec.weight_shape(), |i| ((i * 31) % 11) as f64 / 5.0 - 1.0);
            let b = spec.has_bias.then(|| seq(&[spec.out_channels]));
            let fast = conv2d(&x, &w, b.as_ref(), &spec).unwrap();
            let (slow, macs) = conv2d_reference(&x, &w, b.as_ref(), &spec).unwrap();
            assert_eq!(fast.shape(), slow.shape(), "{spec:?}");
            for (a, r) in fast.to_vec().iter().zip(slow.to_vec()) {
                assert!((a - r).abs() < 1e-12, "{spec:?}: {a} vs {r}");
            }
            let (_, oh, ow) = (0, fast.shape()[2], fast.shape()[3]);
            assert_eq!(macs, spec.macs(2, oh, ow));
        }
    }

    #[test]
    fn count_macs_sees_nested_convs() {
        let x = seq(&[1, 2, 4, 4]);
        let w = seq(&[3, 2, 3, 3]);
        let spec = ConvSpec::new(2, 3, 3, 3).same_padding().with_bias(false);
        let (_, macs) = count_macs(|| {
            conv2d(&x, &w, None, &spec).unwrap();
            conv2d(&x, &w, None, &spec).unwrap();
        });
        assert_eq!(macs, 2 * spec.macs(1, 4, 4));
        // counter is off again
        let (_, none) = count_macs(|| ());
        assert_eq!(none, 0);
    }
}
