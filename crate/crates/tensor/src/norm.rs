use crate::error::{Result, TensorError};
use crate::tensor::{tracking, Backward, BackwardCtx, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Infer,
}

/// Per-channel batch-norm state. `weight` and `bias` are learnable; the
/// running statistics are plain buffers updated in place during training.
#[derive(Debug, Clone)]
pub struct BatchNormState {
    pub weight: Tensor,
    pub bias: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    /// Scale 1, shift 0, running mean 0 and variance 1.
    pub fn identity(channels: usize) -> Self {
        BatchNormState {
            weight: Tensor::ones(&[channels]).requiring_grad(),
            bias: Tensor::zeros(&[channels]).requiring_grad(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.numel()
    }
}

pub fn batch_norm(x: &Tensor, state: &BatchNormState, mode: NormMode) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("batch_norm")?;
    for (axis, t) in [
        ("weight", &state.weight),
        ("bias", &state.bias),
        ("running_mean", &state.running_mean),
        ("running_var", &state.running_var),
    ] {
        if t.numel() != c {
            return Err(TensorError::dim("batch_norm", axis, c, t.numel()));
        }
    }
    let plane = h * w;
    let count = n * plane;
    let xd = x.data();
    let gamma = state.weight.data();
    let beta = state.bias.data();

    let (mean, var) = match mode {
        NormMode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += xd[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>();
                }
                let m = s / count as f64;
                let mut v = 0.0;
                for b in 0..n {
                    v += xd[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                        .iter()
                        .map(|x| (x - m) * (x - m))
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = v / count as f64;
            }
            let mut rm = state.running_mean.data_mut();
            let mut rv = state.running_var.data_mut();
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            for ch in 0..c {
                rm[ch] = (1.0 - state.momentum) * rm[ch] + state.momentum * mean[ch];
                rv[ch] = (1.0 - state.momentum) * rv[ch] + state.momentum * var[ch] * unbias;
            }
            (mean, var)
        }
        NormMode::Infer => (state.running_mean.to_vec(), state.running_var.to_vec()),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                let v = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = v;
                out[i] = gamma[ch] * v + beta[ch];
            }
        }
    }
    drop((xd, gamma, beta));
    let parents = [x, &state.weight, &state.bias];
    let op: Option<Box<dyn Backward>> = tracking(&parents).then(|| {
        Box::new(BatchNormBackward {
            mode,
            xhat,
            inv_std,
            n,
            c,
            plane,
        }) as _
    });
    Ok(Tensor::from_op(vec![n, c, h, w], out, &parents, op))
}

struct BatchNormBackward {
    mode: NormMode,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    n: usize,
    c: usize,
    plane: usize,
}

impl Backward for BatchNormBackward {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (n, c, plane) = (self.n, self.c, self.plane);
        let g = ctx.grad;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    dgamma[ch] += g[i] * self.xhat[i];
                    dbeta[ch] += g[i];
                }
            }
        }
        let dx = ctx.parents[0].tracks().then(|| {
            let gamma = ctx.parents[1].data();
            let count = (n * plane) as f64;
            let mut dx = vec![0.0; g.len()];
            for ch in 0..c {
                let k = gamma[ch] * self.inv_std[ch];
                let (mg, mgx) = (dbeta[ch] / count, dgamma[ch] / count);
                for b in 0..n {
                    let base = (b * c + ch) * plane;
                    for i in base..base + plane {
                        dx[i] = match self.mode {
                            NormMode::Train => k * (g[i] - mg - self.xhat[i] * mgx),
                            NormMode::Infer => k * g[i],
                        };
                    }
                }
            }
            dx
        });
        vec![
            dx,
            ctx.parents[1].tracks().then_some(dgamma),
            ctx.parents[2].tracks().then_some(dbeta),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infer_applies_affine_running_stats() {
        let mut st = BatchNormState::identity(1);
        st.weight = Tensor::full(&[1], 2.0);
        st.bias = Tensor::full(&[1], 1.0);
        let x = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = batch_norm(&x, &st, NormMode::Infer).unwrap();
        assert!((y.item() - 3.0).abs() < 1e-4);
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let x = Tensor::from_fn(&[3, 2, 4, 4], |i| ((i * 37) % 17) as f64 * 0.7 - 3.0 + (i % 2) as f64 * 10.0);
        let st = BatchNormState::identity(2);
        let y = batch_norm(&x, &st, NormMode::Train).unwrap();
        let yd = y.to_vec();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| yd[(b * 2 + ch) * 16..(b * 2 + ch + 1) * 16].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6, "mean {m}");
            // epsilon shrinks the variance slightly below one
            let xv: Vec<f64> = (0..3)
                .flat_map(|b| x.to_vec()[(b * 2 + ch) * 16..(b * 2 + ch + 1) * 16].to_vec())
                .collect();
            let xm = xv.iter().sum::<f64>() / 48.0;
            let raw_var = xv.iter().map(|x| (x - xm).powi(2)).sum::<f64>() / 48.0;
            let expected = raw_var / (raw_var + BN_EPS);
            assert!((v - expected).abs() < 1e-6, "var {v} vs {expected}");
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let x = Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64);
        let st = BatchNormState::identity(1);
        batch_norm(&x, &st, NormMode::Train).unwrap();
        // mean 3.5, unbiased var 6.0
        assert!((st.running_mean.item() - 0.35).abs() < 1e-12);
        assert!((st.running_var.item() - (0.9 + 0.6)).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::ones(&[1, 3, 2, 2]);
        assert!(matches!(
            batch_norm(&x, &BatchNormState::identity(2), NormMode::Infer),
            Err(TensorError::Dimension { .. })
        ));
    }
}
