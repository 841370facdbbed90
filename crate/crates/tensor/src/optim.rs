use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// One momentum-SGD update of a flat parameter buffer:
/// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v`.
pub fn sgd_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grad.len() != param.len() {
        return Err(TensorError::dim("sgd_step", "grad", param.len(), grad.len()));
    }
    if velocity.len() != param.len() {
        return Err(TensorError::dim("sgd_step", "velocity", param.len(), velocity.len()));
    }
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum SGD over a fixed parameter list, one zero-initialised velocity
/// buffer per parameter.
#[derive(Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    params: Vec<Tensor>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: Vec<Tensor>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Sgd {
            lr,
            momentum,
            weight_decay,
            params,
            velocity,
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Applies accumulated gradients; parameters without a gradient see a
    /// zero gradient (weight decay and momentum still apply).
    pub fn step(&mut self) -> Result<()> {
        for (p, v) in self.params.iter().zip(self.velocity.iter_mut()) {
            let grad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            sgd_step(&mut p.data_mut(), &grad, v, self.lr, self.momentum, self.weight_decay)?;
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(Tensor::zero_grad);
    }
}
