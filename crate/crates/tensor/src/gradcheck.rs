//! Central finite differences, the oracle for every backward rule.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate of `x`.
///
/// `x` is perturbed in place and restored bit-exactly after each probe, so
/// `f` may read it directly (for example a model parameter).
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(TensorError::Config(format!("finite difference step must be positive, got {h}")));
    }
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let original = x.data()[i];
        x.data_mut()[i] = original + h;
        let plus = f(x);
        x.data_mut()[i] = original - h;
        let minus = f(x);
        x.data_mut()[i] = original;
        let (plus, minus) = (plus?, minus?);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::Numeric(format!(
                "non-finite objective while probing coordinate {i}: f(+h) = {plus}, f(-h) = {minus}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape(), grad)
}

/// Largest absolute deviation scaled by the largest gradient magnitude.
/// The scale is floored at 1e-6 so that all-zero gradients compare by
/// absolute error.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-6);
    let worst = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    worst / scale
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error over all checked inputs.
    pub max_rel_error: f64,
    /// Per-input relative errors, in the order given.
    pub per_input: Vec<f64>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Compares the backward pass of `loss` against finite differences for each
/// tensor in `inputs`. `loss` must rebuild its graph from the current data
/// on every call.
pub fn check_gradients<F>(mut loss: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: FnMut() -> Result<Tensor>,
{
    for t in inputs {
        t.zero_grad();
    }
    let l = loss()?;
    if l.numel() != 1 {
        return Err(TensorError::Usage("gradient check needs a scalar objective".into()));
    }
    l.backward()?;
    drop(l);
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut coordinates = 0;
    for t in inputs {
        let analytic = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
        let numeric = finite_diff_grad(|_| loss().map(|v| v.item()), t, h)?;
        per_input.push(relative_error(&analytic, &numeric.data()));
        coordinates += t.numel();
        t.zero_grad();
    }
    Ok(GradCheckReport {
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
        coordinates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{mul, sum, weighted_sum};

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|x| Ok(x.data().iter().map(|v| v * v).sum()), &x, 1e-3).unwrap();
        let g = g.to_vec();
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);
        assert_eq!(x.to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn linear_functions_match_for_any_step() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 4.0]).unwrap();
        for h in [1e-1, 1.0, 8.0] {
            let g = finite_diff_grad(|x| Ok(3.0 * x.data()[0] - 2.0 * x.data()[2] + 1.0), &x, h).unwrap();
            for (a, b) in g.to_vec().iter().zip([3.0, 0.0, -2.0]) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn non_finite_objective_is_numeric_error() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let err = finite_diff_grad(|x| Ok(1.0 / x.data()[0].abs().min(0.0)), &x, 1e-3).unwrap_err();
        assert!(matches!(err, TensorError::Numeric(_)));
    }

    #[test]
    fn check_gradients_on_polynomial() {
        let x = Tensor::parameter(&[3], vec![0.3, -0.7, 1.1]).unwrap();
        let report = check_gradients(
            || weighted_sum(&mul(&x, &x)?, &[1.0, 2.0, 3.0]),
            std::slice::from_ref(&x),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.passes(1e-8), "{report:?}");
        let report = check_gradients(|| Ok(sum(&x)), std::slice::from_ref(&x), DEFAULT_STEP).unwrap();
        assert!(report.max_rel_error < 1e-10);
    }
}
