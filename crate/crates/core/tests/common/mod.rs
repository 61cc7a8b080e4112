//! Shared test support: the central finite-difference oracle and small
//! builders used across the integration suites.

#![allow(dead_code)]

use robustsense_core::tensor::Tensor;

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

/// Central-difference gradient of `f` at `x`, one element at a time.
pub fn numerical_grad<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let original = probe[i];
        probe[i] = original + step;
        let plus = f(&probe);
        probe[i] = original - step;
        let minus = f(&probe);
        probe[i] = original;
        grad.push((plus - minus) / (2.0 * step));
    }
    grad
}

/// Relative disagreement, falling back to absolute for tiny gradients
/// (the O(step^2) truncation error of central differences).
pub fn grad_mismatch(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-6 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Assert an analytic/numeric gradient pair agrees element-wise and return
/// the number of elements checked.
pub fn assert_grads_close(op: &str, analytic: &[f64], numeric: &[f64]) -> usize {
    assert_eq!(analytic.len(), numeric.len(), "{op}: gradient lengths");
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let err = grad_mismatch(a, n);
        assert!(
            err <= FD_TOL,
            "{op}: element {i} analytic {a} vs numeric {n} (mismatch {err:.2e})"
        );
    }
    analytic.len()
}

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}
