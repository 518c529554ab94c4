//! Central finite-difference gradient checks.

use crate::rng::Rng;
use crate::tensor::Tensor;

/// Relative error floor so that two near-zero gradients compare as equal.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every coordinate.
pub fn numerical_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let plus = f(&probe);
            probe[i] = orig - eps;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, REL_ERR_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

/// Compares `analytic` against central differences of the scalar function `f` at `x`.
pub fn grad_check(f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], eps: f64) -> f64 {
    let numeric = numerical_gradient(f, x, eps);
    max_relative_error(analytic, &numeric)
}

/// Gradient check for a tensor-to-tensor op. The op output is reduced to a
/// scalar through a fixed random projection `L = sum_i r_i y_i`, whose
/// upstream gradient `r` is handed to `backward`.
pub fn grad_check_op(
    forward: impl Fn(&Tensor<f64>) -> Tensor<f64>,
    backward: impl Fn(&Tensor<f64>, &Tensor<f64>) -> Tensor<f64>,
    x: &Tensor<f64>,
    eps: f64,
    rng: &mut Rng,
) -> f64 {
    let y = forward(x);
    let r = Tensor::from_fn(y.shape(), |_| rng.uniform() * 2.0 - 1.0);
    let analytic = backward(x, &r);
    let shape = x.shape().to_vec();
    let loss = |v: &[f64]| {
        let xt = Tensor::new(&shape, v.to_vec()).expect("same shape");
        forward(&xt).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    grad_check(loss, x.data(), analytic.data(), eps)
}
