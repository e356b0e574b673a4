//! Central finite differences for checking hand-written backward passes.
//!
//! These only ever call the forward function, so they stay independent of
//! any analytic gradient they are compared against.

use super::tensor::Tensor;

/// `(f(x + h) - f(x - h)) / 2h`, where `eval(delta)` evaluates the loss with
/// the probed coordinate shifted by `delta`.
pub fn central(step: f64, mut eval: impl FnMut(f64) -> f64) -> f64 {
    (eval(step) - eval(-step)) / (2.0 * step)
}

/// Numerical gradient of `f` with respect to every entry of `x`.
pub fn gradient(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        grad.data_mut()[i] = central(step, |delta| {
            probe.data_mut()[i] = orig + delta;
            let v = f(&probe);
            probe.data_mut()[i] = orig;
            v
        });
    }
    grad
}

/// Relative disagreement between an analytic and a numerical derivative:
/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps entries that are
/// essentially zero from being judged on rounding noise alone.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst [`relative_error`] over all entries, with the flat index where it
/// occurs.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> (f64, usize) {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .enumerate()
        .map(|(i, (&a, &n))| (relative_error(a, n, floor), i))
        .fold((0.0, 0), |best, cur| if cur.0 > best.0 { cur } else { best })
}
