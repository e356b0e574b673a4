//! Decay rates, decay-causal masks and LRPE rotations.
//!
//! Head and layer indices are 1-based here, so the last layer
//! (`l == num_layers`) gets a decay of exactly 1 when the layer temperature
//! is enabled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Fixed (non-learnable) per-head, per-layer decay rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecaySchedule {
    pub num_heads: usize,
    pub num_layers: usize,
    /// Multiplies the head rate by `1 - l/L`.
    pub use_temperature: bool,
}

impl DecaySchedule {
    pub fn new(num_heads: usize, num_layers: usize, use_temperature: bool) -> Result<Self> {
        if num_heads == 0 || num_layers == 0 {
            return Err(Error::invalid("decay schedule needs at least one head and one layer"));
        }
        Ok(Self { num_heads, num_layers, use_temperature })
    }

    /// `exp(-(8h/H) · (1 - l/L))`, or `exp(-8h/H)` without the temperature.
    pub fn decay_rate(&self, h: usize, l: usize) -> Result<f64> {
        if !(1..=self.num_heads).contains(&h) {
            return Err(Error::OutOfRange(format!("head {h} not in 1..={}", self.num_heads)));
        }
        if !(1..=self.num_layers).contains(&l) {
            return Err(Error::OutOfRange(format!("layer {l} not in 1..={}", self.num_layers)));
        }
        let head_rate = 8.0 * h as f64 / self.num_heads as f64;
        let layer_rate = if self.use_temperature { 1.0 - l as f64 / self.num_layers as f64 } else { 1.0 };
        Ok((-head_rate * layer_rate).exp())
    }

    /// Decays of every head in layer `l` (1-based), ordered by head.
    pub fn layer_decays(&self, l: usize) -> Result<Vec<f64>> {
        (1..=self.num_heads).map(|h| self.decay_rate(h, l)).collect()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::invalid(format!("decay rate {lambda} outside (0, 1]")));
    }
    Ok(())
}

/// `λ^k` for `k = 0..n`, evaluated as `exp(k · ln λ)`.
pub fn decay_powers(n: usize, lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    let ln = lambda.ln();
    Ok((0..n).map(|k| (k as f64 * ln).exp()).collect())
}

/// Lower-triangular `[n, n]` mask with `M[s][t] = λ^(s-t)` for `s ≥ t`.
pub fn build_decay_mask<T: Scalar>(n: usize, lambda: f64) -> Result<Tensor<T>> {
    if n == 0 {
        return Err(Error::invalid("mask length must be at least 1"));
    }
    let powers = decay_powers(n, lambda)?;
    Ok(Tensor::from_fn(&[n, n], |idx| {
        let (s, t) = (idx / n, idx % n);
        if s >= t {
            T::of(powers[s - t])
        } else {
            T::zero()
        }
    }))
}

/// Rotation angles for one head. Dimension pair `(2j, 2j+1)` of the row at
/// absolute position `p` is rotated by `theta[j] · p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrpeParams {
    pub theta: Vec<f64>,
}

pub const DEFAULT_THETA_BASE: f64 = 10_000.0;

impl LrpeParams {
    pub fn new(theta: Vec<f64>) -> Self {
        Self { theta }
    }

    /// Geometric ladder `θ_j = base^(-2j / head_dim)`.
    pub fn geometric(head_dim: usize, base: f64) -> Result<Self> {
        check_head_dim(head_dim)?;
        let theta = (0..head_dim / 2).map(|j| base.powf(-2.0 * j as f64 / head_dim as f64)).collect();
        Ok(Self { theta })
    }

    pub fn zeros(head_dim: usize) -> Result<Self> {
        check_head_dim(head_dim)?;
        Ok(Self { theta: vec![0.0; head_dim / 2] })
    }

    pub fn head_dim(&self) -> usize {
        2 * self.theta.len()
    }
}

fn check_head_dim(head_dim: usize) -> Result<()> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(Error::invalid(format!("head_dim must be even and positive, got {head_dim}")));
    }
    Ok(())
}

pub fn apply_lrpe<T: Scalar>(x: &Tensor<T>, params: &LrpeParams, position_offset: usize) -> Result<Tensor<T>> {
    rotate(x, &params.theta, position_offset)
}

/// Rotates each row of `x: [n, 2·theta.len()]`; row `r` sits at position
/// `offset + r`.
pub fn rotate<T: Scalar>(x: &Tensor<T>, theta: &[f64], offset: usize) -> Result<Tensor<T>> {
    let (n, d) = x.dims2()?;
    check_head_dim(d)?;
    if d != 2 * theta.len() {
        return Err(Error::shape("lrpe", x.shape(), &[n, 2 * theta.len()]));
    }
    let mut out = x.clone();
    for r in 0..n {
        rotate_row(out.row_mut(r), theta, offset + r);
    }
    Ok(out)
}

/// In-place rotation of one row at absolute `position`.
pub fn rotate_row<T: Scalar>(row: &mut [T], theta: &[f64], position: usize) {
    let p = position as f64;
    for (j, &th) in theta.iter().enumerate() {
        let (sin, cos) = (th * p).sin_cos();
        let (sin, cos) = (T::of(sin), T::of(cos));
        let (a, b) = (row[2 * j], row[2 * j + 1]);
        row[2 * j] = a * cos - b * sin;
        row[2 * j + 1] = a * sin + b * cos;
    }
}

/// Backward of [`rotate`]. Given the rotated rows `y` and the upstream
/// gradient `dy`, returns the input gradient and accumulates the angle
/// gradient into `dtheta`.
pub fn rotate_backward(dy: &Tensor, y: &Tensor, theta: &[f64], offset: usize, dtheta: &mut [f64]) -> Result<Tensor> {
    dy.check_same_shape(y, "lrpe_backward")?;
    let (n, d) = dy.dims2()?;
    if d != 2 * theta.len() || dtheta.len() != theta.len() {
        return Err(Error::shape("lrpe_backward", dy.shape(), &[n, 2 * theta.len()]));
    }
    let mut dx = dy.clone();
    for r in 0..n {
        let p = (offset + r) as f64;
        let yr = y.row(r);
        let g = dx.row_mut(r);
        for (j, &th) in theta.iter().enumerate() {
            let (sin, cos) = (th * p).sin_cos();
            let (g0, g1) = (g[2 * j], g[2 * j + 1]);
            // dy/dangle = (-y1, y0)
            dtheta[j] += p * (g1 * yr[2 * j] - g0 * yr[2 * j + 1]);
            g[2 * j] = g0 * cos + g1 * sin;
            g[2 * j + 1] = -g0 * sin + g1 * cos;
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff, ops::dot, SeededRng};

    #[test]
    fn spot_values() {
        let s = DecaySchedule::new(8, 24, true).unwrap();
        assert!((s.decay_rate(4, 12).unwrap() - (-2.0f64).exp()).abs() < 1e-15);
        assert!((s.decay_rate(8, 12).unwrap() - (-4.0f64).exp()).abs() < 1e-15);
        assert!((s.decay_rate(4, 12).unwrap() - 0.135335).abs() < 5e-7);
        assert!((s.decay_rate(8, 12).unwrap() - 0.018316).abs() < 5e-7);
        for h in 1..=8 {
            assert_eq!(s.decay_rate(h, 24).unwrap(), 1.0);
        }
    }

    #[test]
    fn without_temperature_last_layer_still_decays() {
        let s = DecaySchedule::new(4, 2, false).unwrap();
        assert!((s.decay_rate(2, 2).unwrap() - (-4.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_indices() {
        let s = DecaySchedule::new(4, 2, true).unwrap();
        assert!(s.decay_rate(0, 1).is_err());
        assert!(s.decay_rate(5, 1).is_err());
        assert!(s.decay_rate(1, 3).is_err());
        assert!(DecaySchedule::new(0, 2, true).is_err());
    }

    #[test]
    fn monotone_in_layer_and_head() {
        let s = DecaySchedule::new(8, 6, true).unwrap();
        for h in 1..=8 {
            for l in 1..6 {
                assert!(s.decay_rate(h, l).unwrap() <= s.decay_rate(h, l + 1).unwrap());
            }
        }
        for l in 1..6 {
            for h in 1..8 {
                assert!(s.decay_rate(h, l).unwrap() > s.decay_rate(h + 1, l).unwrap());
            }
        }
    }

    #[test]
    fn masks() {
        let m = build_decay_mask::<f64>(3, 1.0).unwrap();
        assert_eq!(m.data(), &[1., 0., 0., 1., 1., 0., 1., 1., 1.]);
        let m = build_decay_mask::<f64>(3, 0.5).unwrap();
        let want = [1., 0., 0., 0.5, 1., 0., 0.25, 0.5, 1.];
        assert!(m.data().iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(build_decay_mask::<f64>(1, 0.3).unwrap().data(), &[1.0]);
        assert!(build_decay_mask::<f64>(3, 0.0).is_err());
        assert!(build_decay_mask::<f64>(3, 1.5).is_err());
    }

    #[test]
    fn mask_separates_into_per_token_factors() {
        let lambda: f64 = 0.8;
        let n = 12;
        let m = build_decay_mask::<f64>(n, lambda).unwrap();
        for s in 0..n {
            for t in 0..=s {
                let sep = lambda.powi(s as i32) * lambda.powi(-(t as i32));
                assert!((m.data()[s * n + t] - sep).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_angles_are_identity_and_rotation_preserves_norm() {
        let mut rng = SeededRng::new(9);
        let x: Tensor = rng.normal(&[5, 6], 0.0, 1.0);
        let z = LrpeParams::zeros(6).unwrap();
        assert_eq!(apply_lrpe(&x, &z, 3).unwrap(), x);
        let p = LrpeParams::new(vec![0.3, -1.1, 2.5]);
        let y = apply_lrpe(&x, &p, 7).unwrap();
        for r in 0..5 {
            let a = dot(x.row(r), x.row(r)).sqrt();
            let b = dot(y.row(r), y.row(r)).sqrt();
            assert!((a - b).abs() < 1e-12);
        }
        assert!(apply_lrpe(&Tensor::<f64>::zeros(&[2, 3]), &p, 0).is_err());
    }

    #[test]
    fn quarter_turn_example() {
        let p = LrpeParams::new(vec![std::f64::consts::FRAC_PI_2]);
        let q = Tensor::<f64>::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let qr = apply_lrpe(&q, &p, 1).unwrap();
        let kr = apply_lrpe(&q, &p, 0).unwrap();
        assert!(dot(qr.row(0), kr.row(0)).abs() < 1e-15);
    }

    #[test]
    fn inner_product_depends_only_on_offset() {
        // exhaustive for d = 2, positions 0..8, against q^T R(θ(s-t)) k
        let mut rng = SeededRng::new(4);
        for trial in 0..6 {
            let theta = vec![rng.next_f64() * 4.0 - 2.0 + trial as f64];
            let p = LrpeParams::new(theta.clone());
            let q: Tensor = rng.normal(&[1, 2], 0.0, 1.0);
            let k: Tensor = rng.normal(&[1, 2], 0.0, 1.0);
            for s in 0..8 {
                for t in 0..8 {
                    let qs = apply_lrpe(&q, &p, s).unwrap();
                    let kt = apply_lrpe(&k, &p, t).unwrap();
                    let got = dot(qs.row(0), kt.row(0));
                    let a = theta[0] * (s as f64 - t as f64);
                    let (qd, kd) = (q.data(), k.data());
                    // R(-a) k, since qᵀR(θs)ᵀR(θt)k = qᵀR(θ(t-s))k
                    let rk0 = kd[0] * a.cos() + kd[1] * a.sin();
                    let rk1 = -kd[0] * a.sin() + kd[1] * a.cos();
                    let want = qd[0] * rk0 + qd[1] * rk1;
                    assert!((got - want).abs() < 1e-12, "s={s} t={t}");
                }
            }
        }
    }

    #[test]
    fn rotation_backward_matches_finite_differences() {
        let mut rng = SeededRng::new(21);
        let x: Tensor = rng.normal(&[4, 6], 0.0, 1.0);
        let w: Tensor = rng.normal(&[4, 6], 0.0, 1.0);
        let theta = vec![0.4, -0.9, 1.7];
        let offset = 3;
        let loss = |x: &Tensor, th: &[f64]| -> f64 {
            let y = rotate(x, th, offset).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let y = rotate(&x, &theta, offset).unwrap();
        let mut dtheta = vec![0.0; 3];
        let dx = rotate_backward(&w, &y, &theta, offset, &mut dtheta).unwrap();
        let num_dx = finite_diff::gradient(&x, 1e-6, |xp| loss(xp, &theta));
        assert!(dx.max_abs_diff(&num_dx).unwrap() < 1e-7);
        for j in 0..3 {
            let num = finite_diff::central(1e-6, |delta| {
                let mut th = theta.clone();
                th[j] += delta;
                loss(&x, &th)
            });
            assert!((num - dtheta[j]).abs() < 1e-6, "theta {j}: {num} vs {}", dtheta[j]);
        }
    }
}
