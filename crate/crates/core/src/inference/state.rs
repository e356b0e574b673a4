use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Recurrent update rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// `kv += λ^(-t) k vᵀ`, `o = λ^t qᵀ kv`. Overflows for long sequences.
    Origin,
    /// `kv = λ kv + k vᵀ`, `o = qᵀ kv`.
    #[default]
    Robust,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "origin" => Ok(Self::Origin),
            "robust" => Ok(Self::Robust),
            other => Err(Error::invalid(format!("unknown algorithm `{other}`"))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Origin => "origin",
            Algorithm::Robust => "robust",
        })
    }
}

/// Single-head `head_dim × head_dim` key-value state. Its size never depends
/// on how many tokens have been consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState<T: Scalar = f64> {
    kv: Tensor<T>,
    t: usize,
    lambda: f64,
    algorithm: Algorithm,
    first_non_finite: Option<usize>,
}

impl<T: Scalar> RecurrentState<T> {
    pub fn new(head_dim: usize, lambda: f64, algorithm: Algorithm) -> Result<Self> {
        if head_dim == 0 {
            return Err(Error::invalid("head_dim must be ≥ 1"));
        }
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::invalid(format!("decay rate {lambda} outside (0, 1]")));
        }
        Ok(Self { kv: Tensor::zeros(&[head_dim, head_dim]), t: 0, lambda, algorithm, first_non_finite: None })
    }

    /// Tokens consumed so far.
    pub fn position(&self) -> usize {
        self.t
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    pub fn head_dim(&self) -> usize {
        self.kv.rows()
    }

    pub fn kv(&self) -> &Tensor<T> {
        &self.kv
    }

    pub fn state_bytes(&self) -> usize {
        self.kv.size_bytes()
    }

    /// 1-based step at which the state or an output first became non-finite.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.first_non_finite
    }

    /// Replaces the state contents, e.g. when resuming from a snapshot.
    pub fn restore(&mut self, kv: Tensor<T>, t: usize) -> Result<()> {
        kv.check_same_shape(&self.kv, "recurrent state")?;
        self.kv = kv;
        self.t = t;
        self.first_non_finite = None;
        Ok(())
    }

    pub fn step(&mut self, q: &[T], k: &[T], v: &[T]) -> Result<Vec<T>> {
        match self.algorithm {
            Algorithm::Origin => self.origin_step(q, k, v),
            Algorithm::Robust => self.robust_step(q, k, v),
        }
    }

    pub fn origin_step(&mut self, q: &[T], k: &[T], v: &[T]) -> Result<Vec<T>> {
        self.expect(Algorithm::Origin, q, k, v)?;
        self.t += 1;
        let t = i32::try_from(self.t).map_err(|_| Error::OutOfRange(format!("position {}", self.t)))?;
        let lambda = T::of(self.lambda);
        self.outer_update(T::one(), lambda.powi(-t), k, v);
        let out = self.read(q, lambda.powi(t));
        self.note_finiteness(&out);
        Ok(out)
    }

    pub fn robust_step(&mut self, q: &[T], k: &[T], v: &[T]) -> Result<Vec<T>> {
        self.expect(Algorithm::Robust, q, k, v)?;
        self.t += 1;
        self.outer_update(T::of(self.lambda), T::one(), k, v);
        let out = self.read(q, T::one());
        self.note_finiteness(&out);
        Ok(out)
    }

    fn expect(&self, algorithm: Algorithm, q: &[T], k: &[T], v: &[T]) -> Result<()> {
        if self.algorithm != algorithm {
            return Err(Error::invalid(format!("{algorithm} step on a {} state", self.algorithm)));
        }
        let d = self.head_dim();
        if q.len() != d || k.len() != d || v.len() != d {
            return Err(Error::shape("recurrent step", &[q.len(), k.len(), v.len()], &[d, d, d]));
        }
        Ok(())
    }

    /// `kv = decay · kv + scale · k vᵀ`.
    fn outer_update(&mut self, decay: T, scale: T, k: &[T], v: &[T]) {
        let d = self.head_dim();
        for (i, &ki) in k.iter().enumerate() {
            let a = scale * ki;
            for (s, &vj) in self.kv.data_mut()[i * d..(i + 1) * d].iter_mut().zip(v) {
                *s = decay * *s + a * vj;
            }
        }
    }

    /// `factor · qᵀ kv`.
    fn read(&self, q: &[T], factor: T) -> Vec<T> {
        let d = self.head_dim();
        let mut out = vec![T::zero(); d];
        for (i, &qi) in q.iter().enumerate() {
            for (o, &s) in out.iter_mut().zip(self.kv.row(i)) {
                *o += qi * s;
            }
        }
        out.iter_mut().for_each(|o| *o *= factor);
        out
    }

    fn note_finiteness(&mut self, out: &[T]) {
        if self.first_non_finite.is_none() && !(out.iter().all(|v| v.is_finite()) && self.kv.all_finite()) {
            self.first_non_finite = Some(self.t);
        }
    }
}
