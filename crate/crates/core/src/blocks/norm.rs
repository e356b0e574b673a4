use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormVariant {
    #[default]
    SrmsNorm,
    RmsNorm,
    LayerNorm,
}

impl std::str::FromStr for NormVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "srmsnorm" | "srms" => Ok(Self::SrmsNorm),
            "rmsnorm" | "rms" => Ok(Self::RmsNorm),
            "layernorm" | "ln" => Ok(Self::LayerNorm),
            other => Err(Error::invalid(format!("unknown norm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormKind {
    pub variant: NormVariant,
    pub eps: f64,
}

impl Default for NormKind {
    fn default() -> Self {
        Self { variant: NormVariant::SrmsNorm, eps: DEFAULT_EPS }
    }
}

impl NormKind {
    pub fn new(variant: NormVariant, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::invalid(format!("norm eps must be positive, got {eps}")));
        }
        Ok(Self { variant, eps })
    }
}

/// `x · √d / max(‖x‖, eps)` applied to every trailing-axis vector.
pub fn srmsnorm(x: &Tensor, eps: f64) -> Tensor {
    let d = x.last_dim().max(1);
    let mut out = x.clone();
    for chunk in out.data_mut().chunks_mut(d) {
        srms_row(chunk, eps);
    }
    out
}

pub(crate) fn srms_row(row: &mut [f64], eps: f64) {
    let scale = (row.len() as f64).sqrt() / row_norm(row).max(eps);
    row.iter_mut().for_each(|v| *v *= scale);
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Backward of [`srmsnorm`] for one vector, written into `dx`.
pub(crate) fn srms_row_backward(x: &[f64], dy: &[f64], eps: f64, dx: &mut [f64]) {
    let root_d = (x.len() as f64).sqrt();
    let norm = row_norm(x);
    if norm > eps {
        let proj: f64 = x.iter().zip(dy).map(|(a, b)| a * b).sum::<f64>() / (norm * norm);
        for ((g, &xi), &dyi) in dx.iter_mut().zip(x).zip(dy) {
            *g = root_d / norm * (dyi - xi * proj);
        }
    } else {
        for (g, &dyi) in dx.iter_mut().zip(dy) {
            *g = root_d / eps * dyi;
        }
    }
}

pub fn srmsnorm_backward(x: &Tensor, dy: &Tensor, eps: f64) -> Result<Tensor> {
    x.check_same_shape(dy, "srmsnorm_backward")?;
    let d = x.last_dim().max(1);
    let mut dx = Tensor::zeros(x.shape());
    for ((xr, gr), out) in x.data().chunks(d).zip(dy.data().chunks(d)).zip(dx.data_mut().chunks_mut(d)) {
        srms_row_backward(xr, gr, eps, out);
    }
    Ok(dx)
}

/// A pre-norm layer with its learnable parameters, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub kind: NormKind,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

impl Norm {
    /// Unit weight and zero bias where the variant has them.
    pub fn new(kind: NormKind, d: usize) -> Self {
        let (weight, bias) = match kind.variant {
            NormVariant::SrmsNorm => (None, None),
            NormVariant::RmsNorm => (Some(Tensor::ones(&[d])), None),
            NormVariant::LayerNorm => (Some(Tensor::ones(&[d])), Some(Tensor::zeros(&[d]))),
        };
        Self { kind, weight, bias }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.last_dim();
        self.check_width(d)?;
        let eps = self.kind.eps;
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            match self.kind.variant {
                NormVariant::SrmsNorm => srms_row(row, eps),
                NormVariant::RmsNorm => {
                    let r = rms(row, eps);
                    row.iter_mut().for_each(|v| *v /= r);
                }
                NormVariant::LayerNorm => {
                    let (mean, sd) = moments(row, eps);
                    row.iter_mut().for_each(|v| *v = (*v - mean) / sd);
                }
            }
            if let Some(w) = &self.weight {
                row.iter_mut().zip(w.data()).for_each(|(v, w)| *v *= w);
            }
            if let Some(b) = &self.bias {
                row.iter_mut().zip(b.data()).for_each(|(v, b)| *v += b);
            }
        }
        Ok(out)
    }

    /// Input gradient, accumulating parameter gradients into `grads`.
    pub fn backward(&self, x: &Tensor, dy: &Tensor, grads: &mut Norm) -> Result<Tensor> {
        x.check_same_shape(dy, "norm_backward")?;
        let d = x.last_dim();
        self.check_width(d)?;
        let eps = self.kind.eps;
        let mut dx = Tensor::zeros(x.shape());
        let mut g = vec![0.0; d];
        for ((xr, dyr), out) in x.data().chunks(d).zip(dy.data().chunks(d)).zip(dx.data_mut().chunks_mut(d)) {
            if let Some(db) = grads.bias.as_mut() {
                db.data_mut().iter_mut().zip(dyr).for_each(|(a, b)| *a += b);
            }
            g.copy_from_slice(dyr);
            match self.kind.variant {
                NormVariant::SrmsNorm => srms_row_backward(xr, &g, eps, out),
                NormVariant::RmsNorm => {
                    let r = rms(xr, eps);
                    self.weight_backward(&mut g, grads, xr.iter().map(|v| v / r));
                    let proj = xr.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() / (d as f64 * r * r);
                    for ((o, &xi), &gi) in out.iter_mut().zip(xr).zip(&g) {
                        *o = (gi - xi * proj) / r;
                    }
                }
                NormVariant::LayerNorm => {
                    let (mean, sd) = moments(xr, eps);
                    self.weight_backward(&mut g, grads, xr.iter().map(|v| (v - mean) / sd));
                    let gm = g.iter().sum::<f64>() / d as f64;
                    let proj = xr.iter().zip(&g).map(|(a, b)| (a - mean) / sd * b).sum::<f64>() / d as f64;
                    for ((o, &xi), &gi) in out.iter_mut().zip(xr).zip(&g) {
                        *o = (gi - gm - (xi - mean) / sd * proj) / sd;
                    }
                }
            }
        }
        Ok(dx)
    }

    /// Accumulates `dw += g ⊙ x̂` and turns `g` into the gradient w.r.t. `x̂`.
    fn weight_backward(&self, g: &mut [f64], grads: &mut Norm, xhat: impl Iterator<Item = f64>) {
        if let (Some(w), Some(dw)) = (&self.weight, grads.weight.as_mut()) {
            for (((gi, &wi), dwi), xh) in g.iter_mut().zip(w.data()).zip(dw.data_mut()).zip(xhat) {
                *dwi += *gi * xh;
                *gi *= wi;
            }
        }
    }

    fn check_width(&self, d: usize) -> Result<()> {
        match &self.weight {
            Some(w) if w.len() != d => Err(Error::shape("norm", &[d], w.shape())),
            _ if d == 0 => Err(Error::invalid("norm over an empty axis")),
            _ => Ok(()),
        }
    }
}

fn rms(row: &[f64], eps: f64) -> f64 {
    (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64 + eps).sqrt()
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, (var + eps).sqrt())
}

impl ParamSet for Norm {
    fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(w) = &self.weight {
            out.push((format!("{prefix}weight"), w));
        }
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}bias"), b));
        }
        out
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        if let Some(w) = &mut self.weight {
            out.push((format!("{prefix}weight"), w));
        }
        if let Some(b) = &mut self.bias {
            out.push((format!("{prefix}bias"), b));
        }
        out
    }
}
