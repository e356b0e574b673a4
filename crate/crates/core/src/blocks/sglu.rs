use super::activation::Activation;
use super::params::{join, ParamSet};
use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_a_bt, matmul_at_b, SeededRng, Tensor};

pub const DEFAULT_HIDDEN_RATIO: f64 = 8.0 / 3.0;

/// `d · ratio` rounded up to a multiple of 8.
pub fn hidden_width(d: usize, ratio: f64) -> usize {
    let raw = (d as f64 * ratio / 8.0 - 1e-9).ceil().max(1.0) as usize;
    raw * 8
}

/// Gated channel mixer `(act(X W_v) ⊙ X W_u) W_o`, with `act` the identity
/// unless an ablation asks otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct SgluParams {
    pub w_v: Tensor,
    pub w_u: Tensor,
    pub w_o: Tensor,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct SgluCache {
    xv: Tensor,
    xu: Tensor,
    hidden: Tensor,
}

impl SgluParams {
    pub fn init(
        d: usize,
        e: usize,
        activation: Activation,
        rng: &mut SeededRng,
        std: f64,
        out_std: f64,
    ) -> Result<Self> {
        let p = Self {
            w_v: rng.normal(&[d, e], 0.0, std),
            w_u: rng.normal(&[d, e], 0.0, std),
            w_o: rng.normal(&[e, d], 0.0, out_std),
            activation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn hidden(&self) -> usize {
        self.w_v.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, e) = self.w_v.dims2()?;
        if e == 0 {
            return Err(Error::invalid("channel mixer needs a hidden width ≥ 1"));
        }
        if self.w_u.shape() != [d, e] {
            return Err(Error::shape("sglu w_u", self.w_u.shape(), &[d, e]));
        }
        if self.w_o.rank() != 2 || self.w_o.rows() != e {
            return Err(Error::shape("sglu w_o", self.w_o.shape(), &[e, d]));
        }
        if self.activation == Activation::OnePlusElu {
            return Err(Error::invalid("channel mixer activation must be none or swish"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, SgluCache)> {
        self.validate()?;
        let xv = matmul(x, &self.w_v)?;
        let xu = matmul(x, &self.w_u)?;
        let hidden = self.activation.forward(&xv).zip_map(&xu, "sglu gate", |a, b| a * b)?;
        let out = matmul(&hidden, &self.w_o)?;
        Ok((out, SgluCache { xv, xu, hidden }))
    }

    pub fn backward(&self, x: &Tensor, cache: &SgluCache, d_out: &Tensor, grads: &mut SgluParams) -> Result<Tensor> {
        grads.w_o.add_assign(&matmul_at_b(&cache.hidden, d_out)?)?;
        let dh = matmul_a_bt(d_out, &self.w_o)?;
        let a = self.activation.forward(&cache.xv);
        let dxu = dh.zip_map(&a, "sglu gate", |g, a| g * a)?;
        let da = dh.zip_map(&cache.xu, "sglu gate", |g, u| g * u)?;
        let dxv = self.activation.backward(&cache.xv, &da)?;
        grads.w_v.add_assign(&matmul_at_b(x, &dxv)?)?;
        grads.w_u.add_assign(&matmul_at_b(x, &dxu)?)?;
        let mut dx = matmul_a_bt(&dxv, &self.w_v)?;
        dx.add_assign(&matmul_a_bt(&dxu, &self.w_u)?)?;
        Ok(dx)
    }
}

impl ParamSet for SgluParams {
    fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![(join(prefix, "w_v"), &self.w_v), (join(prefix, "w_u"), &self.w_u), (join(prefix, "w_o"), &self.w_o)]
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![
            (join(prefix, "w_v"), &mut self.w_v),
            (join(prefix, "w_u"), &mut self.w_u),
            (join(prefix, "w_o"), &mut self.w_o),
        ]
    }
}
