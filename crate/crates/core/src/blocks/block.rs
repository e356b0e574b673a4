use super::gla::{AttentionPath, GlaCache, GlaParams};
use super::norm::Norm;
use super::params::{join, ParamSet};
use super::sglu::{SgluCache, SgluParams};
use crate::error::Result;
use crate::numerics::Tensor;

/// Pre-norm residual layer: `X += GLA(Norm(X)); X += SGLU(Norm(X))`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub norm1: Norm,
    pub gla: GlaParams,
    pub norm2: Norm,
    pub sglu: SgluParams,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    x: Tensor,
    n1: Tensor,
    gla: GlaCache,
    h: Tensor,
    n2: Tensor,
    sglu: SgluCache,
}

impl BlockParams {
    pub fn forward(&self, x: &Tensor, path: &AttentionPath) -> Result<Tensor> {
        let n1 = self.norm1.forward(x)?;
        let mut h = self.gla.forward(&n1, path)?;
        h.add_assign(x)?;
        drop(n1);
        let mut out = self.sglu.forward(&self.norm2.forward(&h)?)?;
        out.add_assign(&h)?;
        Ok(out)
    }

    pub fn forward_cached(&self, x: &Tensor, path: &AttentionPath) -> Result<(Tensor, BlockCache)> {
        let n1 = self.norm1.forward(x)?;
        let (mut h, gla) = self.gla.forward_cached(&n1, path)?;
        h.add_assign(x)?;
        let n2 = self.norm2.forward(&h)?;
        let (mut out, sglu) = self.sglu.forward_cached(&n2)?;
        out.add_assign(&h)?;
        let cache = BlockCache { x: x.clone(), n1, gla, h, n2, sglu };
        Ok((out, cache))
    }

    pub fn backward(
        &self,
        cache: &BlockCache,
        d_out: &Tensor,
        path: &AttentionPath,
        grads: &mut BlockParams,
    ) -> Result<Tensor> {
        let d_n2 = self.sglu.backward(&cache.n2, &cache.sglu, d_out, &mut grads.sglu)?;
        let mut dh = self.norm2.backward(&cache.h, &d_n2, &mut grads.norm2)?;
        dh.add_assign(d_out)?;
        let d_n1 = self.gla.backward(&cache.n1, &cache.gla, &dh, path, &mut grads.gla)?;
        let mut dx = self.norm1.backward(&cache.x, &d_n1, &mut grads.norm1)?;
        dx.add_assign(&dh)?;
        Ok(dx)
    }
}

impl ParamSet for BlockParams {
    fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = self.norm1.params(&join(prefix, "norm1."));
        out.extend(self.gla.params(&join(prefix, "gla.")));
        out.extend(self.norm2.params(&join(prefix, "norm2.")));
        out.extend(self.sglu.params(&join(prefix, "sglu.")));
        out
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = self.norm1.params_mut(&join(prefix, "norm1."));
        out.extend(self.gla.params_mut(&join(prefix, "gla.")));
        out.extend(self.norm2.params_mut(&join(prefix, "norm2.")));
        out.extend(self.sglu.params_mut(&join(prefix, "sglu.")));
        out
    }
}
