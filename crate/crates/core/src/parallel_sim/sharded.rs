use super::ledger::{CollectiveLedger, Pass};
use super::{split, unsplit, ShardPlan, SplitAxis};
use crate::blocks::{AttentionPath, GlaCache, GlaParams, GlaProjections, NormMode, ParamSet, SgluCache, SgluParams};
use crate::error::{Error, Result};
use crate::numerics::ops::{matmul, matmul_a_bt, matmul_at_b};
use crate::numerics::Tensor;

/// SGLU with `W_v`, `W_u` split by columns and `W_o` by rows. Each shard is an
/// ordinary [`SgluParams`] over a slice of the hidden width.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedSglu {
    plan: ShardPlan,
    pub shards: Vec<SgluParams>,
}

impl ShardedSglu {
    pub fn new(params: &SgluParams, plan: ShardPlan) -> Result<Self> {
        params.validate()?;
        let w = plan.world();
        let (v, u, o) = (
            split(&params.w_v, SplitAxis::Columns, w)?,
            split(&params.w_u, SplitAxis::Columns, w)?,
            split(&params.w_o, SplitAxis::Rows, w)?,
        );
        let shards = v
            .into_iter()
            .zip(u)
            .zip(o)
            .map(|((w_v, w_u), w_o)| SgluParams { w_v, w_u, w_o, activation: params.activation })
            .collect();
        Ok(Self { plan, shards })
    }

    pub fn plan(&self) -> ShardPlan {
        self.plan
    }

    pub fn unshard(&self) -> Result<SgluParams> {
        Ok(SgluParams {
            w_v: unsplit(&self.shards.iter().map(|s| s.w_v.clone()).collect::<Vec<_>>(), SplitAxis::Columns)?,
            w_u: unsplit(&self.shards.iter().map(|s| s.w_u.clone()).collect::<Vec<_>>(), SplitAxis::Columns)?,
            w_o: unsplit(&self.shards.iter().map(|s| s.w_o.clone()).collect::<Vec<_>>(), SplitAxis::Rows)?,
            activation: self.shards[0].activation,
        })
    }

    /// Parameter bytes held by each worker.
    pub fn worker_param_bytes(&self) -> Vec<usize> {
        self.shards.iter().map(param_bytes).collect()
    }

    pub fn forward(&self, x: &Tensor, ledger: &mut CollectiveLedger) -> Result<Tensor> {
        Ok(self.forward_cached(x, ledger)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor, ledger: &mut CollectiveLedger) -> Result<(Tensor, Vec<SgluCache>)> {
        let results = self.plan.run(|w| self.shards[w].forward_cached(x))?;
        let (parts, caches): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        Ok((ledger.all_reduce(Pass::Forward, parts)?, caches))
    }

    /// Returns the input gradient and the gradient of the unsharded weights.
    pub fn backward(
        &self,
        x: &Tensor,
        caches: &[SgluCache],
        d_out: &Tensor,
        ledger: &mut CollectiveLedger,
    ) -> Result<(Tensor, SgluParams)> {
        check_workers(caches.len(), self.plan)?;
        let results = self.plan.run(|w| {
            let mut g = self.shards[w].zeros_like();
            let dx = self.shards[w].backward(x, &caches[w], d_out, &mut g)?;
            Ok((dx, g))
        })?;
        let (parts, grads): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        let dx = ledger.all_reduce(Pass::Backward, parts)?;
        let grads = ShardedSglu { plan: self.plan, shards: grads }.unshard()?;
        Ok((dx, grads))
    }
}

/// One worker's slice of a GLA layer: whole heads, with the query, key,
/// value and gate projections for those heads packed into a single matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GlaShard {
    /// `[d_in × k·width]` with `k` = 4 when gated and 3 otherwise.
    pub qkvu: Tensor,
    /// Per-worker layer over the owned heads. Its projection matrices are the
    /// column blocks of `qkvu` and are used only for geometry.
    pub local: GlaParams,
}

impl GlaShard {
    fn width(&self) -> usize {
        self.local.d_inner()
    }

    fn project(&self, x: &Tensor) -> Result<GlaProjections> {
        let packed = matmul(x, &self.qkvu)?;
        let w = self.width();
        Ok(GlaProjections {
            xq: packed.column_block(0, w)?,
            xk: packed.column_block(w, w)?,
            v: packed.column_block(2 * w, w)?,
            u: self.local.use_gate().then(|| packed.column_block(3 * w, w)).transpose()?,
        })
    }

    /// Bytes of the weights this worker actually multiplies with.
    pub fn param_bytes(&self) -> usize {
        self.qkvu.size_bytes() + self.local.w_o.size_bytes() + self.local.theta.size_bytes()
    }
}

/// GLA with heads distributed across workers and `W_o` split by rows. The
/// output norm must act per head so that no worker needs another's heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedGla {
    plan: ShardPlan,
    pub shards: Vec<GlaShard>,
}

impl ShardedGla {
    pub fn new(params: &GlaParams, plan: ShardPlan) -> Result<Self> {
        params.validate()?;
        if params.norm_mode != NormMode::PerHead {
            return Err(Error::invalid("sharded GLA needs the per-head output norm; the merged norm spans all heads"));
        }
        let w = plan.world();
        let heads = params.heads();
        if !heads.is_multiple_of(w) {
            return Err(Error::invalid(format!("{heads} heads cannot be split across {w} workers")));
        }
        let per = heads / w;
        let q = split(&params.w_q, SplitAxis::Columns, w)?;
        let k = split(&params.w_k, SplitAxis::Columns, w)?;
        let v = split(&params.w_v, SplitAxis::Columns, w)?;
        let u = params.w_u.as_ref().map(|u| split(u, SplitAxis::Columns, w)).transpose()?;
        let o = split(&params.w_o, SplitAxis::Rows, w)?;
        let theta = split(&params.theta, SplitAxis::Rows, w)?;
        let shards = (0..w)
            .map(|i| {
                let w_u = u.as_ref().map(|u| u[i].clone());
                let mut blocks = vec![&q[i], &k[i], &v[i]];
                if let Some(wu) = &w_u {
                    blocks.push(wu);
                }
                let qkvu = Tensor::concat_columns(&blocks)?;
                let local = GlaParams {
                    w_q: q[i].clone(),
                    w_k: k[i].clone(),
                    w_v: v[i].clone(),
                    w_u,
                    w_o: o[i].clone(),
                    theta: theta[i].clone(),
                    lambdas: params.lambdas[i * per..(i + 1) * per].to_vec(),
                    activation: params.activation,
                    norm_mode: params.norm_mode,
                    eps: params.eps,
                };
                local.validate()?;
                Ok(GlaShard { qkvu, local })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { plan, shards })
    }

    pub fn plan(&self) -> ShardPlan {
        self.plan
    }

    pub fn worker_param_bytes(&self) -> Vec<usize> {
        self.shards.iter().map(GlaShard::param_bytes).collect()
    }

    /// Reassembles the unsharded layer from the packed per-worker weights.
    pub fn unshard(&self) -> Result<GlaParams> {
        let packed: Vec<GlaProjections> =
            self.shards.iter().map(|s| unpack(&s.qkvu, s.width(), s.local.use_gate())).collect::<Result<_>>()?;
        self.assemble(&packed, |s| &s.local.w_o, |s| &s.local.theta)
    }

    fn assemble<'a>(
        &'a self,
        packed: &[GlaProjections],
        w_o: impl Fn(&'a GlaShard) -> &'a Tensor,
        theta: impl Fn(&'a GlaShard) -> &'a Tensor,
    ) -> Result<GlaParams> {
        let gather = |f: &dyn Fn(&GlaProjections) -> &Tensor| -> Result<Tensor> {
            unsplit(&packed.iter().map(|p| f(p).clone()).collect::<Vec<_>>(), SplitAxis::Columns)
        };
        let first = &self.shards[0].local;
        Ok(GlaParams {
            w_q: gather(&|p| &p.xq)?,
            w_k: gather(&|p| &p.xk)?,
            w_v: gather(&|p| &p.v)?,
            w_u: if first.use_gate() { Some(gather(&|p| p.u.as_ref().unwrap())?) } else { None },
            w_o: unsplit(&self.shards.iter().map(|s| w_o(s).clone()).collect::<Vec<_>>(), SplitAxis::Rows)?,
            theta: unsplit(&self.shards.iter().map(|s| theta(s).clone()).collect::<Vec<_>>(), SplitAxis::Rows)?,
            lambdas: self.shards.iter().flat_map(|s| s.local.lambdas.iter().copied()).collect(),
            activation: first.activation,
            norm_mode: first.norm_mode,
            eps: first.eps,
        })
    }

    pub fn forward(&self, x: &Tensor, path: &AttentionPath, ledger: &mut CollectiveLedger) -> Result<Tensor> {
        Ok(self.forward_cached(x, path, ledger)?.0)
    }

    pub fn forward_cached(
        &self,
        x: &Tensor,
        path: &AttentionPath,
        ledger: &mut CollectiveLedger,
    ) -> Result<(Tensor, Vec<GlaCache>)> {
        let (n, d) = x.dims2()?;
        if n == 0 || d != self.shards[0].qkvu.rows() {
            return Err(Error::shape("sharded gla input", x.shape(), &[n.max(1), self.shards[0].qkvu.rows()]));
        }
        let results = self.plan.run(|w| {
            let s = &self.shards[w];
            s.local.mix(s.project(x)?, path)
        })?;
        let (parts, caches): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        Ok((ledger.all_reduce(Pass::Forward, parts)?, caches))
    }

    /// Returns the input gradient and the gradient of the unsharded layer.
    pub fn backward(
        &self,
        x: &Tensor,
        caches: &[GlaCache],
        d_out: &Tensor,
        path: &AttentionPath,
        ledger: &mut CollectiveLedger,
    ) -> Result<(Tensor, GlaParams)> {
        check_workers(caches.len(), self.plan)?;
        let results = self.plan.run(|w| {
            let s = &self.shards[w];
            let mut g = s.local.zeros_like();
            let dproj = s.local.mix_backward(&caches[w], d_out, path, &mut g)?;
            let mut blocks = vec![&dproj.xq, &dproj.xk, &dproj.v];
            if let Some(du) = &dproj.u {
                blocks.push(du);
            }
            let dpacked = Tensor::concat_columns(&blocks)?;
            let d_qkvu = matmul_at_b(x, &dpacked)?;
            let dx = matmul_a_bt(&dpacked, &s.qkvu)?;
            Ok((dx, (unpack(&d_qkvu, s.width(), s.local.use_gate())?, g)))
        })?;
        let (parts, grads): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        let dx = ledger.all_reduce(Pass::Backward, parts)?;
        let (packed, locals): (Vec<_>, Vec<_>) = grads.into_iter().unzip();
        let grad_shards = ShardedGla {
            plan: self.plan,
            shards: locals
                .into_iter()
                .zip(&self.shards)
                .map(|(mut g, s)| {
                    g.lambdas = s.local.lambdas.clone();
                    GlaShard { qkvu: Tensor::zeros(&[0, 0]), local: g }
                })
                .collect(),
        };
        let grads = grad_shards.assemble(&packed, |s| &s.local.w_o, |s| &s.local.theta)?;
        Ok((dx, grads))
    }
}

fn unpack(packed: &Tensor, width: usize, gated: bool) -> Result<GlaProjections> {
    Ok(GlaProjections {
        xq: packed.column_block(0, width)?,
        xk: packed.column_block(width, width)?,
        v: packed.column_block(2 * width, width)?,
        u: gated.then(|| packed.column_block(3 * width, width)).transpose()?,
    })
}

fn param_bytes<P: ParamSet>(p: &P) -> usize {
    let mut total = 0;
    p.visit("", &mut |_, t| total += t.size_bytes());
    total
}

fn check_workers(got: usize, plan: ShardPlan) -> Result<()> {
    if got != plan.world() {
        return Err(Error::invalid(format!("{got} caches for {} workers", plan.world())));
    }
    Ok(())
}
