use serde::{Deserialize, Serialize};

use super::activation::Activation;
use super::norm::{srms_row, srms_row_backward, DEFAULT_EPS};
use super::params::{join, ParamSet};
use crate::attention::{
    lightning_backward, lightning_forward, reference_backward, reference_forward, AttentionGrads, AttentionInputs,
    BlockConfig,
};
use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_a_bt, matmul_at_b, SeededRng, Tensor};
use crate::positional::{rotate, rotate_backward, LrpeParams, DEFAULT_THETA_BASE};

/// Width over which the post-attention SRMSNorm is taken.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// One norm over all merged heads.
    #[default]
    Merged,
    /// An independent norm per head.
    PerHead,
}

/// How the per-head masked attention is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttentionPath {
    Reference,
    Lightning(BlockConfig),
}

impl Default for AttentionPath {
    fn default() -> Self {
        AttentionPath::Lightning(BlockConfig::default())
    }
}

impl AttentionPath {
    fn forward(&self, inputs: &AttentionInputs<'_, f64>) -> Result<Tensor> {
        match self {
            AttentionPath::Reference => reference_forward(inputs),
            AttentionPath::Lightning(cfg) => lightning_forward(inputs, cfg),
        }
    }

    fn backward(&self, inputs: &AttentionInputs<'_, f64>, d_out: &Tensor) -> Result<AttentionGrads> {
        match self {
            AttentionPath::Reference => reference_backward(inputs, d_out),
            AttentionPath::Lightning(cfg) => lightning_backward(inputs, d_out, cfg),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlaOptions {
    pub activation: Activation,
    pub use_gate: bool,
    pub norm_mode: NormMode,
    pub eps: f64,
    pub theta_base: f64,
}

impl Default for GlaOptions {
    fn default() -> Self {
        Self {
            activation: Activation::OnePlusElu,
            use_gate: true,
            norm_mode: NormMode::Merged,
            eps: DEFAULT_EPS,
            theta_base: DEFAULT_THETA_BASE,
        }
    }
}

/// Multi-head gated linear attention.
///
/// Projections map `d_in → d_inner`, split into `heads` equal heads; `w_o`
/// maps `d_inner → d_out`. The unsharded layer has all three equal to `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlaParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_u: Option<Tensor>,
    pub w_o: Tensor,
    /// Rotation angles, one row of `head_dim / 2` per head.
    pub theta: Tensor,
    pub lambdas: Vec<f64>,
    pub activation: Activation,
    pub norm_mode: NormMode,
    pub eps: f64,
}

/// Pre-activation query/key projections plus values and gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GlaProjections {
    pub xq: Tensor,
    pub xk: Tensor,
    pub v: Tensor,
    pub u: Option<Tensor>,
}

/// Intermediates kept by [`GlaParams::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct GlaCache {
    pub proj: GlaProjections,
    q_heads: Vec<Tensor>,
    k_heads: Vec<Tensor>,
    v_heads: Vec<Tensor>,
    /// Merged attention output before the norm.
    pub attn: Tensor,
    pub normed: Tensor,
    gated: Tensor,
}

impl GlaParams {
    /// Normal(0, `std`) projections, `out_std` for `w_o`, geometric angles.
    pub fn init(
        d: usize,
        lambdas: Vec<f64>,
        opts: GlaOptions,
        rng: &mut SeededRng,
        std: f64,
        out_std: f64,
    ) -> Result<Self> {
        let heads = lambdas.len();
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::invalid(format!("model dim {d} not divisible by {heads} heads")));
        }
        let hd = d / heads;
        let lrpe = LrpeParams::geometric(hd, opts.theta_base)?;
        let theta = Tensor::from_fn(&[heads, hd / 2], |i| lrpe.theta[i % (hd / 2)]);
        let params = Self {
            w_q: rng.normal(&[d, d], 0.0, std),
            w_k: rng.normal(&[d, d], 0.0, std),
            w_v: rng.normal(&[d, d], 0.0, std),
            w_u: opts.use_gate.then(|| rng.normal(&[d, d], 0.0, std)),
            w_o: rng.normal(&[d, d], 0.0, out_std),
            theta,
            lambdas,
            activation: opts.activation,
            norm_mode: opts.norm_mode,
            eps: opts.eps,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn heads(&self) -> usize {
        self.lambdas.len()
    }

    pub fn d_in(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_inner(&self) -> usize {
        self.w_q.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w_o.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.d_inner() / self.heads().max(1)
    }

    pub fn use_gate(&self) -> bool {
        self.w_u.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let (d_in, d_inner) = self.w_q.dims2()?;
        let h = self.heads();
        if h == 0 || d_inner % h != 0 || !(d_inner / h).is_multiple_of(2) {
            return Err(Error::invalid(format!("{d_inner} features cannot be split into {h} heads of even width")));
        }
        for w in [&self.w_k, &self.w_v].into_iter().chain(self.w_u.as_ref()) {
            if w.shape() != [d_in, d_inner] {
                return Err(Error::shape("gla projection", w.shape(), &[d_in, d_inner]));
            }
        }
        if self.w_o.rank() != 2 || self.w_o.rows() != d_inner {
            return Err(Error::shape("gla output", self.w_o.shape(), &[d_inner, self.d_out()]));
        }
        if self.theta.shape() != [h, d_inner / h / 2] {
            return Err(Error::shape("gla theta", self.theta.shape(), &[h, d_inner / h / 2]));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l > 0.0 && **l <= 1.0)) {
            return Err(Error::invalid(format!("decay rate {l} outside (0, 1]")));
        }
        Ok(())
    }

    pub fn project(&self, x: &Tensor) -> Result<GlaProjections> {
        Ok(GlaProjections {
            xq: matmul(x, &self.w_q)?,
            xk: matmul(x, &self.w_k)?,
            v: matmul(x, &self.w_v)?,
            u: self.w_u.as_ref().map(|w| matmul(x, w)).transpose()?,
        })
    }

    pub fn forward(&self, x: &Tensor, path: &AttentionPath) -> Result<Tensor> {
        Ok(self.forward_cached(x, path)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor, path: &AttentionPath) -> Result<(Tensor, GlaCache)> {
        self.validate()?;
        let (n, d_in) = x.dims2()?;
        if d_in != self.d_in() {
            return Err(Error::shape("gla input", x.shape(), &[n, self.d_in()]));
        }
        if n == 0 {
            return Err(Error::invalid("gla needs at least one token"));
        }
        self.mix(self.project(x)?, path)
    }

    /// Everything after the input projections: activation, rotation,
    /// per-head attention, norm, gate and output projection.
    pub fn mix(&self, proj: GlaProjections, path: &AttentionPath) -> Result<(Tensor, GlaCache)> {
        let (n, d_inner) = proj.xq.dims2()?;
        let hd = self.head_dim();
        let q = self.activation.forward(&proj.xq);
        let k = self.activation.forward(&proj.xk);
        let mut attn = Tensor::zeros(&[n, d_inner]);
        let (mut q_heads, mut k_heads, mut v_heads) = (Vec::new(), Vec::new(), Vec::new());
        for (h, &lambda) in self.lambdas.iter().enumerate() {
            let theta = self.theta.row(h);
            let qh = rotate(&q.column_block(h * hd, hd)?, theta, 0)?;
            let kh = rotate(&k.column_block(h * hd, hd)?, theta, 0)?;
            let vh = proj.v.column_block(h * hd, hd)?;
            let oh = path.forward(&AttentionInputs::new(&qh, &kh, &vh, lambda)?)?;
            attn.set_column_block(h * hd, &oh)?;
            q_heads.push(qh);
            k_heads.push(kh);
            v_heads.push(vh);
        }
        let mut normed = attn.clone();
        for seg in normed.data_mut().chunks_mut(self.norm_width()) {
            srms_row(seg, self.eps);
        }
        let gated = match &proj.u {
            Some(u) => normed.zip_map(u, "gla gate", |a, b| a * b)?,
            None => normed.clone(),
        };
        let out = matmul(&gated, &self.w_o)?;
        let cache = GlaCache { proj, q_heads, k_heads, v_heads, attn, normed, gated };
        Ok((out, cache))
    }

    pub(crate) fn norm_width(&self) -> usize {
        match self.norm_mode {
            NormMode::Merged => self.d_inner(),
            NormMode::PerHead => self.head_dim(),
        }
    }

    /// Full backward; returns the input gradient and accumulates parameter
    /// gradients into `grads`.
    pub fn backward(
        &self,
        x: &Tensor,
        cache: &GlaCache,
        d_out: &Tensor,
        path: &AttentionPath,
        grads: &mut GlaParams,
    ) -> Result<Tensor> {
        let dproj = self.mix_backward(cache, d_out, path, grads)?;
        self.projection_backward(x, &dproj, grads)
    }

    /// Backward of [`GlaParams::mix`]: gradients with respect to the
    /// projections. Accumulates `w_o` and angle gradients.
    pub fn mix_backward(
        &self,
        cache: &GlaCache,
        d_out: &Tensor,
        path: &AttentionPath,
        grads: &mut GlaParams,
    ) -> Result<GlaProjections> {
        let (n, d_inner) = cache.attn.dims2()?;
        let hd = self.head_dim();
        grads.w_o.add_assign(&matmul_at_b(&cache.gated, d_out)?)?;
        let d_gated = matmul_a_bt(d_out, &self.w_o)?;
        let (d_normed, du) = match &cache.proj.u {
            Some(u) => (
                d_gated.zip_map(u, "gla gate", |g, u| g * u)?,
                Some(d_gated.zip_map(&cache.normed, "gla gate", |g, y| g * y)?),
            ),
            None => (d_gated, None),
        };
        let mut d_attn = Tensor::zeros(&[n, d_inner]);
        let w = self.norm_width();
        for ((xs, gs), out) in
            cache.attn.data().chunks(w).zip(d_normed.data().chunks(w)).zip(d_attn.data_mut().chunks_mut(w))
        {
            srms_row_backward(xs, gs, self.eps, out);
        }
        let mut dq = Tensor::zeros(&[n, d_inner]);
        let mut dk = Tensor::zeros(&[n, d_inner]);
        let mut dv = Tensor::zeros(&[n, d_inner]);
        for (h, &lambda) in self.lambdas.iter().enumerate() {
            let (qh, kh, vh) = (&cache.q_heads[h], &cache.k_heads[h], &cache.v_heads[h]);
            let g = path.backward(&AttentionInputs::new(qh, kh, vh, lambda)?, &d_attn.column_block(h * hd, hd)?)?;
            let theta = self.theta.row(h);
            let mut dtheta = vec![0.0; hd / 2];
            dq.set_column_block(h * hd, &rotate_backward(&g.dq, qh, theta, 0, &mut dtheta)?)?;
            dk.set_column_block(h * hd, &rotate_backward(&g.dk, kh, theta, 0, &mut dtheta)?)?;
            dv.set_column_block(h * hd, &g.dv)?;
            grads.theta.row_mut(h).iter_mut().zip(&dtheta).for_each(|(a, b)| *a += b);
        }
        Ok(GlaProjections {
            xq: self.activation.backward(&cache.proj.xq, &dq)?,
            xk: self.activation.backward(&cache.proj.xk, &dk)?,
            v: dv,
            u: du,
        })
    }

    /// Backward of [`GlaParams::project`].
    pub fn projection_backward(&self, x: &Tensor, dproj: &GlaProjections, grads: &mut GlaParams) -> Result<Tensor> {
        grads.w_q.add_assign(&matmul_at_b(x, &dproj.xq)?)?;
        grads.w_k.add_assign(&matmul_at_b(x, &dproj.xk)?)?;
        grads.w_v.add_assign(&matmul_at_b(x, &dproj.v)?)?;
        let mut dx = matmul_a_bt(&dproj.xq, &self.w_q)?;
        dx.add_assign(&matmul_a_bt(&dproj.xk, &self.w_k)?)?;
        dx.add_assign(&matmul_a_bt(&dproj.v, &self.w_v)?)?;
        if let (Some(w_u), Some(du), Some(gu)) = (&self.w_u, &dproj.u, grads.w_u.as_mut()) {
            gu.add_assign(&matmul_at_b(x, du)?)?;
            dx.add_assign(&matmul_a_bt(du, w_u)?)?;
        }
        Ok(dx)
    }
}

impl ParamSet for GlaParams {
    fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out =
            vec![(join(prefix, "w_q"), &self.w_q), (join(prefix, "w_k"), &self.w_k), (join(prefix, "w_v"), &self.w_v)];
        if let Some(u) = &self.w_u {
            out.push((join(prefix, "w_u"), u));
        }
        out.push((join(prefix, "w_o"), &self.w_o));
        out.push((join(prefix, "theta"), &self.theta));
        out
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            (join(prefix, "w_q"), &mut self.w_q),
            (join(prefix, "w_k"), &mut self.w_k),
            (join(prefix, "w_v"), &mut self.w_v),
        ];
        if let Some(u) = &mut self.w_u {
            out.push((join(prefix, "w_u"), u));
        }
        out.push((join(prefix, "w_o"), &mut self.w_o));
        out.push((join(prefix, "theta"), &mut self.theta));
        out
    }
}
