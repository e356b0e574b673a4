use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::blocks::{AttentionPath, BlockCache, BlockParams, GlaParams, Norm, ParamSet, SgluParams};
use crate::error::{Error, Result};
use crate::numerics::io::Archive;
use crate::numerics::{matmul, matmul_a_bt, matmul_at_b, SeededRng, Tensor};

pub const MODEL_FORMAT: &str = "transnormer-model";

/// Embedding, a stack of residual blocks, a final norm and the LM head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub layers: Vec<BlockParams>,
    pub final_norm: Norm,
    /// Separate output projection `[d, vocab]`; `None` when tied to `embed`.
    pub head: Option<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
}

impl Model {
    /// Deterministic initialization from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, v) = (config.d_model, config.vocab_size);
        let std = config.init_std;
        let out_std = config.residual_std();
        let schedule = config.decay_schedule()?;
        let mut rng = SeededRng::new(config.seed);
        let embed = rng.normal(&[v, d], 0.0, std);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 1..=config.layers {
            let gla = GlaParams::init(d, schedule.layer_decays(l)?, config.gla_options(), &mut rng, std, out_std)?;
            let sglu = SgluParams::init(d, config.hidden(), config.glu_activation, &mut rng, std, out_std)?;
            layers.push(BlockParams {
                norm1: Norm::new(config.norm_kind(), d),
                gla,
                norm2: Norm::new(config.norm_kind(), d),
                sglu,
            });
        }
        let head = (!config.tie_embeddings).then(|| rng.normal(&[d, v], 0.0, std));
        Ok(Self { config: config.clone(), embed, layers, final_norm: Norm::new(config.norm_kind(), d), head })
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let vocab = self.config.vocab_size;
        match tokens.iter().find(|&&t| t as usize >= vocab) {
            Some(&id) => Err(Error::UnknownToken { id, vocab }),
            None => Ok(()),
        }
    }

    pub fn embed_tokens(&self, tokens: &[u32]) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        let d = self.config.d_model;
        let mut x = Tensor::zeros(&[tokens.len(), d]);
        for (i, &t) in tokens.iter().enumerate() {
            x.row_mut(i).copy_from_slice(self.embed.row(t as usize));
        }
        Ok(x)
    }

    /// Final norm and output projection of hidden states `[n, d]`.
    pub fn head_logits(&self, hidden: &Tensor) -> Result<Tensor> {
        let h = self.final_norm.forward(hidden)?;
        match &self.head {
            Some(w) => matmul(&h, w),
            None => matmul_a_bt(&h, &self.embed),
        }
    }

    pub fn forward_lm(&self, tokens: &[u32]) -> Result<Tensor> {
        self.forward_lm_with(tokens, &self.config.attention_path())
    }

    pub fn forward_lm_with(&self, tokens: &[u32], path: &AttentionPath) -> Result<Tensor> {
        let mut x = self.embed_tokens(tokens)?;
        for layer in &self.layers {
            x = layer.forward(&x, path)?;
        }
        self.head_logits(&x)
    }

    /// Logits and mean next-token cross-entropy.
    pub fn loss(&self, tokens: &[u32]) -> Result<(Tensor, f64)> {
        let logits = self.forward_lm(tokens)?;
        let losses = position_losses(&logits, tokens)?;
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        Ok((logits, mean))
    }

    /// Mean loss and its gradient with respect to every parameter.
    pub fn loss_and_grads(&self, tokens: &[u32]) -> Result<(f64, Model)> {
        self.loss_and_grads_with(tokens, &self.config.attention_path())
    }

    pub fn loss_and_grads_with(&self, tokens: &[u32], path: &AttentionPath) -> Result<(f64, Model)> {
        let x0 = self.embed_tokens(tokens)?;
        let mut caches: Vec<BlockCache> = Vec::with_capacity(self.layers.len());
        let mut x = x0;
        for layer in &self.layers {
            let (y, cache) = layer.forward_cached(&x, path)?;
            caches.push(cache);
            x = y;
        }
        let normed = self.final_norm.forward(&x)?;
        let logits = match &self.head {
            Some(w) => matmul(&normed, w)?,
            None => matmul_a_bt(&normed, &self.embed)?,
        };
        let (loss, d_logits) = cross_entropy(&logits, tokens)?;

        let mut grads = self.zeros_like();
        let d_normed = match &self.head {
            Some(w) => {
                grads.head.as_mut().expect("untied grads").add_assign(&matmul_at_b(&normed, &d_logits)?)?;
                matmul_a_bt(&d_logits, w)?
            }
            None => {
                grads.embed.add_assign(&matmul_at_b(&d_logits, &normed)?)?;
                matmul(&d_logits, &self.embed)?
            }
        };
        let mut dx = self.final_norm.backward(&x, &d_normed, &mut grads.final_norm)?;
        for ((layer, cache), g) in self.layers.iter().zip(&caches).zip(grads.layers.iter_mut()).rev() {
            dx = layer.backward(cache, &dx, path, g)?;
        }
        for (i, &t) in tokens.iter().enumerate() {
            let row = grads.embed.row_mut(t as usize);
            row.iter_mut().zip(dx.row(i)).for_each(|(a, b)| *a += b);
        }
        Ok((loss, grads))
    }

    pub fn num_params(&self) -> usize {
        ParamSet::num_params(self)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let manifest = Manifest { format: MODEL_FORMAT.to_string(), config: self.config.clone() };
        let mut archive = Archive::new(serde_json::to_string_pretty(&manifest)?);
        self.write_to(&mut archive, "");
        Ok(archive)
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(archive.manifest())?;
        if manifest.format != MODEL_FORMAT {
            return Err(Error::Format(format!("not a model checkpoint: `{}`", manifest.format)));
        }
        Self::from_archive_with(&manifest.config, archive, "")
    }

    /// Builds a model of shape `config` and fills it from tensors under
    /// `prefix`; any missing or misshapen tensor is an error.
    pub(crate) fn from_archive_with(config: &ModelConfig, archive: &Archive, prefix: &str) -> Result<Self> {
        let mut model = Self::init(&ModelConfig { init_std: 0.0, ..config.clone() })?;
        model.config = config.clone();
        model.read_from(archive, prefix)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

impl ParamSet for Model {
    fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = vec![(format!("{prefix}embed"), &self.embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.params(&format!("{prefix}layers.{l}.")));
        }
        out.extend(self.final_norm.params(&format!("{prefix}final_norm.")));
        if let Some(h) = &self.head {
            out.push((format!("{prefix}head"), h));
        }
        out
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![(format!("{prefix}embed"), &mut self.embed)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.extend(layer.params_mut(&format!("{prefix}layers.{l}.")));
        }
        out.extend(self.final_norm.params_mut(&format!("{prefix}final_norm.")));
        if let Some(h) = &mut self.head {
            out.push((format!("{prefix}head"), h));
        }
        out
    }
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

/// Cross-entropy of each prediction `logits[i]` against `tokens[i + 1]`.
pub fn position_losses(logits: &Tensor, tokens: &[u32]) -> Result<Vec<f64>> {
    let (n, vocab) = logits.dims2()?;
    if n != tokens.len() || n < 2 {
        return Err(Error::invalid(format!("loss needs ≥ 2 tokens matching {n} logit rows")));
    }
    tokens[1..]
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if t as usize >= vocab {
                return Err(Error::UnknownToken { id: t, vocab });
            }
            Ok(-log_softmax_at(logits.row(i), t as usize))
        })
        .collect()
}

/// Mean next-token cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, tokens: &[u32]) -> Result<(f64, Tensor)> {
    let losses = position_losses(logits, tokens)?;
    let count = losses.len() as f64;
    let mut grad = Tensor::zeros(logits.shape());
    for (i, &t) in tokens[1..].iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let g = grad.row_mut(i);
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - max).exp() / sum / count;
        }
        g[t as usize] -= 1.0 / count;
    }
    Ok((losses.iter().sum::<f64>() / count, grad))
}
