use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::lm::Model;
use crate::blocks::ParamSet;
use crate::error::{Error, Result};
use crate::numerics::io::Archive;
use crate::numerics::SeededRng;

pub const TRAIN_FORMAT: &str = "transnormer-train";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Tokens per sampled sequence; each yields `seq_len - 1` predictions.
    pub seq_len: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Floor of the cosine schedule as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            seq_len: 64,
            lr: 3e-3,
            warmup_steps: 20,
            min_lr_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len < 2 {
            return Err(Error::invalid("need batch_size ≥ 1 and seq_len ≥ 2"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be finite and ≥ 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::invalid("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }

    /// Linear warmup to `lr`, then cosine decay to `lr · min_lr_ratio`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cosine)
    }
}

/// Random windows of `seq_len` tokens, determined by `(seed, step)` only.
pub fn sample_batch(corpus: &[u32], cfg: &TrainConfig, step: usize) -> Result<Vec<Vec<u32>>> {
    if corpus.len() < 2 {
        return Err(Error::invalid("corpus needs at least two tokens"));
    }
    let len = cfg.seq_len.min(corpus.len());
    let mut rng = SeededRng::derive(cfg.seed, step as u64);
    Ok((0..cfg.batch_size)
        .map(|_| {
            let start = rng.below(corpus.len() - len + 1);
            corpus[start..start + len].to_vec()
        })
        .collect())
}

/// Parameters, Adam moments and progress of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub first_moment: Model,
    pub second_moment: Model,
    pub step: usize,
    pub losses: Vec<f64>,
    pub train: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    train: TrainConfig,
    step: usize,
    losses: Vec<f64>,
}

impl TrainState {
    pub fn new(model: Model, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        Ok(Self {
            first_moment: model.zeros_like(),
            second_moment: model.zeros_like(),
            model,
            step: 0,
            losses: Vec::new(),
            train,
        })
    }

    /// Mean loss and gradient over a batch. Sequences run in parallel and
    /// their gradients are summed in batch order.
    pub fn batch_gradients(&self, batch: &[Vec<u32>]) -> Result<(f64, Model)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let parts: Vec<Result<(f64, Model)>> = batch.par_iter().map(|seq| self.model.loss_and_grads(seq)).collect();
        let mut total = self.model.zeros_like();
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for part in parts {
            let (l, g) = part?;
            loss += l * scale;
            for ((_, acc), (_, gi)) in total.params_mut("").into_iter().zip(g.params("")) {
                acc.axpy(scale, gi)?;
            }
        }
        Ok((loss, total))
    }

    /// One Adam update. Returns the batch loss from before the update.
    pub fn train_step(&mut self, batch: &[Vec<u32>]) -> Result<f64> {
        let (loss, mut grads) = self.batch_gradients(batch)?;
        if !loss.is_finite() {
            let group = grads.first_non_finite().unwrap_or_else(|| "loss".to_string());
            return Err(Error::Divergence { step: self.step, group });
        }
        if let Some(group) = grads.first_non_finite() {
            return Err(Error::Divergence { step: self.step, group });
        }
        if self.train.grad_clip > 0.0 {
            let norm =
                grads.params("").iter().map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            if norm > self.train.grad_clip {
                let s = self.train.grad_clip / norm;
                grads.visit_mut("", &mut |_, t| t.map_inplace(|v| v * s));
            }
        }
        let cfg = &self.train;
        let t = (self.step + 1) as i32;
        let lr = cfg.lr_at(self.step);
        let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        let params = self.model.params_mut("");
        let ms = self.first_moment.params_mut("");
        let vs = self.second_moment.params_mut("");
        for (((_, p), (_, m)), ((_, v), (_, g))) in params.into_iter().zip(ms).zip(vs.into_iter().zip(grads.params("")))
        {
            let iter = p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data());
            for (((pi, mi), vi), &gi) in iter {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
            }
        }
        if let Some(group) = self.model.first_non_finite() {
            return Err(Error::Divergence { step: self.step, group });
        }
        self.step += 1;
        self.losses.push(loss);
        Ok(loss)
    }

    /// Runs until `self.step == until`, sampling batches from `corpus`.
    pub fn train_until(&mut self, corpus: &[u32], until: usize, mut on_step: impl FnMut(usize, f64)) -> Result<()> {
        while self.step < until {
            let batch = sample_batch(corpus, &self.train, self.step)?;
            let step = self.step;
            let loss = self.train_step(&batch)?;
            on_step(step, loss);
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let manifest = Manifest {
            format: TRAIN_FORMAT.to_string(),
            config: self.model.config.clone(),
            train: self.train.clone(),
            step: self.step,
            losses: self.losses.clone(),
        };
        let mut archive = Archive::new(serde_json::to_string_pretty(&manifest)?);
        self.model.write_to(&mut archive, "");
        self.first_moment.write_to(&mut archive, "adam.m.");
        self.second_moment.write_to(&mut archive, "adam.v.");
        Ok(archive)
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(archive.manifest())?;
        if manifest.format != TRAIN_FORMAT {
            return Err(Error::Format(format!("not a training checkpoint: `{}`", manifest.format)));
        }
        manifest.train.validate()?;
        Ok(Self {
            model: Model::from_archive_with(&manifest.config, archive, "")?,
            first_moment: Model::from_archive_with(&manifest.config, archive, "adam.m.")?,
            second_moment: Model::from_archive_with(&manifest.config, archive, "adam.v.")?,
            step: manifest.step,
            losses: manifest.losses,
            train: manifest.train,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Loads either a bare model or a training checkpoint and returns its model.
pub fn load_any_model(archive: &Archive) -> Result<Model> {
    let format = serde_json::from_str::<serde_json::Value>(archive.manifest())?
        .get("format")
        .and_then(|f| f.as_str())
        .map(str::to_owned)
        .unwrap_or_default();
    match format.as_str() {
        TRAIN_FORMAT => Ok(TrainState::from_archive(archive)?.model),
        _ => Model::from_archive(archive),
    }
}
