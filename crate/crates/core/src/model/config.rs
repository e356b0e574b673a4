use serde::{Deserialize, Serialize};

use crate::attention::{BlockConfig, TileSchedule};
use crate::blocks::{
    hidden_width, Activation, AttentionPath, GlaOptions, NormKind, NormMode, NormVariant, DEFAULT_EPS,
    DEFAULT_HIDDEN_RATIO,
};
use crate::error::{Error, Result};
use crate::positional::{DecaySchedule, DEFAULT_THETA_BASE};

use super::vocab::BYTE_VOCAB_SIZE;

/// Architecture and ablation switches of a language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub vocab_size: usize,
    /// Channel-mixer width as a multiple of `d_model`, rounded up to 8.
    pub hidden_ratio: f64,
    pub norm: NormVariant,
    pub norm_eps: f64,
    pub gla_activation: Activation,
    pub glu_activation: Activation,
    pub use_gate: bool,
    pub decay_temperature: bool,
    pub gla_norm: NormMode,
    pub tie_embeddings: bool,
    pub theta_base: f64,
    pub init_std: f64,
    /// Lightning tile edge used by the training-time forward pass.
    pub block_size: usize,
    pub schedule: TileSchedule,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 4,
            vocab_size: BYTE_VOCAB_SIZE,
            hidden_ratio: DEFAULT_HIDDEN_RATIO,
            norm: NormVariant::SrmsNorm,
            norm_eps: DEFAULT_EPS,
            gla_activation: Activation::OnePlusElu,
            glu_activation: Activation::None,
            use_gate: true,
            decay_temperature: true,
            gla_norm: NormMode::Merged,
            tie_embeddings: true,
            theta_base: DEFAULT_THETA_BASE,
            init_std: 0.02,
            block_size: 32,
            schedule: TileSchedule::Tiled,
            seed: 0,
        }
    }
}

pub const PRESETS: [&str; 4] = ["tiny", "micro", "tiny-385m-shape", "385m"];

impl ModelConfig {
    /// Named configurations. `385m` is the full-size shape and is meant for
    /// parameter counting rather than instantiation.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        Ok(match name {
            "tiny" => base,
            "micro" => Self { layers: 2, d_model: 16, heads: 2, vocab_size: 32, ..base },
            // 24 layers, width 1024, 8 heads, each divided by 4
            "tiny-385m-shape" => Self { layers: 6, d_model: 256, heads: 2, ..base },
            "385m" => Self { layers: 24, d_model: 1024, heads: 8, ..base },
            other => {
                return Err(Error::invalid(format!("unknown preset `{other}`, expected one of {}", PRESETS.join(", "))))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::invalid("need at least one layer"));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) || !(self.d_model / self.heads).is_multiple_of(2)
        {
            return Err(Error::invalid(format!(
                "d_model {} must split into {} heads of even width",
                self.d_model, self.heads
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::invalid("vocabulary is empty"));
        }
        if !(self.hidden_ratio > 0.0 && self.hidden_ratio.is_finite()) {
            return Err(Error::invalid(format!("hidden ratio {} must be positive", self.hidden_ratio)));
        }
        if self.glu_activation == Activation::OnePlusElu {
            return Err(Error::invalid("channel mixer activation must be none or swish"));
        }
        if self.block_size == 0 {
            return Err(Error::invalid("block size must be ≥ 1"));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::invalid("init std must be finite and non-negative"));
        }
        NormKind::new(self.norm, self.norm_eps)?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn hidden(&self) -> usize {
        hidden_width(self.d_model, self.hidden_ratio)
    }

    pub fn norm_kind(&self) -> NormKind {
        NormKind { variant: self.norm, eps: self.norm_eps }
    }

    pub fn gla_options(&self) -> GlaOptions {
        GlaOptions {
            activation: self.gla_activation,
            use_gate: self.use_gate,
            norm_mode: self.gla_norm,
            eps: self.norm_eps,
            theta_base: self.theta_base,
        }
    }

    pub fn decay_schedule(&self) -> Result<DecaySchedule> {
        DecaySchedule::new(self.heads, self.layers, self.decay_temperature)
    }

    pub fn attention_path(&self) -> AttentionPath {
        AttentionPath::Lightning(BlockConfig::square(self.block_size).with_schedule(self.schedule))
    }

    /// Scale applied to output projections feeding the residual stream.
    pub fn residual_std(&self) -> f64 {
        self.init_std / (2.0 * self.layers as f64).sqrt()
    }

    /// Parameter count from the closed-form shape arithmetic.
    pub fn param_count(&self) -> usize {
        let (d, v, e, l) = (self.d_model, self.vocab_size, self.hidden(), self.layers);
        let projections = if self.use_gate { 5 } else { 4 };
        let norm = match self.norm {
            NormVariant::SrmsNorm => 0,
            NormVariant::RmsNorm => d,
            NormVariant::LayerNorm => 2 * d,
        };
        let layer = projections * d * d + d / 2 + 3 * d * e + 2 * norm;
        let head = if self.tie_embeddings { 0 } else { d * v };
        v * d + l * layer + norm + head
    }

    /// Every parameter tensor name with its shape, in visiting order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, e) = (self.d_model, self.hidden());
        let mut out = vec![("embed".to_string(), vec![self.vocab_size, d])];
        let norm = |prefix: &str, out: &mut Vec<(String, Vec<usize>)>| match self.norm {
            NormVariant::SrmsNorm => {}
            NormVariant::RmsNorm => out.push((format!("{prefix}weight"), vec![d])),
            NormVariant::LayerNorm => {
                out.push((format!("{prefix}weight"), vec![d]));
                out.push((format!("{prefix}bias"), vec![d]));
            }
        };
        for l in 0..self.layers {
            let p = format!("layers.{l}.");
            norm(&format!("{p}norm1."), &mut out);
            let mut gla = vec!["w_q", "w_k", "w_v"];
            if self.use_gate {
                gla.push("w_u");
            }
            gla.push("w_o");
            for w in gla {
                out.push((format!("{p}gla.{w}"), vec![d, d]));
            }
            out.push((format!("{p}gla.theta"), vec![self.heads, self.head_dim() / 2]));
            norm(&format!("{p}norm2."), &mut out);
            out.push((format!("{p}sglu.w_v"), vec![d, e]));
            out.push((format!("{p}sglu.w_u"), vec![d, e]));
            out.push((format!("{p}sglu.w_o"), vec![e, d]));
        }
        norm("final_norm.", &mut out);
        if !self.tie_embeddings {
            out.push(("head".to_string(), vec![d, self.vocab_size]));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("huge").is_err());
    }

    #[test]
    fn rejects_bad_geometry() {
        let bad = [
            ModelConfig { heads: 3, ..Default::default() },
            ModelConfig { layers: 0, ..Default::default() },
            ModelConfig { d_model: 12, heads: 4, ..Default::default() },
            ModelConfig { glu_activation: Activation::OnePlusElu, ..Default::default() },
            ModelConfig { norm_eps: 0.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn closed_form_count_matches_shape_enumeration() {
        let shapes_total =
            |c: &ModelConfig| -> usize { c.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum() };
        let mut configs = vec![
            ModelConfig { layers: 2, d_model: 64, heads: 4, vocab_size: 256, ..Default::default() },
            ModelConfig::preset("385m").unwrap(),
        ];
        for norm in [NormVariant::RmsNorm, NormVariant::LayerNorm] {
            configs.push(ModelConfig { norm, use_gate: false, tie_embeddings: false, ..Default::default() });
        }
        for cfg in &configs {
            assert_eq!(cfg.param_count(), shapes_total(cfg));
        }
        // L=2, d=64, H=4, V=256, e=176: 2·(5·64² + 32 + 3·64·176) + 256·64
        assert_eq!(configs[0].param_count(), 2 * (5 * 4096 + 32 + 3 * 64 * 176) + 256 * 64);
    }

    #[test]
    fn json_round_trip_with_defaults() {
        let cfg = ModelConfig::preset("micro").unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&text).unwrap(), cfg);
        let partial: ModelConfig = serde_json::from_str(r#"{"layers": 3, "norm": "layernorm"}"#).unwrap();
        assert_eq!(partial.layers, 3);
        assert_eq!(partial.norm, NormVariant::LayerNorm);
        assert_eq!(partial.d_model, 64);
    }
}
