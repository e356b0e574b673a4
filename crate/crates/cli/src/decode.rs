use std::path::PathBuf;

use anyhow::{bail, Context, Result};

use transnormer::inference::{decode_with, Algorithm, Decoder, Sampler};
use transnormer::model::{load_any_model, vocab, ModelConfig};
use transnormer::numerics::io::Archive;

#[derive(Debug, Clone)]
pub struct DecodeArgs {
    pub checkpoint: PathBuf,
    pub prompt: String,
    pub steps: usize,
    pub algorithm: Algorithm,
    /// Raises every decay rate to at least this value.
    pub lambda_floor: Option<f64>,
    pub temperature: Option<f64>,
    pub seed: u64,
    /// When given, the checkpoint's model configuration must match it.
    pub expect_config: Option<ModelConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub text: String,
    pub tokens: Vec<u32>,
    pub generated: usize,
    pub first_non_finite: Option<usize>,
}

pub fn run(args: &DecodeArgs) -> Result<DecodeResult> {
    let archive = Archive::load(&args.checkpoint).with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let model = load_any_model(&archive)?;
    if let Some(expect) = &args.expect_config {
        if *expect != model.config {
            bail!("checkpoint model configuration does not match the supplied configuration");
        }
    }
    let mut prompt = vocab::encode(&args.prompt);
    if prompt.is_empty() && args.steps > 0 {
        if model.config.vocab_size <= vocab::BOS as usize {
            bail!("empty prompt needs a begin-of-sequence token, which this vocabulary lacks");
        }
        prompt.push(vocab::BOS);
    }
    let sampler = match args.temperature {
        Some(tau) => Sampler::Temperature { tau, seed: args.seed },
        None => Sampler::Greedy,
    };
    let mut dec = Decoder::with_lambda_floor(&model, args.algorithm, args.lambda_floor)?;
    let out = decode_with(&mut dec, &prompt, args.steps, sampler)?;
    Ok(DecodeResult {
        text: vocab::decode(&out.tokens),
        generated: out.tokens.len() - prompt.len(),
        tokens: out.tokens,
        first_non_finite: out.first_non_finite,
    })
}
