use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use transnormer::model::{vocab, Model, ModelConfig, TrainConfig, TrainState};

/// JSON run description. Either section may be omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Starting point for `model`; fields given in `model` override it.
    pub preset: Option<String>,
    pub model: serde_json::Map<String, serde_json::Value>,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let base = ModelConfig::preset(self.preset.as_deref().unwrap_or("tiny"))?;
        let mut value = serde_json::to_value(base)?;
        let obj = value.as_object_mut().expect("config serializes to an object");
        for (k, v) in &self.model {
            if !obj.contains_key(k) {
                bail!("unknown model field `{k}`");
            }
            obj.insert(k.clone(), v.clone());
        }
        let cfg: ModelConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: RunConfig,
    pub corpus: PathBuf,
    /// Total number of optimizer steps the checkpoint should reach.
    pub steps: usize,
    pub out: PathBuf,
    pub loss_csv: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub step: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub params: usize,
}

pub fn read_corpus(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path).with_context(|| format!("reading corpus {}", path.display()))?;
    let text = String::from_utf8(bytes).with_context(|| format!("corpus {} is not UTF-8", path.display()))?;
    if text.is_empty() {
        bail!("corpus {} is empty", path.display());
    }
    Ok(vocab::encode(&text))
}

pub fn run(args: &TrainArgs, mut on_step: impl FnMut(usize, f64)) -> Result<TrainSummary> {
    let corpus = read_corpus(&args.corpus)?;
    let mut state = match &args.resume {
        Some(path) => TrainState::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?,
        None => {
            let mut model_cfg = args.config.model_config()?;
            let mut train = args.config.train.clone();
            if let Some(seed) = args.seed {
                model_cfg.seed = seed;
                train.seed = seed;
            }
            if model_cfg.vocab_size < vocab::BYTE_VOCAB_SIZE {
                bail!("byte corpora need a vocabulary of at least {} tokens", vocab::BYTE_VOCAB_SIZE);
            }
            train.steps = args.steps;
            TrainState::new(Model::init(&model_cfg)?, train)?
        }
    };
    if args.steps < state.step {
        bail!("checkpoint is already at step {}, beyond the requested {}", state.step, args.steps);
    }
    state.train.steps = args.steps;
    state.train_until(&corpus, args.steps, &mut on_step)?;
    state.save(&args.out).with_context(|| format!("writing checkpoint {}", args.out.display()))?;
    if let Some(path) = &args.loss_csv {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "loss"])?;
        for (i, l) in state.losses.iter().enumerate() {
            w.write_record([i.to_string(), format!("{l:.9}")])?;
        }
        w.flush()?;
    }
    Ok(TrainSummary {
        step: state.step,
        first_loss: state.losses.first().copied(),
        last_loss: state.losses.last().copied(),
        params: state.model.num_params(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(dir: &Path, steps: usize) -> TrainArgs {
        let corpus = dir.join("corpus.txt");
        fs::write(&corpus, "hello world, ".repeat(20)).unwrap();
        let mut config = RunConfig::default();
        config.model.insert("d_model".into(), 16.into());
        config.model.insert("heads".into(), 2.into());
        config.train.batch_size = 2;
        config.train.seq_len = 16;
        TrainArgs {
            config,
            corpus,
            steps,
            out: dir.join("ckpt.tnl"),
            loss_csv: Some(dir.join("loss.csv")),
            resume: None,
            seed: Some(5),
        }
    }

    #[test]
    fn zero_steps_saves_the_initial_model() {
        let dir = tempfile::tempdir().unwrap();
        let a = args(dir.path(), 0);
        run(&a, |_, _| {}).unwrap();
        let state = TrainState::load(&a.out).unwrap();
        let cfg = a.config.model_config().unwrap();
        assert_eq!(state.model, Model::init(&ModelConfig { seed: 5, ..cfg }).unwrap());
    }

    #[test]
    fn resume_continues_the_same_run() {
        let dir = tempfile::tempdir().unwrap();
        let full = args(dir.path(), 6);
        run(&full, |_, _| {}).unwrap();
        let unbroken = TrainState::load(&full.out).unwrap();

        let half = TrainArgs { out: dir.path().join("half.tnl"), ..args(dir.path(), 3) };
        run(&half, |_, _| {}).unwrap();
        let resumed =
            TrainArgs { resume: Some(half.out.clone()), out: dir.path().join("resumed.tnl"), ..args(dir.path(), 6) };
        run(&resumed, |_, _| {}).unwrap();
        let resumed = TrainState::load(&resumed.out).unwrap();
        assert_eq!(resumed.losses, unbroken.losses);
        assert_eq!(resumed.model, unbroken.model);
        let csv = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn empty_corpus_and_bad_fields_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = args(dir.path(), 1);
        fs::write(&a.corpus, "").unwrap();
        assert!(run(&a, |_, _| {}).unwrap_err().to_string().contains("empty"));
        a.config.model.insert("depth".into(), 3.into());
        assert!(a.config.model_config().is_err());
    }
}
