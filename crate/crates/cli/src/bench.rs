use std::io::Write;
use std::time::Instant;

use anyhow::{bail, Result};
use clap::ValueEnum;
use serde::Serialize;

use transnormer::attention::{
    lightning_backward_with_stats, lightning_forward_with_stats, reference_backward, reference_forward,
    softmax_backward, softmax_forward, AttentionInputs, BlockConfig, TileSchedule,
};
use transnormer::blocks::srmsnorm;
use transnormer::inference::{Algorithm, Decoder};
use transnormer::model::{Model, ModelConfig};
use transnormer::numerics::{meter, Scalar, SeededRng, Tensor};

pub const CSV_HEADER: [&str; 9] =
    ["workload", "n", "d", "tile_r", "tile_c", "impl", "median_ms", "peak_bytes", "tiles_computed"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Workload {
    AttnFwdBwd,
    InferenceDecode,
    Srmsnorm,
}

impl Workload {
    pub fn name(self) -> &'static str {
        match self {
            Workload::AttnFwdBwd => "attn_fwd_bwd",
            Workload::InferenceDecode => "inference_decode",
            Workload::Srmsnorm => "srmsnorm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Impl {
    /// Materialized mask and score matrix.
    Naive,
    /// Causal softmax attention with the same materialization.
    Softmax,
    /// Tiled kernel that revisits every lower-triangle tile.
    Lightning,
    /// Tiled kernel carrying a running key-value state between blocks.
    LightningCarried,
}

impl Impl {
    pub fn name(self) -> &'static str {
        match self {
            Impl::Naive => "naive",
            Impl::Softmax => "softmax",
            Impl::Lightning => "lightning",
            Impl::LightningCarried => "lightning_carried",
        }
    }

    /// Rough upper bound on scratch bytes, used to skip runs that would not fit.
    fn estimated_bytes(self, n: usize, d: usize, tile: usize, elem: usize) -> usize {
        match self {
            Impl::Naive | Impl::Softmax => n.saturating_mul(n).saturating_mul(3 * elem) + 8 * n * d * elem,
            Impl::Lightning | Impl::LightningCarried => (8 * n * d + 4 * tile * tile + 4 * d * d) * elem,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub workload: Workload,
    pub ns: Vec<usize>,
    pub d: usize,
    pub tile_r: usize,
    pub tile_c: usize,
    pub reps: usize,
    pub warmup: usize,
    pub dtype: Dtype,
    pub impls: Vec<Impl>,
    /// Runs whose estimated scratch exceeds this are reported as `oom`.
    pub max_bytes: usize,
    /// Model preset for the decode workload.
    pub model: String,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            workload: Workload::AttnFwdBwd,
            ns: vec![256, 512, 1024],
            d: 64,
            tile_r: 64,
            tile_c: 64,
            reps: 3,
            warmup: 1,
            dtype: Dtype::F64,
            impls: vec![Impl::Naive, Impl::Softmax, Impl::Lightning, Impl::LightningCarried],
            max_bytes: 4 << 30,
            model: "tiny".into(),
            seed: 0,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 3 {
            bail!("need at least 3 repetitions, got {}", self.reps);
        }
        if self.ns.is_empty() || self.ns.contains(&0) {
            bail!("sequence lengths must be a non-empty list of positive values");
        }
        if self.d == 0 || self.tile_r == 0 || self.tile_c == 0 {
            bail!("feature dimension and tile sizes must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    Measured { median_ms: f64, peak_bytes: usize, tiles_computed: u64 },
    Oom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub workload: Workload,
    pub n: usize,
    pub d: usize,
    pub tile_r: usize,
    pub tile_c: usize,
    pub implementation: String,
    pub outcome: Outcome,
}

impl BenchRow {
    pub fn median_ms(&self) -> Option<f64> {
        match self.outcome {
            Outcome::Measured { median_ms, .. } => Some(median_ms),
            Outcome::Oom => None,
        }
    }

    pub fn peak_bytes(&self) -> Option<usize> {
        match self.outcome {
            Outcome::Measured { peak_bytes, .. } => Some(peak_bytes),
            Outcome::Oom => None,
        }
    }

    fn record(&self) -> [String; 9] {
        let (ms, bytes, tiles) = match self.outcome {
            Outcome::Measured { median_ms, peak_bytes, tiles_computed } => {
                (format!("{median_ms:.4}"), peak_bytes.to_string(), tiles_computed.to_string())
            }
            Outcome::Oom => ("oom".into(), "oom".into(), "oom".into()),
        };
        [
            self.workload.name().into(),
            self.n.to_string(),
            self.d.to_string(),
            self.tile_r.to_string(),
            self.tile_c.to_string(),
            self.implementation.clone(),
            ms,
            bytes,
            tiles,
        ]
    }
}

pub fn write_csv(rows: &[BenchRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let m = samples.len() / 2;
    if samples.len() % 2 == 1 {
        samples[m]
    } else {
        0.5 * (samples[m - 1] + samples[m])
    }
}

/// Median wall time in milliseconds over `reps` runs after `warmup` runs.
pub fn time_median(warmup: usize, reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(&mut samples))
}

pub fn run(spec: &BenchSpec, mut on_row: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    for &n in &spec.ns {
        let produced = match spec.workload {
            Workload::AttnFwdBwd => match spec.dtype {
                Dtype::F64 => attention_rows::<f64>(spec, n)?,
                Dtype::F32 => attention_rows::<f32>(spec, n)?,
            },
            Workload::InferenceDecode => vec![decode_row(spec, n)?],
            Workload::Srmsnorm => vec![srmsnorm_row(spec, n)?],
        };
        for row in produced {
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

fn row(spec: &BenchSpec, n: usize, implementation: &str, outcome: Outcome) -> BenchRow {
    BenchRow {
        workload: spec.workload,
        n,
        d: spec.d,
        tile_r: spec.tile_r,
        tile_c: spec.tile_c,
        implementation: implementation.into(),
        outcome,
    }
}

fn attention_rows<T: Scalar>(spec: &BenchSpec, n: usize) -> Result<Vec<BenchRow>> {
    let d = spec.d;
    let mut rng = SeededRng::derive(spec.seed, n as u64);
    let scale = 1.0 / (d as f64).sqrt();
    let q: Tensor<T> = rng.normal(&[n, d], 0.0, scale);
    let k: Tensor<T> = rng.normal(&[n, d], 0.0, scale);
    let v: Tensor<T> = rng.normal(&[n, d], 0.0, 1.0);
    let d_out: Tensor<T> = rng.normal(&[n, d], 0.0, 1.0);
    let inputs = AttentionInputs::new(&q, &k, &v, 0.99)?;
    let elem = std::mem::size_of::<T>();
    let mut rows = Vec::new();
    for &imp in &spec.impls {
        if imp.estimated_bytes(n, d, spec.tile_r.max(spec.tile_c), elem) > spec.max_bytes {
            rows.push(row(spec, n, imp.name(), Outcome::Oom));
            continue;
        }
        let cfg = BlockConfig::new(spec.tile_r, spec.tile_c).with_schedule(match imp {
            Impl::LightningCarried => TileSchedule::Carried,
            _ => TileSchedule::Tiled,
        });
        let once = || -> Result<u64> {
            Ok(match imp {
                Impl::Naive => {
                    let o = reference_forward(&inputs)?;
                    drop(o);
                    reference_backward(&inputs, &d_out)?;
                    0
                }
                Impl::Softmax => {
                    let (o, p) = softmax_forward(&q, &k, &v)?;
                    drop(o);
                    softmax_backward(&q, &k, &v, &p, &d_out)?;
                    0
                }
                Impl::Lightning | Impl::LightningCarried => {
                    let (o, fwd) = lightning_forward_with_stats(&inputs, &cfg)?;
                    drop(o);
                    let (_, bwd) = lightning_backward_with_stats(&inputs, &d_out, &cfg)?;
                    fwd.tiles_computed + bwd.tiles_computed
                }
            })
        };
        let (tiles, peak) = meter::measure(once);
        let tiles = tiles?;
        let median_ms = time_median(spec.warmup, spec.reps, || once().map(drop))?;
        rows.push(row(spec, n, imp.name(), Outcome::Measured { median_ms, peak_bytes: peak, tiles_computed: tiles }));
    }
    Ok(rows)
}

/// Per-token decode latency after `n` tokens have already been consumed.
fn decode_row(spec: &BenchSpec, n: usize) -> Result<BenchRow> {
    let cfg = ModelConfig { seed: spec.seed, ..ModelConfig::preset(&spec.model)? };
    let model = Model::init(&cfg)?;
    let vocab = cfg.vocab_size as u32;
    let mut dec = Decoder::new(&model, Algorithm::Robust)?;
    let mut rng = SeededRng::derive(spec.seed, n as u64);
    for _ in 0..n {
        dec.step(rng.below(vocab as usize) as u32)?;
    }
    let token = rng.below(vocab as usize) as u32;
    let median_ms = time_median(spec.warmup, spec.reps, || {
        dec.step(token)?;
        Ok(())
    })?;
    let mut out =
        row(spec, n, "robust", Outcome::Measured { median_ms, peak_bytes: dec.state_bytes(), tiles_computed: 0 });
    out.d = cfg.d_model;
    Ok(out)
}

fn srmsnorm_row(spec: &BenchSpec, n: usize) -> Result<BenchRow> {
    let x: Tensor = SeededRng::derive(spec.seed, n as u64).normal(&[n, spec.d], 0.0, 1.0);
    let (_, peak) = meter::measure(|| srmsnorm(&x, 1e-6));
    let median_ms = time_median(spec.warmup, spec.reps, || {
        std::hint::black_box(srmsnorm(&x, 1e-6));
        Ok(())
    })?;
    Ok(row(spec, n, "srmsnorm", Outcome::Measured { median_ms, peak_bytes: peak, tiles_computed: 0 }))
}
