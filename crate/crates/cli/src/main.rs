use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use transnormer::inference::Algorithm;
use transnormer_cli::bench::{self, BenchSpec, Dtype, Impl, Workload};
use transnormer_cli::train::{RunConfig, TrainArgs};
use transnormer_cli::verify::{self, Fault, Suite, VerifyOptions};
use transnormer_cli::{decode, train, SEED_ENV};

#[derive(Parser)]
#[command(name = "tnl", version, about = "Lightning attention and linear-attention language model toolkit")]
struct Cli {
    /// Worker threads for parallel-capable kernels.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[arg(long, global = true, env = SEED_ENV, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run invariant suites and report key=value lines.
    Verify(VerifyCmd),
    /// Benchmark kernels and write CSV.
    Bench(BenchCmd),
    /// Train a model on a UTF-8 corpus.
    Train(TrainCmd),
    /// Generate text from a checkpoint.
    Decode(DecodeCmd),
}

#[derive(Args)]
struct VerifyCmd {
    #[arg(long, value_enum, default_value = "all")]
    suite: Suite,
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<Fault>,
}

#[derive(Args)]
struct BenchCmd {
    #[arg(long, value_enum, default_value = "attn-fwd-bwd")]
    workload: Workload,
    /// Comma-separated sequence lengths.
    #[arg(long, value_delimiter = ',', default_values_t = [256usize, 512, 1024])]
    n: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 64)]
    tile_r: usize,
    #[arg(long, default_value_t = 64)]
    tile_c: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, value_enum, default_value = "f64")]
    dtype: Dtype,
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["naive", "softmax", "lightning", "lightning-carried"])]
    r#impl: Vec<Impl>,
    /// Skip runs expected to need more scratch than this, marking them `oom`.
    #[arg(long, default_value_t = 4 << 30)]
    max_bytes: usize,
    /// Model preset for the decode workload.
    #[arg(long, default_value = "tiny")]
    model: String,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    corpus: PathBuf,
    /// JSON file with optional `preset`, `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "tiny")]
    preset: String,
    /// Total optimizer steps to reach.
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value = "checkpoint.tnl")]
    out: PathBuf,
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long, default_value_t = 64)]
    steps: usize,
    #[arg(long, default_value_t = Algorithm::Robust)]
    algorithm: Algorithm,
    #[arg(long)]
    lambda_floor: Option<f64>,
    /// Sample with this temperature instead of greedy decoding.
    #[arg(long)]
    temperature: Option<f64>,
    /// Reject checkpoints whose model configuration differs from this JSON run config.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .context("configuring thread pool")?;
    let stdout = io::stdout();
    match cli.command {
        Command::Verify(cmd) => {
            let report = verify::run(cmd.suite, &VerifyOptions { seed: cli.seed, fault: cmd.inject_fault })?;
            eprint!("{report}");
            report.write_kv(stdout.lock())?;
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Bench(cmd) => {
            let spec = BenchSpec {
                workload: cmd.workload,
                ns: cmd.n,
                d: cmd.d,
                tile_r: cmd.tile_r,
                tile_c: cmd.tile_c,
                reps: cmd.reps,
                warmup: cmd.warmup,
                dtype: cmd.dtype,
                impls: cmd.r#impl,
                max_bytes: cmd.max_bytes,
                model: cmd.model,
                seed: cli.seed,
            };
            let rows = bench::run(&spec, |r| eprintln!("{} n={} {:?}", r.implementation, r.n, r.outcome))?;
            match cmd.out {
                Some(path) => bench::write_csv(
                    &rows,
                    std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?,
                )?,
                None => bench::write_csv(&rows, stdout.lock())?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(cmd) => {
            let config = match &cmd.config {
                Some(path) => RunConfig::load(path)?,
                None => RunConfig { preset: Some(cmd.preset.clone()), ..RunConfig::default() },
            };
            let args = TrainArgs {
                config,
                corpus: cmd.corpus,
                steps: cmd.steps,
                out: cmd.out,
                loss_csv: cmd.loss_csv,
                resume: cmd.resume,
                seed: Some(cli.seed),
            };
            let summary = train::run(&args, |step, loss| {
                if step % 50 == 0 {
                    eprintln!("step {step} loss {loss:.4}");
                }
            })?;
            let mut out = stdout.lock();
            writeln!(out, "step={} params={}", summary.step, summary.params)?;
            if let (Some(a), Some(b)) = (summary.first_loss, summary.last_loss) {
                writeln!(out, "first_loss={a:.6} last_loss={b:.6}")?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Decode(cmd) => {
            let expect_config = cmd.config.as_deref().map(|p| RunConfig::load(p)?.model_config()).transpose()?;
            let result = decode::run(&decode::DecodeArgs {
                checkpoint: cmd.checkpoint,
                prompt: cmd.prompt,
                steps: cmd.steps,
                algorithm: cmd.algorithm,
                lambda_floor: cmd.lambda_floor,
                temperature: cmd.temperature,
                seed: cli.seed,
                expect_config,
            })?;
            let mut out = stdout.lock();
            writeln!(out, "{}", result.text)?;
            writeln!(out, "generated={}", result.generated)?;
            match result.first_non_finite {
                Some(p) => writeln!(out, "first_non_finite={p}")?,
                None => writeln!(out, "first_non_finite=none")?,
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
