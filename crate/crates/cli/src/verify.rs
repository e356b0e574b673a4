use std::fmt;
use std::io::Write;

use anyhow::Result;
use clap::ValueEnum;

use transnormer::attention::{
    lightning_backward, lightning_forward, reference_backward, reference_forward, AttentionInputs, BlockConfig,
    TileSchedule,
};
use transnormer::blocks::{Activation, AttentionPath, GlaOptions, GlaParams, NormMode, ParamSet, SgluParams};
use transnormer::inference::{teacher_forced_logits, Algorithm, RecurrentState};
use transnormer::model::{check_model_gradients, GradCheckOptions, Model, ModelConfig};
use transnormer::numerics::{finite_diff, SeededRng, Tensor};
use transnormer::parallel_sim::{CollectiveLedger, Pass, ShardPlan, ShardedGla, ShardedSglu};
use transnormer::positional::DecaySchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Attention,
    Inference,
    Parallel,
    Gradcheck,
    All,
}

/// Deliberate bugs used to show that the suites catch them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    /// Negates the key gradient returned by the lightning backward pass.
    DkSign,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub metric: f64,
    pub threshold: f64,
    /// Inputs of the worst case.
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn first_failure(&self) -> Option<&Check> {
        self.checks.iter().find(|c| !c.passed)
    }

    /// One `key=value` line per check followed by a summary line.
    pub fn write_kv(&self, mut w: impl Write) -> Result<()> {
        for c in &self.checks {
            writeln!(
                w,
                "suite={} check={} status={} metric={:.3e} threshold={:.1e} seed={} detail=\"{}\"",
                c.suite,
                c.name,
                if c.passed { "pass" } else { "fail" },
                c.metric,
                c.threshold,
                self.seed,
                c.detail
            )?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        writeln!(
            w,
            "summary status={} checks={} failed={} seed={}",
            if failed == 0 { "pass" } else { "fail" },
            self.checks.len(),
            failed,
            self.seed
        )?;
        Ok(())
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "[{}] {}/{}: {:.3e} (limit {:.1e})",
                if c.passed { "ok" } else { "FAIL" },
                c.suite,
                c.name,
                c.metric,
                c.threshold
            )?;
        }
        if let Some(c) = self.first_failure() {
            writeln!(f, "first failure: {}/{} with {} (seed {})", c.suite, c.name, c.detail, self.seed)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fault: Option<Fault>,
}

/// Tracks the worst value of a metric together with the inputs that caused it.
struct Worst {
    metric: f64,
    detail: String,
}

impl Worst {
    fn new() -> Self {
        Self { metric: 0.0, detail: String::new() }
    }

    fn update(&mut self, metric: f64, detail: impl FnOnce() -> String) {
        if !(metric <= self.metric) {
            self.metric = metric;
            self.detail = detail();
        }
    }

    fn check(self, suite: &'static str, name: &str, threshold: f64) -> Check {
        Check {
            suite,
            name: name.into(),
            passed: self.metric <= threshold,
            metric: self.metric,
            threshold,
            detail: self.detail,
        }
    }
}

fn flag(suite: &'static str, name: &str, ok: bool, detail: String) -> Check {
    Check { suite, name: name.into(), passed: ok, metric: if ok { 0.0 } else { 1.0 }, threshold: 0.0, detail }
}

fn qkv(rng: &mut SeededRng, n: usize, d: usize) -> (Tensor, Tensor, Tensor) {
    (rng.normal(&[n, d], 0.0, 1.0), rng.normal(&[n, d], 0.0, 1.0), rng.normal(&[n, d], 0.0, 1.0))
}

pub fn run(suite: Suite, opts: &VerifyOptions) -> Result<Report> {
    let mut checks = Vec::new();
    let suites = match suite {
        Suite::All => vec![Suite::Attention, Suite::Inference, Suite::Parallel, Suite::Gradcheck],
        s => vec![s],
    };
    for s in suites {
        let mut rng = SeededRng::derive(opts.seed, s as u64);
        checks.extend(match s {
            Suite::Attention => attention(&mut rng)?,
            Suite::Inference => inference(&mut rng)?,
            Suite::Parallel => parallel(&mut rng)?,
            Suite::Gradcheck => gradcheck(&mut rng, opts.fault)?,
            Suite::All => unreachable!(),
        });
    }
    Ok(Report { seed: opts.seed, checks })
}

fn attention(rng: &mut SeededRng) -> Result<Vec<Check>> {
    const S: &str = "attention";
    let mut equiv = Worst::new();
    for n in [1, 5, 16, 64, 257] {
        for d in [1, 8] {
            let (q, k, v) = qkv(rng, n, d);
            for lambda in [1.0, 0.9, 0.5] {
                let inputs = AttentionInputs::new(&q, &k, &v, lambda)?;
                let want = reference_forward(&inputs)?;
                for tile in [1, 3, 16, n] {
                    for schedule in [TileSchedule::Tiled, TileSchedule::Carried] {
                        let got = lightning_forward(&inputs, &BlockConfig::square(tile).with_schedule(schedule))?;
                        equiv.update(got.rel_error(&want)?, || {
                            format!("n={n} d={d} tile={tile} lambda={lambda} schedule={schedule:?}")
                        });
                    }
                }
            }
        }
    }

    let mut causal = true;
    let mut causal_detail = String::new();
    for at in [0, 7, 19] {
        let (q, k, v) = qkv(rng, 24, 4);
        let (mut q2, mut k2, mut v2) = (q.clone(), k.clone(), v.clone());
        for t in [&mut q2, &mut k2, &mut v2] {
            t.row_mut(at).iter_mut().for_each(|x| *x += 1.0);
        }
        let cfg = BlockConfig::square(5);
        let y1 = lightning_forward(&AttentionInputs::new(&q, &k, &v, 0.9)?, &cfg)?;
        let y2 = lightning_forward(&AttentionInputs::new(&q2, &k2, &v2, 0.9)?, &cfg)?;
        if (0..at).any(|s| y1.row(s) != y2.row(s)) {
            causal = false;
            causal_detail = format!("perturbed row {at} changed earlier outputs");
        }
    }

    let mut decay = true;
    let mut decay_detail = String::new();
    for (h, expect) in [(4, (-2.0f64).exp()), (8, (-4.0f64).exp())] {
        let got = DecaySchedule::new(8, 24, true)?.decay_rate(h, 12)?;
        if (got - expect).abs() > 1e-12 {
            decay = false;
            decay_detail = format!("H=8 L=24 h={h} l=12 gave {got}");
        }
    }
    for (heads, layers) in [(4, 2), (8, 24), (16, 6)] {
        let s = DecaySchedule::new(heads, layers, true)?;
        for h in 1..=heads {
            decay &= s.decay_rate(h, layers)? == 1.0;
            for l in 1..layers {
                decay &= s.decay_rate(h, l)? <= s.decay_rate(h, l + 1)?;
                if h < heads {
                    decay &= s.decay_rate(h + 1, l)? < s.decay_rate(h, l)?;
                }
            }
        }
    }

    Ok(vec![
        equiv.check(S, "lightning_equals_reference", 1e-6),
        flag(S, "causality", causal, causal_detail),
        flag(S, "decay_schedule", decay, decay_detail),
    ])
}

fn unit(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn inference(rng: &mut SeededRng) -> Result<Vec<Check>> {
    const S: &str = "inference";
    let mut state = Worst::new();
    for lambda in [1.0, 0.9, 0.5] {
        let (q, k, v) = qkv(rng, 256, 4);
        let want = reference_forward(&AttentionInputs::new(&q, &k, &v, lambda)?)?;
        let mut s = RecurrentState::<f64>::new(4, lambda, Algorithm::Robust)?;
        for t in 0..256 {
            let o = Tensor::vector(s.step(q.row(t), k.row(t), v.row(t))?);
            let w = Tensor::vector(want.row(t).to_vec());
            state.update(o.rel_error(&w)?, || format!("lambda={lambda} t={}", t + 1));
        }
    }

    let cfg =
        ModelConfig { use_gate: true, init_std: 0.2, seed: rng.below(1 << 30) as u64, ..ModelConfig::preset("micro")? };
    let model = Model::init(&cfg)?;
    let tokens: Vec<u32> = (0..256).map(|_| rng.below(cfg.vocab_size) as u32).collect();
    let parallel = model.forward_lm_with(&tokens, &AttentionPath::Reference)?;
    let mut model_check = Worst::new();
    let mut agree = Worst::new();
    let robust = teacher_forced_logits(&model, &tokens, Algorithm::Robust)?;
    let origin = teacher_forced_logits(&model, &tokens[..64], Algorithm::Origin)?;
    for t in 0..tokens.len() {
        let (a, b) = (Tensor::vector(robust.row(t).to_vec()), Tensor::vector(parallel.row(t).to_vec()));
        model_check.update(a.rel_error(&b)?, || format!("micro model with gate, position {t}"));
        if t < 64 {
            let o = Tensor::vector(origin.row(t).to_vec());
            agree.update(o.rel_error(&a)?, || format!("micro model, position {t}"));
        }
    }

    let mut origin32 = RecurrentState::<f32>::new(8, 0.5, Algorithm::Origin)?;
    let mut robust32 = RecurrentState::<f32>::new(8, 0.5, Algorithm::Robust)?;
    for _ in 0..10_000 {
        let f = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
        let (q, k, v) = (f(unit(rng, 8)), f(unit(rng, 8)), f(unit(rng, 8)));
        if origin32.first_non_finite().is_none() {
            origin32.step(&q, &k, &v)?;
        }
        robust32.step(&q, &k, &v)?;
    }
    let overflow = origin32.first_non_finite();
    let overflow_ok = matches!(overflow, Some(t) if t <= 200) && robust32.first_non_finite().is_none();

    Ok(vec![
        state.check(S, "robust_state_equals_parallel", 1e-6),
        model_check.check(S, "robust_model_equals_parallel", 1e-6),
        agree.check(S, "origin_equals_robust_while_finite", 1e-6),
        flag(
            S,
            "origin_overflows_robust_stays_finite",
            overflow_ok,
            format!(
                "f32 lambda=0.5 unit keys: origin first non-finite at {overflow:?}, robust at {:?}",
                robust32.first_non_finite()
            ),
        ),
    ])
}

fn parallel(rng: &mut SeededRng) -> Result<Vec<Check>> {
    const S: &str = "parallel";
    let mut equiv = Worst::new();
    let mut collectives = true;
    let mut bytes = true;
    let mut detail = String::new();
    let x: Tensor = rng.normal(&[12, 16], 0.0, 1.0);
    let dy: Tensor = rng.normal(&[12, 16], 0.0, 1.0);
    let opts = GlaOptions { norm_mode: NormMode::PerHead, ..GlaOptions::default() };
    let gla = GlaParams::init(16, vec![0.95, 0.8, 0.6, 0.3], opts, rng, 0.3, 0.3)?;
    let sglu = SgluParams::init(16, 48, Activation::None, rng, 0.3, 0.3)?;
    let path = AttentionPath::default();
    let gla_want = gla.forward(&x, &path)?;
    let sglu_want = sglu.forward(&x)?;
    for world in [1, 2, 4] {
        let plan = ShardPlan::new(world)?;
        let expect = u64::from(world > 1);

        let sharded = ShardedGla::new(&gla, plan)?;
        let mut ledger = CollectiveLedger::new();
        let (y, caches) = sharded.forward_cached(&x, &path, &mut ledger)?;
        sharded.backward(&x, &caches, &dy, &path, &mut ledger)?;
        equiv.update(y.rel_error(&gla_want)?, || format!("gla world={world}"));
        if ledger.all_reduce_count(Pass::Forward) != expect || ledger.all_reduce_count(Pass::Backward) != expect {
            collectives = false;
            detail = format!("gla world={world}: {ledger:?}");
        }
        bytes &= sharded.worker_param_bytes().iter().all(|&b| b * world == total(&gla));

        let sharded = ShardedSglu::new(&sglu, plan)?;
        let mut ledger = CollectiveLedger::new();
        let (y, caches) = sharded.forward_cached(&x, &mut ledger)?;
        sharded.backward(&x, &caches, &dy, &mut ledger)?;
        equiv.update(y.rel_error(&sglu_want)?, || format!("sglu world={world}"));
        if ledger.all_reduce_count(Pass::Forward) != expect || ledger.all_reduce_count(Pass::Backward) != expect {
            collectives = false;
            detail = format!("sglu world={world}: {ledger:?}");
        }
        bytes &= sharded.worker_param_bytes().iter().all(|&b| b * world == total(&sglu));
    }
    Ok(vec![
        equiv.check(S, "sharded_equals_unsharded", 1e-6),
        flag(S, "one_all_reduce_per_pass", collectives, detail),
        flag(S, "worker_bytes_are_total_over_world", bytes, String::new()),
    ])
}

fn total<P: ParamSet>(p: &P) -> usize {
    p.params("").iter().map(|(_, t)| t.size_bytes()).sum()
}

fn gradcheck(rng: &mut SeededRng, fault: Option<Fault>) -> Result<Vec<Check>> {
    const S: &str = "gradcheck";
    let (mut dq, mut dk, mut dv) = (Worst::new(), Worst::new(), Worst::new());
    let mut blocked = Worst::new();
    for (n, d) in [(1, 1), (5, 3), (12, 4), (16, 8)] {
        let (q, k, v) = qkv(rng, n, d);
        let w: Tensor = rng.normal(&[n, d], 0.0, 1.0);
        for lambda in [1.0, 0.9, 0.5] {
            let inputs = AttentionInputs::new(&q, &k, &v, lambda)?;
            let unblocked = reference_backward(&inputs, &w)?;
            let loss = |q: &Tensor, k: &Tensor, v: &Tensor| -> f64 {
                let o = reference_forward(&AttentionInputs::new(q, k, v, lambda).unwrap()).unwrap();
                o.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
            };
            let num_q = finite_diff::gradient(&q, 1e-6, |t| loss(t, &k, &v));
            let num_k = finite_diff::gradient(&k, 1e-6, |t| loss(&q, t, &v));
            let num_v = finite_diff::gradient(&v, 1e-6, |t| loss(&q, &k, t));
            for tile in [1, 3, n] {
                for schedule in [TileSchedule::Tiled, TileSchedule::Carried] {
                    let cfg = BlockConfig::square(tile).with_schedule(schedule);
                    let mut g = lightning_backward(&inputs, &w, &cfg)?;
                    if fault == Some(Fault::DkSign) {
                        g.dk.map_inplace(|x| -x);
                    }
                    let at = || format!("n={n} d={d} tile={tile} lambda={lambda} schedule={schedule:?}");
                    dq.update(finite_diff::max_relative_error(&g.dq, &num_q, 1e-3).0, at);
                    dk.update(finite_diff::max_relative_error(&g.dk, &num_k, 1e-3).0, at);
                    dv.update(finite_diff::max_relative_error(&g.dv, &num_v, 1e-3).0, at);
                    blocked.update(g.max_abs_diff(&unblocked)? / (1.0 + unblocked.dq.max_abs()), at);
                }
            }
        }
    }

    let model = Model::init(&ModelConfig { init_std: 0.2, ..ModelConfig::preset("micro")? })?;
    let tokens: Vec<u32> = (0..10).map(|_| rng.below(model.config.vocab_size) as u32).collect();
    let mut model_check = Worst::new();
    for c in check_model_gradients(&model, &tokens, &GradCheckOptions::default())? {
        model_check.update(c.max_rel_error, || {
            format!("{}[{}] analytic={:.6e} numeric={:.6e}", c.name, c.worst_index, c.analytic, c.numeric)
        });
    }

    Ok(vec![
        dq.check(S, "lightning_backward.dQ", 1e-4),
        dk.check(S, "lightning_backward.dK", 1e-4),
        dv.check(S, "lightning_backward.dV", 1e-4),
        blocked.check(S, "blocked_equals_unblocked", 1e-12),
        model_check.check(S, "model_end_to_end", 1e-4),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes_every_suite() {
        let report = run(Suite::All, &VerifyOptions { seed: 7, fault: None }).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.checks.len() >= 15);
    }

    #[test]
    fn dk_sign_fault_is_named() {
        let report = run(Suite::Gradcheck, &VerifyOptions { seed: 1, fault: Some(Fault::DkSign) }).unwrap();
        assert!(!report.passed());
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        assert!(failed.contains(&"lightning_backward.dK"), "{failed:?}");
        assert!(!failed.contains(&"lightning_backward.dQ"));
    }

    #[test]
    fn reports_are_deterministic() {
        let opts = VerifyOptions { seed: 3, fault: None };
        let (a, b) = (run(Suite::Parallel, &opts).unwrap(), run(Suite::Parallel, &opts).unwrap());
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.write_kv(&mut x).unwrap();
        b.write_kv(&mut y).unwrap();
        assert_eq!(x, y);
        assert!(String::from_utf8(x).unwrap().ends_with("failed=0 seed=3\n"));
    }
}
