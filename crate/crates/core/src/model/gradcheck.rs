use super::lm::Model;
use crate::blocks::ParamSet;
use crate::error::{Error, Result};
use crate::numerics::finite_diff::{central, relative_error};
use crate::numerics::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub floor: f64,
    /// Probe at most this many entries per parameter, chosen with `seed`.
    /// `None` probes every entry.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-3, max_entries: None, seed: 0 }
    }
}

/// Worst disagreement between the analytic and numerical gradient of one
/// parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub probed: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the backward pass of the full language-model loss against
/// central differences of the forward pass, parameter by parameter.
pub fn check_model_gradients(model: &Model, tokens: &[u32], opts: &GradCheckOptions) -> Result<Vec<ParamCheck>> {
    if !(opts.step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let (_, grads) = model.loss_and_grads(tokens)?;
    let analytic: Vec<(String, Vec<f64>)> = grads.params("").into_iter().map(|(n, t)| (n, t.data().to_vec())).collect();
    let mut probe = model.clone();
    let mut rng = SeededRng::new(opts.seed);
    let mut out = Vec::with_capacity(analytic.len());
    for (p, (name, g)) in analytic.iter().enumerate() {
        let indices: Vec<usize> = match opts.max_entries {
            Some(m) if m < g.len() => (0..m).map(|_| rng.below(g.len())).collect(),
            _ => (0..g.len()).collect(),
        };
        let mut check = ParamCheck {
            name: name.clone(),
            probed: indices.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &indices {
            let orig = probe.params_mut("")[p].1.data()[i];
            let numeric = central(opts.step, |delta| {
                probe.params_mut("")[p].1.data_mut()[i] = orig + delta;
                let loss = probe.loss(tokens).map(|(_, l)| l).unwrap_or(f64::NAN);
                probe.params_mut("")[p].1.data_mut()[i] = orig;
                loss
            });
            let err = relative_error(g[i], numeric, opts.floor);
            if !(err <= check.max_rel_error) {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = g[i];
                check.numeric = numeric;
            }
        }
        out.push(check);
    }
    Ok(out)
}
