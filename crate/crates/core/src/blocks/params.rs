use crate::error::{Error, Result};
use crate::numerics::io::Archive;
use crate::numerics::Tensor;

/// A tree of named parameter tensors visited in a fixed order.
///
/// Gradients and optimizer moments use the same types as the parameters, so
/// two structures with equal configuration visit aligned tensors.
pub trait ParamSet {
    fn params(&self, prefix: &str) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)>;

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (name, t) in self.params(prefix) {
            f(&name, t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (name, t) in self.params_mut(prefix) {
            f(&name, t);
        }
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |name, _| out.push(name.to_string()));
        out
    }

    /// Copy of `self` with every parameter set to zero.
    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, t| t.fill(0.0));
        z
    }

    /// Name of the first tensor holding a NaN or infinity.
    fn first_non_finite(&self) -> Option<String> {
        let mut bad = None;
        self.visit("", &mut |name, t| {
            if bad.is_none() && !t.all_finite() {
                bad = Some(name.to_string());
            }
        });
        bad
    }

    fn write_to(&self, archive: &mut Archive, prefix: &str) {
        self.visit(prefix, &mut |name, t| archive.insert(name, t));
    }

    /// Overwrites every parameter from `archive`, requiring matching shapes.
    fn read_from(&mut self, archive: &Archive, prefix: &str) -> Result<()> {
        let mut err = None;
        self.visit_mut(prefix, &mut |name, t| {
            if err.is_some() {
                return;
            }
            match archive.tensor::<f64>(name) {
                Ok(src) if src.shape() == t.shape() => *t = src,
                Ok(src) => {
                    err = Some(Error::Format(format!("`{name}` has shape {:?}, expected {:?}", src.shape(), t.shape())))
                }
                Err(e) => err = Some(e),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

/// Visits each child under `prefix` joined with its field name.
pub(crate) fn join(prefix: &str, name: &str) -> String {
    format!("{prefix}{name}")
}
