//! Single-process simulation of tensor-parallel SGLU and GLA layers.
//!
//! Each simulated worker holds a slice of the weights, computes a partial
//! output and contributes it to one all-reduce per pass.

mod ledger;
mod sharded;

pub use ledger::{CollectiveLedger, Pass};
pub use sharded::{GlaShard, ShardedGla, ShardedSglu};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// How simulated workers are scheduled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    #[default]
    Sequential,
    /// One OS thread per worker, joined before every collective.
    Threaded,
}

/// Which axis of a `[in × out]` weight is split across workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitAxis {
    Columns,
    Rows,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardPlan {
    world: usize,
    execution: Execution,
}

impl ShardPlan {
    pub fn new(world: usize) -> Result<Self> {
        if world == 0 {
            return Err(Error::invalid("world size must be ≥ 1"));
        }
        Ok(Self { world, execution: Execution::Sequential })
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn world(&self) -> usize {
        self.world
    }

    pub fn execution(&self) -> Execution {
        self.execution
    }

    /// Runs `f` once per worker and returns results in worker order.
    pub(crate) fn run<R, F>(&self, f: F) -> Result<Vec<R>>
    where
        R: Send,
        F: Fn(usize) -> Result<R> + Sync,
    {
        match self.execution {
            Execution::Sequential => (0..self.world).map(&f).collect(),
            Execution::Threaded => std::thread::scope(|s| {
                let f = &f;
                let handles: Vec<_> = (0..self.world).map(|w| s.spawn(move || f(w))).collect();
                handles.into_iter().map(|h| h.join().map_err(|_| Error::invalid("worker thread panicked"))?).collect()
            }),
        }
    }
}

/// Splits a matrix into `world` equal contiguous pieces along `axis`.
pub fn split(t: &Tensor, axis: SplitAxis, world: usize) -> Result<Vec<Tensor>> {
    let (r, c) = t.dims2()?;
    let extent = match axis {
        SplitAxis::Columns => c,
        SplitAxis::Rows => r,
    };
    if world == 0 || extent % world != 0 {
        return Err(Error::invalid(format!("cannot split extent {extent} into {world} equal parts")));
    }
    let w = extent / world;
    (0..world)
        .map(|i| match axis {
            SplitAxis::Columns => t.column_block(i * w, w),
            SplitAxis::Rows => t.slice_rows(i * w, w),
        })
        .collect()
}

/// Inverse of [`split`].
pub fn unsplit(parts: &[Tensor], axis: SplitAxis) -> Result<Tensor> {
    let refs: Vec<&Tensor> = parts.iter().collect();
    match axis {
        SplitAxis::Columns => Tensor::concat_columns(&refs),
        SplitAxis::Rows => Tensor::concat_rows(&refs),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    #[test]
    fn split_round_trips() {
        let t: Tensor = SeededRng::new(1).normal(&[6, 8], 0.0, 1.0);
        for world in [1, 2, 4] {
            for axis in [SplitAxis::Columns, SplitAxis::Rows] {
                if axis == SplitAxis::Rows && 6 % world != 0 {
                    assert!(split(&t, axis, world).is_err());
                    continue;
                }
                let parts = split(&t, axis, world).unwrap();
                assert_eq!(parts.len(), world);
                assert_eq!(unsplit(&parts, axis).unwrap(), t);
            }
        }
        assert!(split(&t, SplitAxis::Columns, 3).is_err());
        assert!(ShardPlan::new(0).is_err());
    }

    #[test]
    fn threaded_run_keeps_worker_order() {
        let plan = ShardPlan::new(4).unwrap().with_execution(Execution::Threaded);
        assert_eq!(plan.run(|w| Ok(w * 10)).unwrap(), vec![0, 10, 20, 30]);
        assert!(plan.run(|w| if w == 2 { Err(Error::invalid("x")) } else { Ok(w) }).is_err());
    }
}
