//! Masked linear attention `O = (Q Kᵀ ⊙ M) V` with a decay-causal mask.
//!
//! [`reference_forward`] and [`reference_backward`] materialize the full
//! `n × n` mask and score matrices and serve as oracles. The lightning
//! kernels evaluate the same expression tile by tile, generating mask tiles
//! on the fly from the decay rate, and never hold more than a few tiles plus
//! the outputs.
//!
//! Two tile schedules are provided:
//!
//! * [`TileSchedule::Tiled`] visits every `B_r × B_c` tile that touches the
//!   lower triangle, for each row block accumulating `(Q_i K_jᵀ ⊙ M_ij) V_j`.
//!   Work is quadratic in `n`.
//! * [`TileSchedule::Carried`] computes only the diagonal blocks as tiles and
//!   folds every earlier block into a `d × d` state that is decayed by `λ^B`
//!   per block. Since all factors are powers `≤ 1`, this is the blockwise
//!   analogue of the robust recurrent update and runs in `O(n·(B + d)·d)`.

mod lightning;
mod reference;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub use lightning::{
    lightning_backward, lightning_backward_with_stats, lightning_forward, lightning_forward_with_stats, Lightning,
};
pub use reference::{
    reference_backward, reference_forward, reference_forward_masked, right_product_forward, softmax_backward,
    softmax_forward,
};

/// Single-head attention operands. `lambda` defines the decay-causal mask
/// `M[s][t] = λ^(s-t)` for `s ≥ t`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionInputs<'a, T: Scalar = f64> {
    pub q: &'a Tensor<T>,
    pub k: &'a Tensor<T>,
    pub v: &'a Tensor<T>,
    pub lambda: f64,
}

impl<'a, T: Scalar> AttentionInputs<'a, T> {
    pub fn new(q: &'a Tensor<T>, k: &'a Tensor<T>, v: &'a Tensor<T>, lambda: f64) -> Result<Self> {
        let inputs = Self { q, k, v, lambda };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<(usize, usize)> {
        let (n, d) = self.q.dims2()?;
        self.q.check_same_shape(self.k, "attention q/k")?;
        self.q.check_same_shape(self.v, "attention q/v")?;
        if n == 0 || d == 0 {
            return Err(Error::invalid("attention needs n ≥ 1 and d ≥ 1"));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::invalid(format!("decay rate {} outside (0, 1]", self.lambda)));
        }
        Ok((n, d))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TileSchedule {
    #[default]
    Tiled,
    Carried,
}

/// Tile geometry and execution switches for the lightning kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub block_rows: usize,
    pub block_cols: usize,
    #[serde(default)]
    pub schedule: TileSchedule,
    /// Skip tiles that lie entirely above the diagonal.
    #[serde(default = "default_true")]
    pub skip_upper: bool,
    /// Run independent row (forward) or column (backward) blocks on the
    /// rayon pool. Results are bitwise identical to the serial path.
    #[serde(default)]
    pub parallel: bool,
}

fn default_true() -> bool {
    true
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self::square(64)
    }
}

impl BlockConfig {
    pub fn new(block_rows: usize, block_cols: usize) -> Self {
        Self { block_rows, block_cols, schedule: TileSchedule::Tiled, skip_upper: true, parallel: false }
    }

    pub fn square(b: usize) -> Self {
        Self::new(b, b)
    }

    pub fn with_schedule(mut self, schedule: TileSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn with_skip_upper(mut self, skip: bool) -> Self {
        self.skip_upper = skip;
        self
    }

    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    /// Tile sizes clamped to the sequence length. Sizes below 1 are an error.
    pub fn effective(&self, n: usize) -> Result<(usize, usize)> {
        if self.block_rows == 0 || self.block_cols == 0 {
            return Err(Error::invalid(format!("tile sizes must be ≥ 1, got {}×{}", self.block_rows, self.block_cols)));
        }
        Ok((self.block_rows.min(n), self.block_cols.min(n)))
    }
}

/// Gradients of a single-head attention call.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads<T: Scalar = f64> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
}

impl<T: Scalar> AttentionGrads<T> {
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        Ok(self.dq.max_abs_diff(&other.dq)?.max(self.dk.max_abs_diff(&other.dk)?).max(self.dv.max_abs_diff(&other.dv)?))
    }
}

/// Counters collected by the lightning kernels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelStats {
    /// Tile-level multiply passes executed.
    pub tiles_computed: u64,
    /// Tiles skipped because they lie entirely above the diagonal.
    pub tiles_skipped: u64,
    /// Bytes copied from the operand tensors into scratch tiles.
    pub bytes_staged: u64,
    /// Largest scratch footprint held by a single worker.
    pub peak_scratch_bytes: u64,
    /// Carried-state updates (carried schedule only).
    pub state_updates: u64,
}

impl KernelStats {
    pub fn merge(&mut self, other: &KernelStats) {
        self.tiles_computed += other.tiles_computed;
        self.tiles_skipped += other.tiles_skipped;
        self.bytes_staged += other.bytes_staged;
        self.peak_scratch_bytes = self.peak_scratch_bytes.max(other.peak_scratch_bytes);
        self.state_updates += other.state_updates;
    }
}

/// Number of `B_r × B_c` tiles that intersect the lower triangle (diagonal
/// included) of an `n × n` mask.
pub fn lower_triangle_tiles(n: usize, block_rows: usize, block_cols: usize) -> u64 {
    let mut count = 0u64;
    let mut r0 = 0;
    while r0 < n {
        let last_row = (r0 + block_rows).min(n) - 1;
        count += (last_row / block_cols + 1) as u64;
        r0 += block_rows;
    }
    count
}
