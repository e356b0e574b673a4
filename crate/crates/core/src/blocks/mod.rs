//! Layer building blocks: normalization, the gated linear attention token
//! mixer, the gated channel mixer and the pre-norm residual block. Forward
//! and hand-derived backward passes run in double precision.

mod activation;
mod block;
mod gla;
mod norm;
mod params;
mod sglu;

pub use activation::Activation;
pub use block::{BlockCache, BlockParams};
pub use gla::{AttentionPath, GlaCache, GlaOptions, GlaParams, GlaProjections, NormMode};
pub use norm::{srmsnorm, srmsnorm_backward, Norm, NormKind, NormVariant, DEFAULT_EPS};
pub use params::ParamSet;
pub use sglu::{hidden_width, SgluCache, SgluParams, DEFAULT_HIDDEN_RATIO};

pub(crate) use norm::srms_row;
