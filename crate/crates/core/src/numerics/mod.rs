//! Dense tensor substrate: storage, products, pointwise maps, seeded init,
//! binary I/O and allocation metering.

pub mod finite_diff;
pub mod io;
pub mod meter;
pub mod ops;
mod rng;
mod scalar;
mod tensor;

pub use ops::{dot, elementwise, l2_norm_lastdim, matmul, matmul_a_bt, matmul_at_b, ElementwiseOp, Operand};
pub use rng::SeededRng;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
