pub mod attention;
pub mod blocks;
pub mod error;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod parallel_sim;
pub mod positional;

pub use error::{Error, Result};
