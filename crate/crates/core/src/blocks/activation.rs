use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::{elu, sigmoid, swish};
use crate::numerics::Tensor;

/// Feature map applied to queries and keys, or to the value branch of the
/// channel mixer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    OnePlusElu,
    Swish,
    None,
}

impl Activation {
    pub const ALL: [Activation; 3] = [Activation::OnePlusElu, Activation::Swish, Activation::None];

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::OnePlusElu => 1.0 + elu(x),
            Activation::Swish => swish(x),
            Activation::None => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::OnePlusElu => {
                if x >= 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Activation::None => 1.0,
        }
    }

    pub fn forward(self, x: &Tensor) -> Tensor {
        match self {
            Activation::None => x.clone(),
            _ => x.map(|v| self.apply(v)),
        }
    }

    /// `dy ⊙ φ'(x)`.
    pub fn backward(self, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        match self {
            Activation::None => {
                x.check_same_shape(dy, "activation_backward")?;
                Ok(dy.clone())
            }
            _ => x.zip_map(dy, "activation_backward", |x, g| g * self.derivative(x)),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "one_plus_elu" | "1+elu" | "elu" => Ok(Self::OnePlusElu),
            "swish" | "silu" => Ok(Self::Swish),
            "none" | "identity" => Ok(Self::None),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}
