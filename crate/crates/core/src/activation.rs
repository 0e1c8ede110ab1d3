//! Pointwise nonlinearities and their derivatives.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Supported pointwise activations. `Identity` marks layers whose raw
/// output feeds the next stage (e.g. logits).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
    Silu,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Silu => "silu",
            Activation::Identity => "identity",
        }
    }

    /// Parse an activation name; unknown names are a configuration error.
    pub fn parse(name: &str) -> crate::error::Result<Self> {
        match name {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "silu" => Ok(Activation::Silu),
            "identity" => Ok(Activation::Identity),
            other => Err(crate::error::Error::Config(format!(
                "unknown activation kind '{other}' (expected relu, gelu, silu, or identity)"
            ))),
        }
    }

    #[inline]
    pub fn apply<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Relu => {
                if z > S::zero() {
                    z
                } else {
                    S::zero()
                }
            }
            // Exact erf form, not the tanh approximation.
            Activation::Gelu => {
                let half = S::from_f64_exact(0.5);
                let inv_sqrt2 = S::from_f64_exact(std::f64::consts::FRAC_1_SQRT_2);
                half * z * (S::one() + (z * inv_sqrt2).erf())
            }
            Activation::Silu => z * sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative at `z`. For ReLU the derivative at exactly 0 is 0, i.e.
    /// the neuron counts as inactive on the boundary.
    #[inline]
    pub fn derivative<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Relu => {
                if z > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Gelu => {
                let half = S::from_f64_exact(0.5);
                let inv_sqrt2 = S::from_f64_exact(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = S::from_f64_exact(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let cdf = half * (S::one() + (z * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-half * z * z).exp();
                cdf + z * pdf
            }
            Activation::Silu => {
                let s = sigmoid(z);
                s * (S::one() + z * (S::one() - s))
            }
            Activation::Identity => S::one(),
        }
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}
