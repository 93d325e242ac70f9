//! Scalar activations and their derivatives.
//!
//! The gated constructions require a non-polynomial analytic activation; the
//! finite-difference reduction additionally needs each activation's
//! derivative to be available *as an activation* (the gadget is fit with the
//! derivative, then approximated by central differences of the original).

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{FactError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Tanh,
    Gelu,
    Relu,
    SiluDeriv,
    TanhDeriv,
    GeluDeriv,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn std_normal_pdf(z: f64) -> f64 {
    (-(z * z) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

impl Activation {
    pub fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z * sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::Gelu => z * std_normal_cdf(z),
            Activation::Relu => z.max(0.0),
            Activation::SiluDeriv => {
                let s = sigmoid(z);
                s + z * s * (1.0 - s)
            }
            Activation::TanhDeriv => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::GeluDeriv => std_normal_cdf(z) + z * std_normal_pdf(z),
        }
    }

    /// First derivative of `eval`. Relu uses the subgradient 0 at z = 0.
    pub fn deriv(self, z: f64) -> f64 {
        match self {
            Activation::Silu => Activation::SiluDeriv.eval(z),
            Activation::Tanh => Activation::TanhDeriv.eval(z),
            Activation::Gelu => Activation::GeluDeriv.eval(z),
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::SiluDeriv => {
                let s = sigmoid(z);
                s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))
            }
            Activation::TanhDeriv => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::GeluDeriv => std_normal_pdf(z) * (2.0 - z * z),
        }
    }

    /// Whether the function is analytic and non-polynomial, the condition
    /// under which the gadget design matrix is generically full row rank.
    pub fn is_analytic_nonpolynomial(self) -> bool {
        !matches!(self, Activation::Relu)
    }

    /// The activation computing this one's derivative, for the activations
    /// admitted by the non-gated reduction.
    pub fn derivative_activation(self) -> Result<Activation> {
        match self {
            Activation::Silu => Ok(Activation::SiluDeriv),
            Activation::Tanh => Ok(Activation::TanhDeriv),
            Activation::Gelu => Ok(Activation::GeluDeriv),
            other => Err(FactError::invalid(format!(
                "activation {other:?} has no registered derivative activation"
            ))),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
            Activation::SiluDeriv => "silu_deriv",
            Activation::TanhDeriv => "tanh_deriv",
            Activation::GeluDeriv => "gelu_deriv",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Activation> {
        Ok(match tag {
            "silu" => Activation::Silu,
            "tanh" => Activation::Tanh,
            "gelu" => Activation::Gelu,
            "relu" => Activation::Relu,
            "silu_deriv" => Activation::SiluDeriv,
            "tanh_deriv" => Activation::TanhDeriv,
            "gelu_deriv" => Activation::GeluDeriv,
            other => return Err(FactError::invalid(format!("unknown activation '{other}'"))),
        })
    }
}
