//! FELU ("fake ELU") and the activations an ELF network may use.
//!
//! FELU is `x` for `x > 0`, `(x+1)²/2 − 1/2` on `[−1, 0]` and `−1/2` below
//! `−1`. It is C¹ with piecewise-constant second derivative, so the slope of a
//! one-layer FELU network is piecewise linear and its maximum sits on a
//! breakpoint.

use std::fmt;
use std::str::FromStr;

use crate::error::ElfError;

pub fn felu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else if x >= -1.0 {
        0.5 * (x + 1.0) * (x + 1.0) - 0.5
    } else {
        -0.5
    }
}

/// First derivative; breakpoints take the quadratic-piece value.
pub fn felu_d1(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x >= -1.0 {
        x + 1.0
    } else {
        0.0
    }
}

/// Second derivative; `1` on the closed interval `[−1, 0]`.
pub fn felu_d2(x: f64) -> f64 {
    if (-1.0..=0.0).contains(&x) {
        1.0
    } else {
        0.0
    }
}

/// Activation used inside an ELF network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Activation {
    #[default]
    Felu,
    /// Kept for the trainability comparison; its second derivative is zero.
    Relu,
}

impl Activation {
    #[inline]
    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::Felu => felu(x),
            Activation::Relu => x.max(0.0),
        }
    }

    #[inline]
    pub fn d1(self, x: f64) -> f64 {
        match self {
            Activation::Felu => felu_d1(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    #[inline]
    pub fn d2(self, x: f64) -> f64 {
        match self {
            Activation::Felu => felu_d2(x),
            Activation::Relu => 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Felu => "felu",
            Activation::Relu => "relu",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = ElfError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "felu" => Ok(Activation::Felu),
            "relu" => Ok(Activation::Relu),
            other => Err(ElfError::Config(format!("unknown activation `{other}`"))),
        }
    }
}
