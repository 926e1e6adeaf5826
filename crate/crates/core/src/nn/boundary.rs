//! Squashing map from unconstrained generator output into a search box:
//! `x = (upper - lower) * (B(y) + 1) / 2 + lower`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundaryKind {
    Tanh,
    /// Periodic; `y` and `y + 2π` land on the same point.
    Sin,
}

impl BoundaryKind {
    #[inline]
    pub fn squash(self, y: f64) -> f64 {
        match self {
            BoundaryKind::Tanh => super::layers::tanh(y),
            BoundaryKind::Sin => y.sin(),
        }
    }

    #[inline]
    pub fn squash_derivative(self, y: f64) -> f64 {
        match self {
            BoundaryKind::Tanh => {
                let t = super::layers::tanh(y);
                1.0 - t * t
            }
            BoundaryKind::Sin => y.cos(),
        }
    }

    /// Maps one coordinate into `[lower, upper]`.
    #[inline]
    pub fn map(self, y: f64, lower: f64, upper: f64) -> f64 {
        let x = (upper - lower) * (self.squash(y) + 1.0) * 0.5 + lower;
        x.clamp(lower, upper)
    }

    /// `dx/dy` of [`BoundaryKind::map`].
    #[inline]
    pub fn map_derivative(self, y: f64, lower: f64, upper: f64) -> f64 {
        (upper - lower) * 0.5 * self.squash_derivative(y)
    }
}

impl fmt::Display for BoundaryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundaryKind::Tanh => "tanh",
            BoundaryKind::Sin => "sin",
        })
    }
}

impl FromStr for BoundaryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(BoundaryKind::Tanh),
            "sin" => Ok(BoundaryKind::Sin),
            other => Err(Error::InvalidArgument(format!("unknown boundary kind `{other}`"))),
        }
    }
}

/// Maps a whole vector through the boundary function.
pub fn boundary_map(y: &[f64], lower: &[f64], upper: &[f64], kind: BoundaryKind) -> Vec<f64> {
    y.iter()
        .zip(lower.iter().zip(upper))
        .map(|(&v, (&lo, &hi))| kind.map(v, lo, hi))
        .collect()
}
