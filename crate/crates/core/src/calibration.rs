//! Constants that the theory leaves unnamed.
//!
//! None of these are derivable from first principles; they only enter
//! diagnostic inequalities and the planner, and default to 1 (with `h0 = 0.5`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Calibration constants for the Galerkin estimate, the eigenvector bound and
/// the sub-Gaussian tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Calibration {
    /// Eigenvalue Galerkin constant: `|λ_ℓ − λ_ℓ^h| ≤ c1 h^{2s} / λ_ℓ`-type bound.
    pub c1: f64,
    /// Eigenfunction Galerkin constant.
    pub c2: f64,
    /// Eigenvector perturbation constant.
    pub c: f64,
    /// Largest admissible mesh width.
    pub h0: f64,
    /// Sub-Gaussian tail constant.
    pub rho1: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration { c1: 1.0, c2: 1.0, c: 1.0, h0: 0.5, rho1: 1.0 }
    }
}

impl Calibration {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("c1", self.c1),
            ("c2", self.c2),
            ("c", self.c),
            ("h0", self.h0),
            ("rho1", self.rho1),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("calibration.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = Calibration::default();
        c.validate().unwrap();
        assert_eq!((c.c1, c.h0), (1.0, 0.5));
    }

    #[test]
    fn nonpositive_constant_is_named() {
        let c = Calibration { rho1: 0.0, ..Default::default() };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("rho1"), "{msg}");
    }
}
