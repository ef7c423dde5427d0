use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensionless physical constants. The default is the natural-unit choice
/// ħ = m = q = c = 1, but every formula in the crate keeps the symbols so
/// unit scaling stays testable.
///
/// `masses` holds one entry per grid axis for configuration-space problems
/// (each axis is one degree of freedom with its own mass). A single entry
/// broadcasts to every axis, which is the ordinary one-particle case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    pub hbar: f64,
    pub masses: Vec<f64>,
    pub charge: f64,
    pub light_speed: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        PhysicalConstants {
            hbar: 1.0,
            masses: vec![1.0],
            charge: 1.0,
            light_speed: 1.0,
        }
    }
}

impl PhysicalConstants {
    pub fn with_hbar(hbar: f64) -> Self {
        PhysicalConstants {
            hbar,
            ..Default::default()
        }
    }

    pub fn with_masses(masses: Vec<f64>) -> Self {
        PhysicalConstants {
            masses,
            ..Default::default()
        }
    }

    /// The single-particle mass. Panics if the constants were built for a
    /// multi-mass configuration space; use [`mass_for_axis`](Self::mass_for_axis)
    /// there instead.
    pub fn mass(&self) -> f64 {
        assert_eq!(
            self.masses.len(),
            1,
            "scalar mass requested from multi-mass constants"
        );
        self.masses[0]
    }

    /// Mass of the degree of freedom living on `axis`, broadcasting a single
    /// entry across all axes.
    pub fn mass_for_axis(&self, axis: usize) -> f64 {
        if self.masses.len() == 1 {
            self.masses[0]
        } else {
            self.masses[axis]
        }
    }

    pub fn validate(&self, dims: usize) -> Result<()> {
        if !(self.hbar > 0.0) {
            return Err(Error::config("hbar", format!("must be > 0, got {}", self.hbar)));
        }
        if !(self.light_speed > 0.0) {
            return Err(Error::config(
                "light_speed",
                format!("must be > 0, got {}", self.light_speed),
            ));
        }
        if self.masses.is_empty() {
            return Err(Error::config("masses", "at least one mass is required"));
        }
        if self.masses.len() != 1 && self.masses.len() != dims {
            return Err(Error::config(
                "masses",
                format!(
                    "got {} masses for a {}-axis grid; give one (broadcast) or one per axis",
                    self.masses.len(),
                    dims
                ),
            ));
        }
        for (k, &m) in self.masses.iter().enumerate() {
            if !(m > 0.0) {
                return Err(Error::config("masses", format!("mass {k} must be > 0, got {m}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_natural_units() {
        let c = PhysicalConstants::default();
        assert_eq!(c.hbar, 1.0);
        assert_eq!(c.mass(), 1.0);
        assert_eq!(c.charge, 1.0);
        assert_eq!(c.light_speed, 1.0);
    }

    #[test]
    fn single_mass_broadcasts() {
        let c = PhysicalConstants::default();
        assert_eq!(c.mass_for_axis(0), 1.0);
        assert_eq!(c.mass_for_axis(2), 1.0);

        let two = PhysicalConstants::with_masses(vec![1.0, 3.0]);
        assert_eq!(two.mass_for_axis(0), 1.0);
        assert_eq!(two.mass_for_axis(1), 3.0);
    }

    #[test]
    fn validation_rejects_nonpositive() {
        assert!(PhysicalConstants::with_hbar(0.0).validate(1).is_err());
        assert!(PhysicalConstants::with_masses(vec![-1.0]).validate(1).is_err());
        assert!(PhysicalConstants::with_masses(vec![1.0, 1.0]).validate(3).is_err());
        assert!(PhysicalConstants::with_masses(vec![1.0, 1.0]).validate(2).is_ok());
    }
}
