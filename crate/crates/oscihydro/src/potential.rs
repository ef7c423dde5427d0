//! External potentials: the classical U(r) the particle moves in, and the
//! electromagnetic pair (A, φ) for minimal coupling.

use std::sync::Arc;

use crate::calculus;
use crate::constants::PhysicalConstants;
use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField};
use crate::grid::Grid;

/// The external potential, as a recipe rather than a baked field so one
/// scenario can evaluate it on several grids (and so analytic forces exist
/// where the form allows them).
#[derive(Debug, Clone)]
pub enum PotentialSpec {
    Free,
    /// ½ Σ_a m_a ω₀² x_a² — an isotropic well in configuration space, each
    /// axis weighted by its own mass.
    Harmonic { omega0: f64 },
    /// Zero potential inside an all-dirichlet grid; the walls are the box.
    Box,
    /// Slab of the given height for |x₀| ≤ width/2 along the first axis.
    Barrier { height: f64, width: f64 },
    /// −depth · exp(−|r|²/(2·width²)).
    GaussianWell { depth: f64, width: f64 },
    Tabulated(ScalarField),
}

impl PotentialSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            PotentialSpec::Harmonic { omega0 } if !(*omega0 > 0.0) => Err(Error::config(
                "potential.omega0",
                format!("harmonic frequency must be > 0, got {omega0}"),
            )),
            PotentialSpec::Barrier { width, .. } | PotentialSpec::GaussianWell { width, .. }
                if !(*width > 0.0) =>
            {
                Err(Error::config(
                    "potential.width",
                    format!("width must be > 0, got {width}"),
                ))
            }
            _ => Ok(()),
        }
    }

    /// Bake the potential into a field on `grid`.
    pub fn evaluate(&self, grid: &Arc<Grid>, consts: &PhysicalConstants) -> Result<ScalarField> {
        self.validate()?;
        match self {
            PotentialSpec::Free => Ok(ScalarField::zeros(grid)),
            PotentialSpec::Harmonic { omega0 } => {
                let w2 = omega0 * omega0;
                let masses: Vec<f64> = (0..grid.dims()).map(|a| consts.mass_for_axis(a)).collect();
                Ok(ScalarField::from_fn(grid, |p| {
                    0.5 * w2
                        * p.iter()
                            .zip(&masses)
                            .map(|(&x, &m)| m * x * x)
                            .sum::<f64>()
                }))
            }
            PotentialSpec::Box => {
                if !grid.is_all_dirichlet() {
                    return Err(Error::config(
                        "potential.kind",
                        "box potential needs dirichlet boundaries on every axis; \
                         on a periodic grid there are no walls",
                    ));
                }
                Ok(ScalarField::zeros(grid))
            }
            PotentialSpec::Barrier { height, width } => {
                let half = width / 2.0;
                Ok(ScalarField::from_fn(grid, |p| {
                    if p[0].abs() <= half {
                        *height
                    } else {
                        0.0
                    }
                }))
            }
            PotentialSpec::GaussianWell { depth, width } => {
                let inv2w2 = 1.0 / (2.0 * width * width);
                Ok(ScalarField::from_fn(grid, |p| {
                    let r2: f64 = p.iter().map(|&x| x * x).sum();
                    -depth * (-r2 * inv2w2).exp()
                }))
            }
            PotentialSpec::Tabulated(field) => {
                if field.grid().as_ref() != grid.as_ref() {
                    return Err(Error::GridMismatch {
                        context: "tabulated potential vs requested grid".into(),
                    });
                }
                Ok(field.clone())
            }
        }
    }

    /// Analytic force −∇U at a point, where the form admits one. `None` for
    /// barrier (discontinuous), box (walls) and tabulated potentials.
    pub fn force(&self, point: &[f64], consts: &PhysicalConstants) -> Option<Vec<f64>> {
        match self {
            PotentialSpec::Free => Some(vec![0.0; point.len()]),
            PotentialSpec::Harmonic { omega0 } => {
                let w2 = omega0 * omega0;
                Some(
                    point
                        .iter()
                        .enumerate()
                        .map(|(a, &x)| -consts.mass_for_axis(a) * w2 * x)
                        .collect(),
                )
            }
            PotentialSpec::GaussianWell { depth, width } => {
                let inv_w2 = 1.0 / (width * width);
                let r2: f64 = point.iter().map(|&x| x * x).sum();
                let u = -depth * (-r2 * inv_w2 / 2.0).exp();
                // ∂U/∂x_a = −u · x_a/w², force = −∂U
                Some(point.iter().map(|&x| u * x * inv_w2).collect())
            }
            PotentialSpec::Box | PotentialSpec::Barrier { .. } | PotentialSpec::Tabulated(_) => {
                None
            }
        }
    }

    /// True when [`force`](Self::force) returns values.
    pub fn has_analytic_force(&self) -> bool {
        matches!(
            self,
            PotentialSpec::Free | PotentialSpec::Harmonic { .. } | PotentialSpec::GaussianWell { .. }
        )
    }
}

/// Slowly-varying electromagnetic potentials (A, φ). Static in time: the
/// regime of interest is A changing on scales far longer than any simulated
/// window, so the time argument never enters.
#[derive(Debug, Clone)]
pub struct EmPotentialSpec {
    a: VectorField,
    phi: ScalarField,
}

impl EmPotentialSpec {
    pub fn new(a: VectorField, phi: ScalarField) -> Result<EmPotentialSpec> {
        a.component(0).same_grid(&phi, "EM potentials A vs phi")?;
        a.ensure_finite("vector potential")?;
        phi.ensure_finite("scalar potential")?;
        Ok(EmPotentialSpec { a, phi })
    }

    /// A ≡ 0, φ ≡ 0.
    pub fn zero(grid: &Arc<Grid>) -> EmPotentialSpec {
        EmPotentialSpec {
            a: VectorField::zeros(grid),
            phi: ScalarField::zeros(grid),
        }
    }

    /// Spatially uniform A with scalar potential φ.
    pub fn uniform_a(grid: &Arc<Grid>, a: &[f64], phi: ScalarField) -> Result<EmPotentialSpec> {
        EmPotentialSpec::new(VectorField::uniform(grid, a), phi)
    }

    pub fn a(&self) -> &VectorField {
        &self.a
    }

    pub fn phi(&self) -> &ScalarField {
        &self.phi
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.phi.grid()
    }

    /// E = −∇φ (A is static here, so the −(1/c)∂A/∂t part vanishes).
    pub fn electric_field(&self) -> Result<VectorField> {
        let grad = calculus::gradient(&self.phi)?;
        VectorField::from_components(
            grad.into_components()
                .into_iter()
                .map(|c| c.map(|v| -v))
                .collect(),
        )
    }

    /// The single out-of-plane component of rot A on a 2-axis grid:
    /// H_z = ∂A_y/∂x − ∂A_x/∂y.
    pub fn magnetic_field_2d(&self) -> Result<ScalarField> {
        if self.grid().dims() != 2 {
            return Err(Error::Scheme(
                "magnetic field as a scalar needs exactly 2 axes".into(),
            ));
        }
        let day_dx =
            calculus::derivative_axis(self.a.component(1), 0, calculus::DerivativeOrder::First)?;
        let dax_dy =
            calculus::derivative_axis(self.a.component(0), 1, calculus::DerivativeOrder::First)?;
        Ok(&day_dx - &dax_dy)
    }

    /// Largest deviation of any component of A from spatial uniformity.
    pub fn a_nonuniformity(&self) -> f64 {
        self.a
            .components()
            .iter()
            .map(|c| c.max_value() - c.min_value())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    #[test]
    fn harmonic_uses_per_axis_masses() {
        let g = Grid::periodic_2d([4.0, 4.0], [8, 8]);
        let consts = PhysicalConstants::with_masses(vec![1.0, 2.0]);
        let u = PotentialSpec::Harmonic { omega0: 1.0 }
            .evaluate(&g, &consts)
            .unwrap();
        // at (x, y) = (-2, -2): ½(1·4) + ½(2·4) = 6
        assert!((u.values()[0] - 6.0).abs() < 1e-14);
    }

    #[test]
    fn box_requires_dirichlet_walls() {
        let consts = PhysicalConstants::default();
        let periodic = Grid::periodic_1d(2.0, 16);
        assert!(PotentialSpec::Box.evaluate(&periodic, &consts).is_err());
        let walls = Grid::dirichlet_1d(2.0, 16);
        assert!(PotentialSpec::Box.evaluate(&walls, &consts).is_ok());
    }

    #[test]
    fn gaussian_well_force_matches_gradient() {
        let g = Grid::periodic_1d(10.0, 128);
        let consts = PhysicalConstants::default();
        let spec = PotentialSpec::GaussianWell {
            depth: 0.7,
            width: 1.3,
        };
        let u = spec.evaluate(&g, &consts).unwrap();
        let grad = calculus::gradient(&u).unwrap();
        let x = 0.9375;
        let numeric = -calculus::sample_multilinear(grad.component(0), &[x]).unwrap();
        let analytic = spec.force(&[x], &consts).unwrap()[0];
        assert!(
            (numeric - analytic).abs() < 1e-3,
            "numeric {numeric} vs analytic {analytic}"
        );
    }

    #[test]
    fn electric_field_is_minus_grad_phi() {
        let g = Grid::periodic_1d(4.0, 64);
        let phi = ScalarField::from_fn(&g, |p| (std::f64::consts::PI * p[0] / 2.0).sin());
        let em = EmPotentialSpec::new(VectorField::zeros(&g), phi).unwrap();
        let e = em.electric_field().unwrap();
        let exact = ScalarField::from_fn(&g, |p| {
            -(std::f64::consts::PI / 2.0) * (std::f64::consts::PI * p[0] / 2.0).cos()
        });
        assert!(e.component(0).linf_diff(&exact) < 1e-10);
    }

    #[test]
    fn rot_of_uniform_a_vanishes() {
        let g = Grid::periodic_2d([4.0, 4.0], [16, 16]);
        let em = EmPotentialSpec::uniform_a(&g, &[0.5, -1.5], ScalarField::zeros(&g)).unwrap();
        assert!(em.magnetic_field_2d().unwrap().max_abs() < 1e-12);
        assert_eq!(em.a_nonuniformity(), 0.0);
    }
}
