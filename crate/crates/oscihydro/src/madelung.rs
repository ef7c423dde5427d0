//! The Madelung bridge between a wavefunction and its hydrodynamic fields:
//! ψ = √ρ · exp(iS/ħ), so ρ = |ψ|² and S = ħ · (unwrapped phase).
//!
//! Phase unwrapping is anchored at the global density maximum — the most
//! trustworthy sample — and propagated axis by axis. Wherever the density
//! sinks below the caller's floor along an unwrapping path, the phase is
//! numerically meaningless and the crate refuses to guess: that is the node
//! error. The fast-oscillation formulation assumes node-free densities, so
//! surfacing the node beats silently jumping 2π across it.

use crate::constants::PhysicalConstants;
use crate::error::{Error, Result};
use crate::field::{ScalarField, Wavefunction};
use num_complex::Complex64;
use std::f64::consts::TAU;

/// The spec'd default floor: 1e-12 of the density peak. Wide domains whose
/// genuine wings sit below this need an explicitly smaller floor.
pub fn default_rho_floor(rho: &ScalarField) -> f64 {
    1e-12 * rho.max_value()
}

/// ψ → (ρ, S). `rho_floor` is an absolute density threshold below which a
/// sample counts as a node.
pub fn madelung_decompose(
    psi: &Wavefunction,
    consts: &PhysicalConstants,
    rho_floor: f64,
) -> Result<(ScalarField, ScalarField)> {
    psi.ensure_finite("madelung input")?;
    let grid = psi.grid().clone();
    let rho = psi.density();

    // raw phase in (−π, π]
    let mut theta: Vec<f64> = psi.values().iter().map(|z| z.arg()).collect();

    let anchor_flat = rho
        .values()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("grid is never empty");
    let mut anchor = [0usize; 3];
    grid.unflatten(anchor_flat, &mut anchor);

    let dims = grid.dims();
    let strides = grid.strides().to_vec();
    let rho_vals = rho.values().to_vec();

    // Unwrap one lattice line: fix `theta[at(j)]` for every j ≠ start so the
    // jump from its already-unwrapped neighbour is < π, erroring on nodes.
    let unwrap_line = |theta: &mut [f64], base: usize, stride: usize, n: usize, start: usize| -> Result<()> {
        let mut sweep = |range: Box<dyn Iterator<Item = usize>>| -> Result<()> {
            let mut prev = base + start * stride;
            for j in range {
                let at = base + j * stride;
                if rho_vals[at] < rho_floor {
                    return Err(Error::NodeEncountered {
                        index: at,
                        density: rho_vals[at],
                        floor: rho_floor,
                    });
                }
                let jump = theta[at] - theta[prev];
                theta[at] -= TAU * (jump / TAU).round();
                prev = at;
            }
            Ok(())
        };
        sweep(Box::new(start + 1..n))?;
        sweep(Box::new((0..start).rev()))?;
        Ok(())
    };

    // The anchor itself must sit above the floor.
    if rho_vals[anchor_flat] < rho_floor {
        return Err(Error::NodeEncountered {
            index: anchor_flat,
            density: rho_vals[anchor_flat],
            floor: rho_floor,
        });
    }

    // Axis 0: the single line through the anchor.
    {
        let mut base = 0usize;
        for a in 1..dims {
            base += anchor[a] * strides[a];
        }
        unwrap_line(&mut theta, base, strides[0], grid.axis(0).points, anchor[0])?;
    }
    // Axis 1: one line per axis-0 index, anchored where axis 0 already ran.
    if dims >= 2 {
        for i0 in 0..grid.axis(0).points {
            let mut base = i0 * strides[0];
            if dims == 3 {
                base += anchor[2] * strides[2];
            }
            unwrap_line(&mut theta, base, strides[1], grid.axis(1).points, anchor[1])?;
        }
    }
    // Axis 2: one line per (axis-0, axis-1) pair.
    if dims == 3 {
        for i0 in 0..grid.axis(0).points {
            for i1 in 0..grid.axis(1).points {
                let base = i0 * strides[0] + i1 * strides[1];
                unwrap_line(&mut theta, base, strides[2], grid.axis(2).points, anchor[2])?;
            }
        }
    }

    let s = ScalarField::from_values(&grid, theta.into_iter().map(|t| consts.hbar * t).collect())?;
    Ok((rho, s))
}

/// (ρ, S) → ψ = √ρ · exp(iS/ħ).
pub fn madelung_compose(
    rho: &ScalarField,
    s: &ScalarField,
    consts: &PhysicalConstants,
) -> Result<Wavefunction> {
    rho.same_grid(s, "madelung compose rho vs S")?;
    rho.ensure_finite("density")?;
    s.ensure_finite("action")?;
    if let Some((index, &value)) = rho
        .values()
        .iter()
        .enumerate()
        .find(|(_, &v)| v < 0.0)
    {
        return Err(Error::NegativeDensity { index, value });
    }
    let inv_hbar = 1.0 / consts.hbar;
    let values = rho
        .values()
        .iter()
        .zip(s.values())
        .map(|(&r, &sv)| Complex64::from_polar(r.sqrt(), sv * inv_hbar))
        .collect();
    Wavefunction::from_values(rho.grid(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use std::f64::consts::PI;

    fn consts() -> PhysicalConstants {
        PhysicalConstants::default()
    }

    #[test]
    fn round_trip_recovers_density_and_phase() {
        let g = Grid::periodic_1d(12.0, 128);
        let norm = 1.0 / (2.0 * PI).sqrt();
        let rho = ScalarField::from_fn(&g, |p| norm * (-p[0] * p[0] / 2.0).exp());
        // deliberately winds through several multiples of 2π
        let s = ScalarField::from_fn(&g, |p| 0.4 * p[0] * p[0] + 3.0 * p[0]);
        let psi = madelung_compose(&rho, &s, &consts()).unwrap();
        let (rho2, s2) = madelung_decompose(&psi, &consts(), 1e-40).unwrap();

        assert!(rho2.linf_diff(&rho) <= 1e-10);
        // S is defined up to a global constant; remove it at the anchor
        let offset = s2.values()[64] - s.values()[64];
        let s2_shifted = s2.map(|v| v - offset);
        assert!(s2_shifted.linf_diff(&s) <= 1e-10);
    }

    #[test]
    fn plane_wave_has_linear_action() {
        let length = 8.0;
        let g = Grid::periodic_1d(length, 64);
        let k = 2.0 * PI * 3.0 / length;
        let psi =
            Wavefunction::from_fn(&g, |p| Complex64::new(0.0, k * p[0]).exp()).normalized();
        let (rho, s) = madelung_decompose(&psi, &consts(), 1e-15).unwrap();
        let flat = 1.0 / length;
        assert!((rho.max_value() - flat).abs() <= 1e-12);
        assert!((rho.min_value() - flat).abs() <= 1e-12);
        // S = ħkx + const
        let expected = ScalarField::from_fn(&g, |p| k * p[0]);
        let offset = s.values()[0] - expected.values()[0];
        assert!(s.map(|v| v - offset).linf_diff(&expected) <= 1e-10);
    }

    #[test]
    fn nodes_are_reported_not_jumped() {
        let g = Grid::periodic_1d(8.0, 64);
        // ψ = sin(2πx/L)·e^{i·0}: a genuine node at x = 0
        let psi = Wavefunction::from_fn(&g, |p| {
            Complex64::new((2.0 * PI * p[0] / 8.0).sin(), 0.0)
        })
        .normalized();
        let rho = psi.density();
        let err = madelung_decompose(&psi, &consts(), default_rho_floor(&rho));
        assert!(matches!(err, Err(Error::NodeEncountered { .. })));
    }

    #[test]
    fn compose_rejects_negative_density() {
        let g = Grid::periodic_1d(8.0, 64);
        let mut rho = ScalarField::constant(&g, 0.125);
        rho.values_mut()[10] = -1e-3;
        let s = ScalarField::zeros(&g);
        assert!(matches!(
            madelung_compose(&rho, &s, &consts()),
            Err(Error::NegativeDensity { .. })
        ));
    }

    #[test]
    fn unwrapping_works_in_two_dimensions() {
        let g = Grid::periodic_2d([10.0, 10.0], [48, 48]);
        let rho = ScalarField::from_fn(&g, |p| (-(p[0] * p[0] + p[1] * p[1]) / 2.0).exp());
        let s = ScalarField::from_fn(&g, |p| 1.5 * p[0] * p[1] + 0.7 * p[0]);
        let psi = madelung_compose(&rho, &s, &consts()).unwrap();
        let (_, s2) = madelung_decompose(&psi, &consts(), 1e-30).unwrap();
        let mid = g.flatten(&[24, 24]);
        let offset = s2.values()[mid] - s.values()[mid];
        assert!(s2.map(|v| v - offset).linf_diff(&s) <= 1e-9);
    }

    #[test]
    fn decompose_scales_with_hbar() {
        let g = Grid::periodic_1d(8.0, 64);
        let k = 2.0 * PI / 8.0;
        let psi =
            Wavefunction::from_fn(&g, |p| Complex64::new(0.0, k * p[0]).exp()).normalized();
        let scaled = PhysicalConstants::with_hbar(3.0);
        let (_, s) = madelung_decompose(&psi, &scaled, 1e-15).unwrap();
        // same phase, three times the action
        let expected = ScalarField::from_fn(&g, |p| 3.0 * k * p[0]);
        let offset = s.values()[0] - expected.values()[0];
        assert!(s.map(|v| v - offset).linf_diff(&expected) <= 1e-10);
    }
}
