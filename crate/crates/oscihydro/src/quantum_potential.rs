//! The quantum potential and its relatives.
//!
//! For ψ = √ρ e^{iS/ħ} the quantum Hamilton–Jacobi equation carries one term
//! beyond classical mechanics, the quantum potential
//!
//! ```text
//! U_q = −(ħ²/2m) ∇²√ρ / √ρ                       (√ρ form)
//!     = (ħ²/2m) (|∇ρ|²/4ρ² − ∇²ρ/2ρ)             (expanded form)
//!     = U'_q + U''_q
//! U'_q  = (ħ²/8m) |∇ln ρ|²     U''_q = −(ħ²/4m) ∇²ρ/ρ
//! ```
//!
//! The split matters because U'_q is exactly a ponderomotive potential: a
//! rapidly oscillating force f = f_c cos ωt + f_s sin ωt confines a particle
//! with the cycle-averaged potential U_p = (|f_c|² + |f_s|²)/4mω², and the
//! choice f_c = (ħω/√2)∇ln ρ, f_s = 0 gives U_p ≡ U'_q identically. That
//! correspondence is what motivates replacing the quantum potential by an
//! oscillating pressure in the flow solver.

use crate::calculus;
use crate::constants::PhysicalConstants;
use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField};

/// Variants of the effective potential a trajectory can be run in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EffectiveVariant {
    /// U + U_q — reproduces exact quantum (Bohmian) trajectories.
    Schrodinger,
    /// U + U'_q — the variational form; only the ponderomotive part.
    Variational,
    /// U − (ħω/√2)cos(ωt)·ln ρ at the given instant — the true oscillating
    /// potential whose cycle average regenerates the quantum terms.
    TrueOscillating { t: f64, omega: f64 },
}

fn check_floor(rho: &ScalarField, rho_floor: f64) -> Result<()> {
    rho.ensure_finite("density")?;
    if let Some((index, &value)) = rho
        .values()
        .iter()
        .enumerate()
        .find(|(_, &v)| v < rho_floor)
    {
        return Err(Error::NodeEncountered {
            index,
            density: value,
            floor: rho_floor,
        });
    }
    Ok(())
}

/// ln of the density, clamped at the floor — the one regularization knob
/// every ln ρ / 1/ρ in the crate goes through.
pub fn log_density(rho: &ScalarField, rho_floor: f64) -> ScalarField {
    rho.map(|v| v.max(rho_floor).ln())
}

/// ∇ln ρ, computed as ∇ρ/ρ. Differentiating ρ rather than ln ρ matters on
/// periodic grids: a localized density is numerically periodic while its
/// logarithm is not (a Gaussian's log is a parabola), and spectral
/// differentiation of the non-periodic logarithm rings across the whole box.
pub fn log_density_gradient(rho: &ScalarField, rho_floor: f64) -> Result<VectorField> {
    let grad = calculus::gradient(rho)?;
    VectorField::from_components(
        grad.into_components()
            .into_iter()
            .map(|c| c.zip_map(rho, |g, r| g / r.max(rho_floor)))
            .collect(),
    )
}

/// U_q via the √ρ form (the primary definition).
pub fn quantum_potential(
    rho: &ScalarField,
    consts: &PhysicalConstants,
    rho_floor: f64,
) -> Result<ScalarField> {
    check_floor(rho, rho_floor)?;
    let coef = -consts.hbar * consts.hbar / (2.0 * consts.mass());
    let sqrt_rho = rho.map(f64::sqrt);
    let lap = calculus::laplacian(&sqrt_rho)?;
    Ok(lap.zip_map(&sqrt_rho, |l, s| coef * l / s.max(rho_floor.sqrt())))
}

/// U_q via the expanded form — same field up to discretization error, and a
/// sensitive stencil cross-check precisely because the algebra differs.
pub fn quantum_potential_expanded(
    rho: &ScalarField,
    consts: &PhysicalConstants,
    rho_floor: f64,
) -> Result<ScalarField> {
    check_floor(rho, rho_floor)?;
    let h2_2m = consts.hbar * consts.hbar / (2.0 * consts.mass());
    let grad = calculus::gradient(rho)?;
    let lap = calculus::laplacian(rho)?;
    let grad2 = grad.magnitude_squared();
    let mut out = ScalarField::zeros(rho.grid());
    let n = out.values().len();
    for i in 0..n {
        let r = rho.values()[i].max(rho_floor);
        out.values_mut()[i] =
            h2_2m * (grad2.values()[i] / (4.0 * r * r) - lap.values()[i] / (2.0 * r));
    }
    Ok(out)
}

/// (U'_q, U''_q): the ponderomotive part and the rest.
pub fn quantum_potential_parts(
    rho: &ScalarField,
    consts: &PhysicalConstants,
    rho_floor: f64,
) -> Result<(ScalarField, ScalarField)> {
    check_floor(rho, rho_floor)?;
    let grad_ln = log_density_gradient(rho, rho_floor)?;
    let prime_coef = consts.hbar * consts.hbar / (8.0 * consts.mass());
    let u_prime = grad_ln.magnitude_squared().map(|v| prime_coef * v);

    let lap = calculus::laplacian(rho)?;
    let dprime_coef = -consts.hbar * consts.hbar / (4.0 * consts.mass());
    let u_dprime = lap.zip_map(rho, |l, r| dprime_coef * l / r.max(rho_floor));
    Ok((u_prime, u_dprime))
}

/// Everything at once, sharing the derivative work.
pub struct QuantumPotentialSet {
    pub u_q: ScalarField,
    pub u_q_prime: ScalarField,
    pub u_q_dprime: ScalarField,
    pub u_ef_schrodinger: ScalarField,
    pub u_ef_variational: ScalarField,
}

impl QuantumPotentialSet {
    pub fn compute(
        u: &ScalarField,
        rho: &ScalarField,
        consts: &PhysicalConstants,
        rho_floor: f64,
    ) -> Result<QuantumPotentialSet> {
        u.same_grid(rho, "external potential vs density")?;
        let u_q = quantum_potential(rho, consts, rho_floor)?;
        let (u_q_prime, u_q_dprime) = quantum_potential_parts(rho, consts, rho_floor)?;
        let u_ef_schrodinger = u + &u_q;
        let u_ef_variational = u + &u_q_prime;
        Ok(QuantumPotentialSet {
            u_q,
            u_q_prime,
            u_q_dprime,
            u_ef_schrodinger,
            u_ef_variational,
        })
    }

    /// Max-norm residual of the decomposition U_q = U'_q + U''_q, which holds
    /// exactly in the continuum and to discretization accuracy here.
    pub fn decomposition_residual(&self) -> f64 {
        let sum = &self.u_q_prime + &self.u_q_dprime;
        self.u_q.linf_diff(&sum)
    }
}

/// The effective potential of the chosen picture.
pub fn effective_potential(
    u: &ScalarField,
    rho: &ScalarField,
    variant: EffectiveVariant,
    consts: &PhysicalConstants,
    rho_floor: f64,
) -> Result<ScalarField> {
    u.same_grid(rho, "external potential vs density")?;
    match variant {
        EffectiveVariant::Schrodinger => {
            let u_q = quantum_potential(rho, consts, rho_floor)?;
            Ok(u + &u_q)
        }
        EffectiveVariant::Variational => {
            let (u_q_prime, _) = quantum_potential_parts(rho, consts, rho_floor)?;
            Ok(u + &u_q_prime)
        }
        EffectiveVariant::TrueOscillating { t, omega } => {
            if !(omega > 0.0) {
                return Err(Error::config(
                    "omega",
                    format!("oscillation frequency must be > 0, got {omega}"),
                ));
            }
            check_floor(rho, rho_floor)?;
            let amp = true_oscillating_amplitude(rho, omega, consts, rho_floor);
            let c = (omega * t).cos();
            Ok(u.zip_map(&amp, |uv, av| uv + c * av))
        }
    }
}

/// Amplitude field of the true oscillating quantum potential:
/// U_rq(r, t) = cos(ωt) · amplitude, amplitude = −(ħω/√2)·ln ρ.
pub fn true_oscillating_amplitude(
    rho: &ScalarField,
    omega: f64,
    consts: &PhysicalConstants,
    rho_floor: f64,
) -> ScalarField {
    let coef = -consts.hbar * omega / std::f64::consts::SQRT_2;
    log_density(rho, rho_floor).map(|v| coef * v)
}

/// A rapidly oscillating force f(r, t) = f_c(r)·cos ωt + f_s(r)·sin ωt.
pub struct OscillatingForceSpec {
    pub f_c: VectorField,
    pub f_s: VectorField,
    pub omega: f64,
}

impl OscillatingForceSpec {
    pub fn new(f_c: VectorField, f_s: VectorField, omega: f64) -> Result<OscillatingForceSpec> {
        f_c.component(0).same_grid(f_s.component(0), "f_c vs f_s")?;
        if !(omega > 0.0) {
            return Err(Error::config(
                "omega",
                format!("oscillation frequency must be > 0, got {omega}"),
            ));
        }
        Ok(OscillatingForceSpec { f_c, f_s, omega })
    }

    /// The force whose ponderomotive potential is exactly U'_q:
    /// f_c = (ħω/√2)∇ln ρ, f_s = 0.
    pub fn log_density_force(
        rho: &ScalarField,
        omega: f64,
        consts: &PhysicalConstants,
        rho_floor: f64,
    ) -> Result<OscillatingForceSpec> {
        check_floor(rho, rho_floor)?;
        let coef = consts.hbar * omega / std::f64::consts::SQRT_2;
        let grad_ln = log_density_gradient(rho, rho_floor)?;
        let f_c = VectorField::from_components(
            grad_ln
                .into_components()
                .into_iter()
                .map(|c| c.map(|v| coef * v))
                .collect(),
        )?;
        let f_s = VectorField::zeros(rho.grid());
        OscillatingForceSpec::new(f_c, f_s, omega)
    }

    /// ω·T_slow — the scale-separation figure. Large is good; this is
    /// advisory, reported rather than enforced.
    pub fn scale_separation(&self, t_slow: f64) -> f64 {
        self.omega * t_slow
    }
}

/// U_p = (|f_c|² + |f_s|²) / (4mω²): the cycle-averaged kinetic energy of
/// the jitter motion a fast force drives.
pub fn ponderomotive_potential(
    force: &OscillatingForceSpec,
    consts: &PhysicalConstants,
) -> Result<ScalarField> {
    if !(force.omega > 0.0) {
        return Err(Error::config(
            "omega",
            format!("oscillation frequency must be > 0, got {}", force.omega),
        ));
    }
    let inv = 1.0 / (4.0 * consts.mass() * force.omega * force.omega);
    let c2 = force.f_c.magnitude_squared();
    let s2 = force.f_s.magnitude_squared();
    Ok(c2.zip_map(&s2, |a, b| inv * (a + b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::potential::PotentialSpec;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn consts() -> PhysicalConstants {
        PhysicalConstants::default()
    }

    /// Unit-width Gaussian on a grid where x = 0 and x = 1 are lattice points.
    fn unit_gaussian(grid: &Arc<Grid>) -> ScalarField {
        ScalarField::from_fn(grid, |p| (-p[0] * p[0] / 2.0).exp())
    }

    #[test]
    fn gaussian_quantum_potential_pointwise() {
        // For ρ = e^{−x²/2}: U_q = 1/4 − x²/8, U'_q = x²/8, U''_q = (1−x²)/4.
        let g = Grid::periodic_1d(16.0, 256);
        let rho = unit_gaussian(&g);
        let u_q = quantum_potential(&rho, &consts(), 1e-60).unwrap();
        let (u_p, u_dp) = quantum_potential_parts(&rho, &consts(), 1e-60).unwrap();

        let at = |f: &ScalarField, x: f64| {
            let i = ((x + 8.0) / g.spacing(0)).round() as usize;
            assert_eq!(g.point(i)[0], x);
            f.values()[i]
        };
        assert!((at(&u_q, 0.0) - 0.25).abs() <= 1e-6);
        assert!((at(&u_q, 1.0) - 0.125).abs() <= 1e-6);
        assert!((at(&u_p, 1.0) - 0.125).abs() <= 1e-6);
        assert!(at(&u_p, 0.0).abs() <= 1e-6);
        assert!((at(&u_dp, 0.0) - 0.25).abs() <= 1e-6);
        assert!(at(&u_dp, 1.0).abs() <= 1e-6);
    }

    #[test]
    fn constant_density_has_no_quantum_potential() {
        let g = Grid::periodic_1d(8.0, 64);
        let rho = ScalarField::constant(&g, 0.4);
        assert!(quantum_potential(&rho, &consts(), 1e-15).unwrap().max_abs() <= 1e-13);
        let (u_p, u_dp) = quantum_potential_parts(&rho, &consts(), 1e-15).unwrap();
        assert!(u_p.max_abs() <= 1e-13);
        assert!(u_dp.max_abs() <= 1e-13);
    }

    #[test]
    fn sqrt_form_matches_expanded_form() {
        // Strictly positive periodic density: both forms are spectrally exact
        // and must agree far below the spec'd 1e-8.
        let g = Grid::periodic_1d(6.0, 128);
        let rho = ScalarField::from_fn(&g, |p| (0.5 * (2.0 * PI * p[0] / 6.0).sin()).exp());
        let a = quantum_potential(&rho, &consts(), 1e-15).unwrap();
        let b = quantum_potential_expanded(&rho, &consts(), 1e-15).unwrap();
        assert!(a.linf_diff(&b) <= 1e-8);
    }

    #[test]
    fn decomposition_residual_shrinks_at_fourth_order() {
        // On a dirichlet grid the three fields use different stencils, so the
        // identity U_q = U'_q + U''_q holds only to truncation error — which
        // must fall ≥ 12× per Δx halving.
        let residual = |n: usize| {
            let g = Grid::dirichlet_1d(6.0, n);
            let rho = ScalarField::from_fn(&g, |p| (0.8 * (PI * p[0] / 3.0).sin()).exp());
            let u = ScalarField::zeros(&g);
            QuantumPotentialSet::compute(&u, &rho, &consts(), 1e-15)
                .unwrap()
                .decomposition_residual()
        };
        let coarse = residual(65);
        let fine = residual(129);
        assert!(
            coarse / fine >= 12.0,
            "decomposition residual ratio {} (coarse {coarse:.3e}, fine {fine:.3e})",
            coarse / fine
        );
    }

    #[test]
    fn decomposition_is_exact_on_resolved_periodic_fields() {
        let g = Grid::periodic_1d(6.0, 128);
        let rho = ScalarField::from_fn(&g, |p| (0.5 * (2.0 * PI * p[0] / 6.0).cos()).exp());
        let u = ScalarField::zeros(&g);
        let set = QuantumPotentialSet::compute(&u, &rho, &consts(), 1e-15).unwrap();
        let rel = set.decomposition_residual() / set.u_q.max_abs();
        assert!(rel <= 1e-6, "relative residual {rel:.3e}");
    }

    #[test]
    fn ground_state_identity_gives_constant_energy() {
        // Harmonic ω₀ = 1 ground state: U + U_q = ħω₀/2 wherever the density
        // is numerically resolvable (the far wings divide roundoff by √ρ).
        let g = Grid::periodic_1d(16.0, 256);
        let c = consts();
        let rho = ScalarField::from_fn(&g, |p| (-p[0] * p[0]).exp());
        let u = PotentialSpec::Harmonic { omega0: 1.0 }.evaluate(&g, &c).unwrap();
        let u_ef = effective_potential(&u, &rho, EffectiveVariant::Schrodinger, &c, 1e-60).unwrap();
        let cutoff = 1e-6 * rho.max_value();
        let mut worst = 0.0f64;
        for (i, &r) in rho.values().iter().enumerate() {
            if r >= cutoff {
                worst = worst.max((u_ef.values()[i] - 0.5).abs());
            }
        }
        assert!(worst <= 1e-5, "U + U_q deviates from E₀ by {worst:.3e}");
    }

    #[test]
    fn effective_variants_on_constant_density_reduce_to_u() {
        let g = Grid::periodic_1d(8.0, 64);
        let c = consts();
        let rho = ScalarField::constant(&g, 0.7);
        let u = ScalarField::from_fn(&g, |p| (2.0 * PI * p[0] / 8.0).cos());
        for variant in [EffectiveVariant::Schrodinger, EffectiveVariant::Variational] {
            let u_ef = effective_potential(&u, &rho, variant, &c, 1e-15).unwrap();
            assert!(u_ef.linf_diff(&u) <= 1e-12);
        }
        // true_oscillating adds the constant −(ħω/√2)cos(ωt)·ln ρ
        let omega = 40.0;
        let t = 0.0125;
        let u_ef = effective_potential(
            &u,
            &rho,
            EffectiveVariant::TrueOscillating { t, omega },
            &c,
            1e-15,
        )
        .unwrap();
        let shift = -(omega / std::f64::consts::SQRT_2) * (omega * t).cos() * 0.7f64.ln();
        assert!(u_ef.linf_diff(&u.map(|v| v + shift)) <= 1e-12);
    }

    #[test]
    fn true_oscillating_vanishes_at_quarter_period() {
        let g = Grid::periodic_1d(16.0, 128);
        let c = consts();
        let rho = unit_gaussian(&g);
        let u = ScalarField::from_fn(&g, |p| 0.3 * p[0]);
        let omega = 50.0;
        let t = PI / (2.0 * omega); // ωt = π/2 → cos = 0 (up to cos roundoff)
        let u_ef = effective_potential(
            &u,
            &rho,
            EffectiveVariant::TrueOscillating { t, omega },
            &c,
            1e-60,
        )
        .unwrap();
        assert!(u_ef.linf_diff(&u) <= 1e-12);
    }

    #[test]
    fn ponderomotive_potential_of_log_density_force_is_u_q_prime() {
        let g = Grid::periodic_1d(16.0, 256);
        let c = consts();
        for omega in [25.0, 100.0, 400.0] {
            let rho = unit_gaussian(&g);
            let force = OscillatingForceSpec::log_density_force(&rho, omega, &c, 1e-60).unwrap();
            let u_p = ponderomotive_potential(&force, &c).unwrap();
            let (u_q_prime, _) = quantum_potential_parts(&rho, &c, 1e-60).unwrap();
            let diff = u_p.linf_diff(&u_q_prime);
            assert!(diff <= 1e-10, "ω = {omega}: L∞ difference {diff:.3e}");
        }
    }

    #[test]
    fn ponderomotive_trivial_cases() {
        let g = Grid::periodic_1d(8.0, 64);
        let c = consts();
        let zero = OscillatingForceSpec::new(
            VectorField::zeros(&g),
            VectorField::zeros(&g),
            30.0,
        )
        .unwrap();
        assert_eq!(ponderomotive_potential(&zero, &c).unwrap().max_abs(), 0.0);

        let f = 2.5;
        let omega = 30.0;
        let uniform = OscillatingForceSpec::new(
            VectorField::uniform(&g, &[f]),
            VectorField::zeros(&g),
            omega,
        )
        .unwrap();
        let u_p = ponderomotive_potential(&uniform, &c).unwrap();
        let expect = f * f / (4.0 * omega * omega);
        assert!(u_p.linf_diff(&ScalarField::constant(&g, expect)) <= 1e-15);
        assert!(uniform.scale_separation(2.0) == 60.0);
    }

    #[test]
    fn floor_violations_are_reported() {
        let g = Grid::periodic_1d(8.0, 64);
        let rho = unit_gaussian(&g); // wings ~ e^{-8} ≈ 3e-4
        let err = quantum_potential(&rho, &consts(), 1e-3);
        assert!(matches!(err, Err(Error::NodeEncountered { .. })));
        assert!(matches!(
            ponderomotive_potential(
                &OscillatingForceSpec {
                    f_c: VectorField::zeros(&g),
                    f_s: VectorField::zeros(&g),
                    omega: -1.0
                },
                &consts()
            ),
            Err(Error::Config { .. })
        ));
    }
}
