//! Reference quantum solvers: the ground truth that every hydrodynamic
//! result in this crate is measured against.
//!
//! Two schemes, one engine:
//!
//! * **split-step** (Strang splitting in Fourier space) — the default ground
//!   truth on periodic grids; norm-exact, spectrally accurate in space,
//!   2nd order in time. Needs a spatially uniform vector potential.
//! * **implicit-difference** (Crank–Nicolson, Cayley form) — 2nd order in
//!   time and space, exactly norm-conserving, handles dirichlet boxes and a
//!   spatially varying A. In 2D the axes are Strang-composed, each solved by
//!   a (cyclic) Thomas sweep.
//!
//! Minimal coupling follows H = (p − qA/c)²/2m + qφ; the many-body entry
//! point runs the same engine on a two-axis configuration grid with one mass
//! per axis.

use std::sync::Arc;

use num_complex::Complex64;

use crate::calculus::{self, DerivativeOrder};
use crate::constants::PhysicalConstants;
use crate::error::{Error, Result};
use crate::field::{ScalarField, Wavefunction};
use crate::grid::{Boundary, Grid};
use crate::potential::{EmPotentialSpec, PotentialSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    SplitStep,
    ImplicitDifference,
}

/// What the engine is propagating.
#[derive(Clone, Copy)]
pub enum SchrodingerProblem<'a> {
    /// −(ħ²/2m)∇²ψ + Uψ.
    Potential(&'a PotentialSpec),
    /// Minimal coupling: (1/2m)(p − qA/c)²ψ + qφψ.
    Em(&'a EmPotentialSpec),
    /// Two 1-D particles on a configuration grid, masses per axis, with a
    /// pre-tabulated U(r₁, r₂).
    ManyBody(&'a ScalarField),
}

/// A recorded evolution: `states[j]` at `times[j]`, always including the
/// initial and final states.
pub struct WavefunctionSeries {
    pub times: Vec<f64>,
    pub states: Vec<Wavefunction>,
}

pub fn evolve_schrodinger(
    psi0: &Wavefunction,
    u: &PotentialSpec,
    consts: &PhysicalConstants,
    dt: f64,
    steps: usize,
    scheme: Scheme,
) -> Result<Wavefunction> {
    let series = evolve_recorded(
        psi0,
        SchrodingerProblem::Potential(u),
        consts,
        dt,
        steps,
        scheme,
        usize::MAX,
    )?;
    Ok(series.states.into_iter().last().expect("final state"))
}

pub fn evolve_schrodinger_em(
    psi0: &Wavefunction,
    em: &EmPotentialSpec,
    consts: &PhysicalConstants,
    dt: f64,
    steps: usize,
    scheme: Scheme,
) -> Result<Wavefunction> {
    let series = evolve_recorded(
        psi0,
        SchrodingerProblem::Em(em),
        consts,
        dt,
        steps,
        scheme,
        usize::MAX,
    )?;
    Ok(series.states.into_iter().last().expect("final state"))
}

pub fn evolve_schrodinger_many(
    psi0: &Wavefunction,
    u: &ScalarField,
    consts: &PhysicalConstants,
    dt: f64,
    steps: usize,
) -> Result<Wavefunction> {
    if psi0.grid().dims() != 2 {
        return Err(Error::Scheme(
            "many-body evolution expects a 2-axis configuration grid (two 1-D particles)".into(),
        ));
    }
    let series = evolve_recorded(
        psi0,
        SchrodingerProblem::ManyBody(u),
        consts,
        dt,
        steps,
        Scheme::SplitStep,
        usize::MAX,
    )?;
    Ok(series.states.into_iter().last().expect("final state"))
}

/// Run any of the problems and keep every `every`-th state (plus first and
/// last). `every = usize::MAX` records only the endpoints.
pub fn evolve_recorded(
    psi0: &Wavefunction,
    problem: SchrodingerProblem,
    consts: &PhysicalConstants,
    dt: f64,
    steps: usize,
    scheme: Scheme,
    every: usize,
) -> Result<WavefunctionSeries> {
    let grid = psi0.grid();
    consts.validate(grid.dims())?;
    psi0.ensure_finite("initial wavefunction")?;
    let n2 = psi0.norm_squared();
    if (n2 - 1.0).abs() > 1e-8 {
        return Err(Error::config(
            "psi0",
            format!("initial state must be normalized (∫|ψ|² = {n2})"),
        ));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::config("dt", format!("time step must be > 0, got {dt}")));
    }

    let mut stepper: Box<dyn Stepper> = match scheme {
        Scheme::SplitStep => Box::new(SplitStepEngine::new(grid, &problem, consts, dt)?),
        Scheme::ImplicitDifference => Box::new(CnEngine::new(grid, &problem, consts, dt)?),
    };

    let mut psi = psi0.clone();
    let mut times = vec![0.0];
    let mut states = vec![psi.clone()];
    for step in 1..=steps {
        stepper.advance(psi.values_mut());
        if step % every.max(1) == 0 && step != steps && every != usize::MAX {
            times.push(step as f64 * dt);
            states.push(psi.clone());
        }
        if step == steps {
            times.push(step as f64 * dt);
            states.push(psi.clone());
        }
    }
    psi.ensure_finite("final wavefunction")?;
    Ok(WavefunctionSeries { times, states })
}

trait Stepper {
    fn advance(&mut self, values: &mut [Complex64]);
}

/// Wavenumber of each sample along `axis` (FFT ordering, Nyquist positive).
fn axis_wavenumbers(grid: &Grid, axis: usize) -> Vec<f64> {
    let n = grid.axis(axis).points;
    let length = grid.axis(axis).length;
    (0..n)
        .map(|j| {
            let jj = if j <= n / 2 {
                j as i64
            } else {
                j as i64 - n as i64
            };
            2.0 * std::f64::consts::PI * jj as f64 / length
        })
        .collect()
}

/// Full N-dimensional FFT, one axis at a time. The inverse includes the 1/N
/// rescale so fwd∘inv is the identity up to roundoff.
pub(crate) fn fft_nd(values: &mut [Complex64], grid: &Grid, inverse: bool) {
    let mut line: Vec<Complex64> = Vec::new();
    for axis in 0..grid.dims() {
        let n = grid.axis(axis).points;
        let stride = grid.strides()[axis];
        let outer = values.len() / (n * stride);
        let (fwd, inv) = calculus::fft_pair(n);
        let fft = if inverse { inv } else { fwd };
        line.resize(n, Complex64::new(0.0, 0.0));
        for o in 0..outer {
            for i in 0..stride {
                let base = o * n * stride + i;
                for (j, slot) in line.iter_mut().enumerate() {
                    *slot = values[base + j * stride];
                }
                fft.process(&mut line);
                for (j, &v) in line.iter().enumerate() {
                    values[base + j * stride] = v;
                }
            }
        }
    }
    if inverse {
        let scale = 1.0 / grid.len() as f64;
        for v in values.iter_mut() {
            *v *= scale;
        }
    }
}

/// Scalar part of the Hamiltonian, per problem: U, or qφ (the A² piece of
/// minimal coupling lives with the kinetic factor / axis matrices), or the
/// tabulated many-body U.
fn scalar_term(
    grid: &Arc<Grid>,
    problem: &SchrodingerProblem,
    consts: &PhysicalConstants,
) -> Result<ScalarField> {
    match problem {
        SchrodingerProblem::Potential(spec) => spec.evaluate(grid, consts),
        SchrodingerProblem::Em(em) => {
            em.phi().same_grid(&ScalarField::zeros(grid), "EM phi vs psi grid")?;
            Ok(em.phi().map(|v| consts.charge * v))
        }
        SchrodingerProblem::ManyBody(u) => {
            u.same_grid(&ScalarField::zeros(grid), "many-body U vs psi grid")?;
            Ok((*u).clone())
        }
    }
}

struct SplitStepEngine {
    grid: Arc<Grid>,
    pot_half: Vec<Complex64>,
    kinetic: Vec<Complex64>,
}

impl SplitStepEngine {
    fn new(
        grid: &Arc<Grid>,
        problem: &SchrodingerProblem,
        consts: &PhysicalConstants,
        dt: f64,
    ) -> Result<SplitStepEngine> {
        if !grid.is_all_periodic() {
            return Err(Error::Scheme(
                "split-step works in Fourier space and needs every axis periodic; \
                 use the implicit-difference scheme for dirichlet boundaries"
                    .into(),
            ));
        }
        // Uniform gauge potential per axis (zero when absent). Split-step
        // diagonalizes (ħk − qA/c)²/2m in Fourier space, which requires A to
        // be constant over the grid.
        let mut a_uniform = vec![0.0f64; grid.dims()];
        if let SchrodingerProblem::Em(em) = problem {
            if em.a_nonuniformity() != 0.0 {
                return Err(Error::Scheme(
                    "split-step requires a spatially uniform vector potential; \
                     use the implicit-difference scheme for A(r)"
                        .into(),
                ));
            }
            for (a, slot) in a_uniform.iter_mut().enumerate() {
                *slot = em.a().component(a).values()[0];
            }
        }

        let hbar = consts.hbar;
        let scalar = scalar_term(grid, problem, consts)?;
        let pot_half: Vec<Complex64> = scalar
            .values()
            .iter()
            .map(|&u| Complex64::new(0.0, -u * dt / (2.0 * hbar)).exp())
            .collect();

        let ks: Vec<Vec<f64>> = (0..grid.dims())
            .map(|a| axis_wavenumbers(grid, a))
            .collect();
        let q_over_c = consts.charge / consts.light_speed;
        let mut kinetic = Vec::with_capacity(grid.len());
        let mut idx = [0usize; 3];
        for flat in 0..grid.len() {
            grid.unflatten(flat, &mut idx);
            let mut energy = 0.0;
            for a in 0..grid.dims() {
                let kin_momentum = hbar * ks[a][idx[a]] - q_over_c * a_uniform[a];
                energy += kin_momentum * kin_momentum / (2.0 * consts.mass_for_axis(a));
            }
            kinetic.push(Complex64::new(0.0, -energy * dt / hbar).exp());
        }

        Ok(SplitStepEngine {
            grid: Arc::clone(grid),
            pot_half,
            kinetic,
        })
    }
}

impl Stepper for SplitStepEngine {
    fn advance(&mut self, values: &mut [Complex64]) {
        for (v, &p) in values.iter_mut().zip(&self.pot_half) {
            *v *= p;
        }
        fft_nd(values, &self.grid, false);
        for (v, &k) in values.iter_mut().zip(&self.kinetic) {
            *v *= k;
        }
        fft_nd(values, &self.grid, true);
        for (v, &p) in values.iter_mut().zip(&self.pot_half) {
            *v *= p;
        }
    }
}

/// One axis of the Crank–Nicolson splitting: the tridiagonal (or cyclic
/// tridiagonal) coefficients of H_axis at every lattice point, and the α of
/// this pass, so the sweep solves (1 + iαH)ψ⁺ = (1 − iαH)ψ line by line.
struct CnAxis {
    axis: usize,
    periodic: bool,
    /// Coefficients of H as lattice-sized arrays: h_lower couples i−1,
    /// h_diag couples i, h_upper couples i+1.
    h_lower: Vec<Complex64>,
    h_diag: Vec<Complex64>,
    h_upper: Vec<Complex64>,
    /// α = τ/(2ħ) where τ is this pass's sub-step.
    alpha: f64,
}

struct CnEngine {
    grid: Arc<Grid>,
    passes: Vec<CnAxis>,
    scratch: CnScratch,
}

#[derive(Default)]
struct CnScratch {
    line: Vec<Complex64>,
    rhs: Vec<Complex64>,
    lower: Vec<Complex64>,
    diag: Vec<Complex64>,
    upper: Vec<Complex64>,
    aux: Vec<Complex64>,
    aux2: Vec<Complex64>,
}

impl CnEngine {
    fn new(
        grid: &Arc<Grid>,
        problem: &SchrodingerProblem,
        consts: &PhysicalConstants,
        dt: f64,
    ) -> Result<CnEngine> {
        if grid.dims() > 2 {
            return Err(Error::Scheme(
                "the implicit-difference scheme supports 1 or 2 axes".into(),
            ));
        }
        let hbar = consts.hbar;
        let scalar = scalar_term(grid, problem, consts)?;
        let dims = grid.dims();

        // Accuracy guard: Crank–Nicolson is unconditionally stable but turns
        // into a pure phase scrambler once the per-step phase of the grid's
        // fastest mode passes a full turn. Reject steps beyond that point
        // instead of silently producing noise.
        let mut h_max = scalar.max_abs();
        for a in 0..dims {
            let h = grid.spacing(a);
            h_max += 2.0 * hbar * hbar / (consts.mass_for_axis(a) * h * h);
        }
        let bound = 2.0 * std::f64::consts::PI * hbar / h_max;
        if dt > bound {
            return Err(Error::StepSize {
                what: "implicit-scheme accuracy (dt·H_max/ħ ≤ 2)".into(),
                dt,
                bound,
            });
        }

        let q = consts.charge;
        let c_light = consts.light_speed;

        let mut passes = Vec::new();
        // Strang composition over axes: x(dt/2), y(dt), x(dt/2) in 2D; a
        // single full step in 1D. Each pass is a Cayley propagator of a
        // Hermitian H_axis, so the composite conserves the norm exactly.
        let pass_plan: Vec<(usize, f64)> = if dims == 1 {
            vec![(0, dt)]
        } else {
            vec![(0, dt / 2.0), (1, dt), (0, dt / 2.0)]
        };

        for (axis, tau) in pass_plan {
            let h = grid.spacing(axis);
            let m = consts.mass_for_axis(axis);
            let kin = hbar * hbar / (2.0 * m * h * h);
            // Each axis carries an equal share of the scalar term.
            let share = 1.0 / dims as f64;

            let len = grid.len();
            let mut h_lower = vec![Complex64::new(-kin, 0.0); len];
            let mut h_diag: Vec<Complex64> = scalar
                .values()
                .iter()
                .map(|&u| Complex64::new(2.0 * kin + share * u, 0.0))
                .collect();
            let mut h_upper = vec![Complex64::new(-kin, 0.0); len];

            if let SchrodingerProblem::Em(em) = problem {
                // Hermitian discretization of the cross term
                // (iħq/2mc)[(A_a f)' + A_a f'] plus the diagonal q²A_a²/2mc².
                let a_vals = em.a().component(axis).values();
                let cross = hbar * q / (2.0 * m * c_light * 2.0 * h);
                let diag_coef = q * q / (2.0 * m * c_light * c_light);
                let n = grid.axis(axis).points;
                let stride = grid.strides()[axis];
                let outer = len / (n * stride);
                for o in 0..outer {
                    for i in 0..stride {
                        let base = o * n * stride + i;
                        for j in 0..n {
                            let at = base + j * stride;
                            let a_here = a_vals[at];
                            let a_prev = a_vals[base + ((j + n - 1) % n) * stride];
                            let a_next = a_vals[base + ((j + 1) % n) * stride];
                            h_lower[at] += Complex64::new(0.0, -cross * (a_prev + a_here));
                            h_upper[at] += Complex64::new(0.0, cross * (a_next + a_here));
                            h_diag[at] += Complex64::new(diag_coef * a_here * a_here, 0.0);
                        }
                    }
                }
            }

            passes.push(CnAxis {
                axis,
                periodic: grid.axis(axis).boundary == Boundary::Periodic,
                h_lower,
                h_diag,
                h_upper,
                alpha: tau / (2.0 * hbar),
            });
        }

        Ok(CnEngine {
            grid: Arc::clone(grid),
            passes,
            scratch: CnScratch::default(),
        })
    }
}

impl Stepper for CnEngine {
    fn advance(&mut self, values: &mut [Complex64]) {
        for pass in &self.passes {
            cn_pass(values, &self.grid, pass, &mut self.scratch);
        }
    }
}

fn cn_pass(values: &mut [Complex64], grid: &Grid, pass: &CnAxis, s: &mut CnScratch) {
    let n = grid.axis(pass.axis).points;
    let stride = grid.strides()[pass.axis];
    let outer = values.len() / (n * stride);
    let ia = Complex64::new(0.0, pass.alpha);

    s.line.resize(n, Complex64::new(0.0, 0.0));
    s.rhs.resize(n, Complex64::new(0.0, 0.0));
    s.lower.resize(n, Complex64::new(0.0, 0.0));
    s.diag.resize(n, Complex64::new(0.0, 0.0));
    s.upper.resize(n, Complex64::new(0.0, 0.0));

    for o in 0..outer {
        for i in 0..stride {
            let base = o * n * stride + i;
            for j in 0..n {
                let at = base + j * stride;
                s.line[j] = values[at];
                s.lower[j] = ia * pass.h_lower[at];
                s.diag[j] = Complex64::new(1.0, 0.0) + ia * pass.h_diag[at];
                s.upper[j] = ia * pass.h_upper[at];
            }
            // rhs = (1 − iαH)ψ
            for j in 0..n {
                let prev = if j == 0 {
                    if pass.periodic {
                        s.line[n - 1]
                    } else {
                        Complex64::new(0.0, 0.0)
                    }
                } else {
                    s.line[j - 1]
                };
                let next = if j == n - 1 {
                    if pass.periodic {
                        s.line[0]
                    } else {
                        Complex64::new(0.0, 0.0)
                    }
                } else {
                    s.line[j + 1]
                };
                s.rhs[j] = s.line[j]
                    - (s.lower[j] * prev + (s.diag[j] - 1.0) * s.line[j] + s.upper[j] * next);
            }
            if pass.periodic {
                solve_cyclic(
                    &s.lower, &s.diag, &s.upper, &mut s.rhs, &mut s.aux, &mut s.aux2,
                );
            } else {
                // dirichlet: pin the node-pinned boundary samples to zero
                s.rhs[0] = Complex64::new(0.0, 0.0);
                s.rhs[n - 1] = Complex64::new(0.0, 0.0);
                s.lower[0] = Complex64::new(0.0, 0.0);
                s.upper[0] = Complex64::new(0.0, 0.0);
                s.diag[0] = Complex64::new(1.0, 0.0);
                s.lower[n - 1] = Complex64::new(0.0, 0.0);
                s.upper[n - 1] = Complex64::new(0.0, 0.0);
                s.diag[n - 1] = Complex64::new(1.0, 0.0);
                thomas(&s.lower, &s.diag, &s.upper, &mut s.rhs, &mut s.aux);
            }
            for j in 0..n {
                values[base + j * stride] = s.rhs[j];
            }
        }
    }
}

/// In-place Thomas sweep: on return `rhs` holds the solution.
/// `scratch` is the forward-swept upper diagonal.
fn thomas(
    lower: &[Complex64],
    diag: &[Complex64],
    upper: &[Complex64],
    rhs: &mut [Complex64],
    scratch: &mut Vec<Complex64>,
) {
    let n = diag.len();
    scratch.resize(n, Complex64::new(0.0, 0.0));
    let mut beta = diag[0];
    scratch[0] = upper[0] / beta;
    rhs[0] /= beta;
    for i in 1..n {
        beta = diag[i] - lower[i] * scratch[i - 1];
        scratch[i] = upper[i] / beta;
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        let correction = scratch[i] * rhs[i + 1];
        rhs[i] -= correction;
    }
}

/// Cyclic tridiagonal solve via Sherman–Morrison: two Thomas sweeps.
/// `lower[0]` couples x[n−1] and `upper[n−1]` couples x[0].
fn solve_cyclic(
    lower: &[Complex64],
    diag: &[Complex64],
    upper: &[Complex64],
    rhs: &mut [Complex64],
    aux: &mut Vec<Complex64>,
    aux2: &mut Vec<Complex64>,
) {
    let n = diag.len();
    let gamma = -diag[0];
    let mut dmod: Vec<Complex64> = diag.to_vec();
    dmod[0] = diag[0] - gamma;
    dmod[n - 1] = diag[n - 1] - lower[0] * upper[n - 1] / gamma;

    thomas(lower, &dmod, upper, rhs, aux);

    aux2.clear();
    aux2.resize(n, Complex64::new(0.0, 0.0));
    aux2[0] = gamma;
    aux2[n - 1] = upper[n - 1];
    thomas(lower, &dmod, upper, aux2, aux);

    let vy = rhs[0] + lower[0] / gamma * rhs[n - 1];
    let vz = aux2[0] + lower[0] / gamma * aux2[n - 1];
    let factor = vy / (Complex64::new(1.0, 0.0) + vz);
    for i in 0..n {
        rhs[i] -= factor * aux2[i];
    }
}

/// ⟨ψ|H|ψ⟩ for H = Σ_a p_a²/2m_a + U, with the kinetic part evaluated from
/// first derivatives, ∫ Σ_a (ħ²/2m_a)|∂_a ψ|².
pub fn energy(psi: &Wavefunction, u: &ScalarField, consts: &PhysicalConstants) -> Result<f64> {
    let grid = psi.grid();
    let mut kinetic = 0.0;
    for a in 0..grid.dims() {
        let d = calculus::derivative_axis_complex(psi, a, DerivativeOrder::First)?;
        let dens = d.density();
        kinetic +=
            consts.hbar * consts.hbar / (2.0 * consts.mass_for_axis(a)) * calculus::integrate(&dens)?;
    }
    let potential = calculus::inner_product(u, &psi.density())?;
    Ok(kinetic + potential)
}

/// ⟨p_axis⟩ = ħ ∫ Im(ψ̄ ∂_axis ψ).
pub fn mean_momentum(psi: &Wavefunction, axis: usize, consts: &PhysicalConstants) -> Result<f64> {
    let d = calculus::derivative_axis_complex(psi, axis, DerivativeOrder::First)?;
    let integrand = ScalarField::from_values(
        psi.grid(),
        psi.values()
            .iter()
            .zip(d.values())
            .map(|(p, dp)| (p.conj() * dp).im)
            .collect(),
    )?;
    Ok(consts.hbar * calculus::integrate(&integrand)?)
}

/// ⟨x_axis⟩ and Var(x_axis) of |ψ|².
pub fn position_moments(psi: &Wavefunction, axis: usize) -> Result<(f64, f64)> {
    let rho = psi.density();
    let grid = psi.grid();
    let x = ScalarField::from_fn(grid, |p| p[axis]);
    let mean = calculus::inner_product(&x, &rho)?;
    let x2 = ScalarField::from_fn(grid, |p| p[axis] * p[axis]);
    let second = calculus::inner_product(&x2, &rho)?;
    Ok((mean, second - mean * mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::VectorField;
    use crate::grid::Grid;
    use std::f64::consts::PI;

    fn gaussian_packet(grid: &Arc<Grid>, s0: f64) -> Wavefunction {
        Wavefunction::from_fn(grid, |p| {
            Complex64::new((-p[0] * p[0] / (4.0 * s0 * s0)).exp(), 0.0)
        })
        .normalized()
    }

    #[test]
    fn free_packet_width_follows_the_spreading_law() {
        // Var(t) = s₀²(1 + (ħt/2ms₀²)²) → 1.25 at t = 1 for s₀ = 1.
        let g = Grid::periodic_1d(20.0, 512);
        let consts = PhysicalConstants::default();
        let psi0 = gaussian_packet(&g, 1.0);
        let psi = evolve_schrodinger(
            &psi0,
            &PotentialSpec::Free,
            &consts,
            1e-3,
            1000,
            Scheme::SplitStep,
        )
        .unwrap();
        let (_, var) = position_moments(&psi, 0).unwrap();
        assert!((var - 1.25).abs() <= 1e-3, "var = {var}");
    }

    #[test]
    fn harmonic_ground_state_is_stationary() {
        let g = Grid::periodic_1d(16.0, 256);
        let consts = PhysicalConstants::default();
        // ground state of ½x²: exp(−x²/2ħ) with m = ω₀ = 1
        let psi0 = gaussian_packet(&g, (0.5f64).sqrt());
        let u = PotentialSpec::Harmonic { omega0: 1.0 };
        let steps = 62_832; // one period 2π at dt = 1e-4
        let psi = evolve_schrodinger(&psi0, &u, &consts, 1e-4, steps, Scheme::SplitStep).unwrap();
        let drift = psi.density().linf_diff(&psi0.density());
        assert!(drift <= 1e-8, "density drift {drift}");
    }

    #[test]
    fn plane_wave_is_an_exact_eigenstate() {
        let length = 8.0;
        let g = Grid::periodic_1d(length, 64);
        let consts = PhysicalConstants::default();
        let k = 2.0 * PI * 3.0 / length;
        let psi0 = Wavefunction::from_fn(&g, |p| Complex64::new(0.0, k * p[0]).exp()).normalized();
        let dt = 0.37;
        let steps = 10;
        let psi = evolve_schrodinger(
            &psi0,
            &PotentialSpec::Free,
            &consts,
            dt,
            steps,
            Scheme::SplitStep,
        )
        .unwrap();
        assert!(psi.density().linf_diff(&psi0.density()) <= 1e-13);
        // global phase must advance by −ħk²t/2m
        let overlap: Complex64 = psi0
            .values()
            .iter()
            .zip(psi.values())
            .map(|(a, b)| a.conj() * b)
            .sum();
        let expected = -k * k * dt * steps as f64 / 2.0;
        let got = overlap.arg();
        let diff = (got - expected).rem_euclid(2.0 * PI);
        let diff = diff.min(2.0 * PI - diff);
        assert!(diff <= 1e-12, "phase diff {diff}");
    }

    #[test]
    fn split_step_requires_periodic_axes() {
        let g = Grid::dirichlet_1d(8.0, 64);
        let psi0 = gaussian_packet(&g, 1.0);
        let err = evolve_schrodinger(
            &psi0,
            &PotentialSpec::Free,
            &PhysicalConstants::default(),
            1e-3,
            1,
            Scheme::SplitStep,
        );
        assert!(matches!(err, Err(Error::Scheme(_))));
    }

    #[test]
    fn energy_is_conserved_for_static_potentials() {
        let g = Grid::periodic_1d(16.0, 256);
        let consts = PhysicalConstants::default();
        let psi0 = gaussian_packet(&g, 0.9); // not an eigenstate: it breathes
        let spec = PotentialSpec::Harmonic { omega0: 1.0 };
        let u = spec.evaluate(&g, &consts).unwrap();
        let e0 = energy(&psi0, &u, &consts).unwrap();
        let psi = evolve_schrodinger(&psi0, &spec, &consts, 1e-3, 1000, Scheme::SplitStep).unwrap();
        let e1 = energy(&psi, &u, &consts).unwrap();
        assert!((e1 - e0).abs() <= 1e-6, "energy drift {}", e1 - e0);
    }

    #[test]
    fn em_with_zero_coupling_reproduces_plain_solver_bitwise() {
        let g = Grid::periodic_1d(16.0, 128);
        let consts = PhysicalConstants::default();
        let psi0 = gaussian_packet(&g, 1.0);
        let spec = PotentialSpec::Harmonic { omega0: 1.0 };
        let u = spec.evaluate(&g, &consts).unwrap();
        let em = EmPotentialSpec::new(VectorField::zeros(&g), u).unwrap();
        for scheme in [Scheme::SplitStep, Scheme::ImplicitDifference] {
            let plain = evolve_schrodinger(&psi0, &spec, &consts, 1e-3, 100, scheme).unwrap();
            let coupled = evolve_schrodinger_em(&psi0, &em, &consts, 1e-3, 100, scheme).unwrap();
            assert_eq!(
                coupled.linf_diff(&plain),
                0.0,
                "A ≡ 0 must be bit-identical ({scheme:?})"
            );
        }
    }

    #[test]
    fn constant_vector_potential_shifts_the_kinetic_momentum() {
        let length = 8.0;
        let g = Grid::periodic_1d(length, 64);
        let consts = PhysicalConstants::default();
        let k = 2.0 * PI * 2.0 / length;
        let a0 = 1.3;
        let psi0 = Wavefunction::from_fn(&g, |p| Complex64::new(0.0, k * p[0]).exp()).normalized();
        let em = EmPotentialSpec::uniform_a(&g, &[a0], ScalarField::zeros(&g)).unwrap();
        let dt = 0.05;
        let steps = 40;
        let psi = evolve_schrodinger_em(&psi0, &em, &consts, dt, steps, Scheme::SplitStep).unwrap();

        // density stays flat, canonical momentum stays ħk
        assert!(psi.density().linf_diff(&psi0.density()) <= 1e-12);
        let p = mean_momentum(&psi, 0, &consts).unwrap();
        assert!((p - k).abs() <= 1e-10, "canonical momentum {p} vs {k}");

        // phase advances with the gauge-shifted kinetic energy (ħk − qa₀/c)²/2m
        let e = (k - a0) * (k - a0) / 2.0;
        let overlap: Complex64 = psi0
            .values()
            .iter()
            .zip(psi.values())
            .map(|(a, b)| a.conj() * b)
            .sum();
        let expected = -e * dt * steps as f64;
        let diff = (overlap.arg() - expected).rem_euclid(2.0 * PI);
        let diff = diff.min(2.0 * PI - diff);
        assert!(diff <= 1e-10, "phase diff {diff}");
    }

    #[test]
    fn gauge_shift_leaves_the_density_trajectory_invariant() {
        // χ = c₀x with qc₀L/ħc = 2π·n makes e^{iqχ/ħc} grid-periodic, so the
        // transformation is exactly representable: A → A + c₀, ψ → ψe^{iqχ/ħc}.
        let length = 16.0;
        let g = Grid::periodic_1d(length, 128);
        let consts = PhysicalConstants::default();
        let c0 = 2.0 * PI * 2.0 / length; // n = 2
        let psi0 = gaussian_packet(&g, 1.0);
        let phi = PotentialSpec::Harmonic { omega0: 1.0 }
            .evaluate(&g, &consts)
            .unwrap();

        let em_a = EmPotentialSpec::uniform_a(&g, &[0.4], phi.clone()).unwrap();
        let em_b = EmPotentialSpec::uniform_a(&g, &[0.4 + c0], phi).unwrap();
        let psi0_shifted = Wavefunction::from_fn(&g, |p| {
            Complex64::new((-p[0] * p[0] / 4.0).exp(), 0.0) * Complex64::new(0.0, c0 * p[0]).exp()
        })
        .normalized();

        let run_a =
            evolve_schrodinger_em(&psi0, &em_a, &consts, 1e-3, 400, Scheme::SplitStep).unwrap();
        let run_b =
            evolve_schrodinger_em(&psi0_shifted, &em_b, &consts, 1e-3, 400, Scheme::SplitStep)
                .unwrap();
        let drift = run_a.density().linf_diff(&run_b.density());
        assert!(drift <= 1e-8, "gauge-variant density drift {drift}");
    }

    #[test]
    fn implicit_scheme_conserves_norm_exactly() {
        // wide walls: the state is ~e^{-72} at the boundary, so pinning the
        // wall samples to zero removes nothing measurable
        let g = Grid::dirichlet_1d(24.0, 257);
        let consts = PhysicalConstants::default();
        let psi0 = gaussian_packet(&g, 1.0);
        let psi = evolve_schrodinger(
            &psi0,
            &PotentialSpec::Box,
            &consts,
            5e-4,
            2000,
            Scheme::ImplicitDifference,
        )
        .unwrap();
        // the Cayley form is unitary; what remains is Thomas-solve roundoff,
        // ~5e-16 per step, accumulating linearly
        let drift = (psi.norm_squared() - 1.0).abs();
        let per_step = drift / 2000.0;
        assert!(per_step <= 1e-14, "norm drift per step {per_step:.3e}");
    }

    #[test]
    fn implicit_scheme_is_second_order_in_time() {
        // Self-convergence on a breathing state isolates the O(dt²) error
        // from the fixed spatial discretization error.
        let g = Grid::periodic_1d(16.0, 128);
        let consts = PhysicalConstants::default();
        let psi0 = gaussian_packet(&g, 0.8);
        let spec = PotentialSpec::Harmonic { omega0: 1.0 };
        let run = |dt: f64, steps: usize| {
            evolve_schrodinger(&psi0, &spec, &consts, dt, steps, Scheme::ImplicitDifference)
                .unwrap()
        };
        let reference = run(0.02 / 8.0, 160);
        let coarse = run(0.02, 20);
        let fine = run(0.01, 40);
        let e_coarse = coarse.linf_diff(&reference);
        let e_fine = fine.linf_diff(&reference);
        let ratio = e_coarse / e_fine;
        assert!(
            (3.0..=5.5).contains(&ratio),
            "self-convergence ratio {ratio} (errors {e_coarse:.3e}, {e_fine:.3e})"
        );
    }

    #[test]
    fn implicit_scheme_rejects_oversized_steps() {
        let g = Grid::periodic_1d(16.0, 256);
        let psi0 = gaussian_packet(&g, 1.0);
        let err = evolve_schrodinger(
            &psi0,
            &PotentialSpec::Free,
            &PhysicalConstants::default(),
            1.0,
            1,
            Scheme::ImplicitDifference,
        );
        assert!(matches!(err, Err(Error::StepSize { .. })));
    }

    #[test]
    fn box_ground_state_oscillates_at_its_eigenfrequency() {
        // Infinite well of width L: E₁ = π²ħ²/(2mL²); the implicit scheme on
        // a dirichlet grid should reproduce the phase rate.
        let length = 4.0;
        let n = 129;
        let g = Grid::dirichlet_1d(length, n);
        let consts = PhysicalConstants::default();
        let psi0 = Wavefunction::from_fn(&g, |p| {
            Complex64::new((PI * (p[0] + length / 2.0) / length).sin(), 0.0)
        })
        .normalized();
        let dt = 2e-4;
        let steps = 500;
        let psi = evolve_schrodinger(
            &psi0,
            &PotentialSpec::Box,
            &consts,
            dt,
            steps,
            Scheme::ImplicitDifference,
        )
        .unwrap();
        assert!(psi.density().linf_diff(&psi0.density()) <= 1e-6);
        let overlap: Complex64 = psi0
            .values()
            .iter()
            .zip(psi.values())
            .map(|(a, b)| a.conj() * b)
            .sum();
        let e1 = PI * PI / (2.0 * length * length);
        let got_e = -overlap.arg() / (dt * steps as f64);
        assert!(
            (got_e - e1).abs() / e1 <= 1e-3,
            "measured E₁ {got_e} vs {e1}"
        );
    }

    #[test]
    fn many_body_product_state_stays_product() {
        // Non-interacting harmonic pair: the product ground state is
        // stationary on the configuration grid.
        let g = Grid::periodic_2d([14.0, 14.0], [48, 48]);
        let consts = PhysicalConstants::with_masses(vec![1.0, 1.0]);
        let u = PotentialSpec::Harmonic { omega0: 1.0 }
            .evaluate(&g, &consts)
            .unwrap();
        let psi0 = Wavefunction::from_fn(&g, |p| {
            Complex64::new((-(p[0] * p[0] + p[1] * p[1]) / 2.0).exp(), 0.0)
        })
        .normalized();
        let steps = 12_566; // one period 2π at dt = 5e-4
        let psi = evolve_schrodinger_many(&psi0, &u, &consts, 5e-4, steps).unwrap();
        let drift = psi.density().linf_diff(&psi0.density());
        assert!(drift <= 1e-6, "product-state drift {drift}");
    }

    #[test]
    fn many_body_interaction_preserves_exchange_symmetry() {
        let n = 48;
        let g = Grid::periodic_2d([12.0, 12.0], [n, n]);
        let consts = PhysicalConstants::with_masses(vec![1.0, 1.0]);
        let sep = PotentialSpec::Harmonic { omega0: 1.0 }
            .evaluate(&g, &consts)
            .unwrap();
        let interaction = ScalarField::from_fn(&g, |p| {
            let d = p[0] - p[1];
            0.8 * (-d * d / 0.5).exp()
        });
        let u = &sep + &interaction;
        let psi0 = Wavefunction::from_fn(&g, |p| {
            Complex64::new((-(p[0] * p[0] + p[1] * p[1]) / 2.0).exp(), 0.0)
        })
        .normalized();
        let psi = evolve_schrodinger_many(&psi0, &u, &consts, 1e-3, 200).unwrap();
        // swap axes and compare
        let vals = psi.values();
        let mut max_asym = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let asym = (vals[i * n + j] - vals[j * n + i]).norm();
                max_asym = max_asym.max(asym);
            }
        }
        assert!(max_asym <= 1e-10, "exchange asymmetry {max_asym}");
    }

    #[test]
    fn many_body_masses_spread_each_marginal_with_its_own_law() {
        let g = Grid::periodic_2d([20.0, 20.0], [64, 64]);
        let consts = PhysicalConstants::with_masses(vec![1.0, 2.0]);
        let u = ScalarField::zeros(&g);
        let psi0 = Wavefunction::from_fn(&g, |p| {
            Complex64::new((-(p[0] * p[0] + p[1] * p[1]) / 4.0).exp(), 0.0)
        })
        .normalized();
        let t = 0.5;
        let psi = evolve_schrodinger_many(&psi0, &u, &consts, 1e-3, 500).unwrap();
        for (axis, m) in [(0usize, 1.0f64), (1usize, 2.0f64)] {
            let (_, var) = position_moments(&psi, axis).unwrap();
            let expected = 1.0 + (t / (2.0 * m)).powi(2);
            assert!(
                (var - expected).abs() <= 1e-3,
                "axis {axis}: var {var} vs {expected}"
            );
        }
    }

    #[test]
    fn many_body_requires_two_axes() {
        let g = Grid::periodic_1d(8.0, 64);
        let psi0 = gaussian_packet(&g, 1.0);
        let u = ScalarField::zeros(&g);
        assert!(matches!(
            evolve_schrodinger_many(&psi0, &u, &PhysicalConstants::default(), 1e-3, 1),
            Err(Error::Scheme(_))
        ));
    }

    #[test]
    fn recording_keeps_endpoints_and_interior_samples() {
        let g = Grid::periodic_1d(8.0, 64);
        let psi0 = gaussian_packet(&g, 1.0);
        let series = evolve_recorded(
            &psi0,
            SchrodingerProblem::Potential(&PotentialSpec::Free),
            &PhysicalConstants::default(),
            0.01,
            10,
            Scheme::SplitStep,
            3,
        )
        .unwrap();
        assert_eq!(series.times, vec![0.0, 0.03, 0.06, 0.09, 0.1]);
        assert_eq!(series.states.len(), 5);
    }
}
