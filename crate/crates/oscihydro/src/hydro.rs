//! The oscillating-pressure flow solver.
//!
//! This is the core dynamical system of the crate: a compressible potential
//! flow whose pressure oscillates at a fast frequency ω,
//!
//! ```text
//! ∂ρ_r/∂t = −Σ_k ∇_k·(ρ_r v_k)          v_k = (∇_k S_r − (q/c)A_k)/m_k
//! ∂S_r/∂t = −Σ_k m_k|v_k|²/2 − U + (ħω/√2)cos ωt · ln ρ_r
//! ```
//!
//! The pressure term comes from the ideal-gas law p = −(ħω/√2)ρ_r cos ωt.
//! Averaged over a fast period, the jitter it drives reproduces the quantum
//! potential, so the cycle mean of (ρ_r, S_r) should follow Schrödinger
//! dynamics — that claim is what the rest of the crate tests.
//!
//! The solver deliberately *resolves* the oscillation (K ≥ 16 substeps per
//! period, explicit RK4) rather than filtering it: averaging must happen in
//! post-processing, not inside the scheme, or the experiment is circular.
//!
//! Internally each step advances the equivalent system in λ = ln ρ_r and
//! Σ = S_r − (ħ/√2)·sin ωt·λ. The substitution cancels the ω-sized pressure
//! source exactly (see [`HydroSystem::step`]), which is what makes localized
//! states tractable: in the raw variables the source multiplies ln ρ_r, so
//! any error in a thin-wing cell is amplified by ħω/(√2 ρ) and the walls of
//! the box go unstable within a period or two. In log variables the wing
//! profile of a Gaussian is just a parabola and every coefficient in the
//! equations is bounded by the physical velocity scale. The state you see —
//! and the state the public API speaks — remains (ρ_r, S_r).
//!
//! Grid choice still matters. The action field carries its ln ρ component
//! explicitly, and for a localized density that is a parabola — **not** a
//! periodic function. Run localized states on dirichlet (finite-difference)
//! grids, where stencils are local and polynomials differentiate exactly;
//! keep periodic (spectral) grids for flows whose ρ and S_r genuinely wrap,
//! e.g. uniform or ring-like states. A localized packet forced onto a
//! periodic grid Gibbs-rings through ∇S_r and collapses within a period.
//!
//! The explicit step must also resolve the scheme's dispersive waves: the
//! linearization of the (λ, Σ) system rotates at the Schrödinger rate
//! ω_k = ħk²/2m, so the fastest grid mode costs dt·ħ·k̃²_max/2m ≲ 2.8
//! (RK4's imaginary-axis bound, k̃²_max ≈ 5.33/Δx² for the 4th-order
//! stencils). On fine grids that bound, not the fast period, sets the
//! substep count K.

use crate::calculus::{self, DerivativeOrder};
use crate::constants::PhysicalConstants;
use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField, Wavefunction};
use crate::grid::{Boundary, Grid};
use crate::madelung;
use crate::potential::{EmPotentialSpec, PotentialSpec};
use crate::quantum_potential::log_density;
use std::f64::consts::{SQRT_2, TAU};
use std::sync::Arc;

/// Default positivity/regularization floor for the flow solver. Much smaller
/// than the wavefunction-side floor: Gaussian wings on wide grids sit many
/// orders below 1e-12·max and are still perfectly good flow regions. The
/// floor regularizes ln ρ_r on entry, catches exponent underflow on exit,
/// and rejects input states that sit below it.
pub const HYDRO_RHO_FLOOR: f64 = 1e-300;

/// True (oscillation-resolving) flow state.
#[derive(Debug, Clone)]
pub struct HydroState {
    pub rho_r: ScalarField,
    pub s_r: ScalarField,
    pub t: f64,
}

impl HydroState {
    pub fn new(rho_r: ScalarField, s_r: ScalarField, t: f64) -> Result<HydroState> {
        rho_r.same_grid(&s_r, "density vs action field")?;
        Ok(HydroState { rho_r, s_r, t })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.rho_r.grid()
    }

    pub fn mass(&self) -> Result<f64> {
        calculus::integrate(&self.rho_r)
    }

    /// v = ∇S_r/m per axis (no vector potential).
    pub fn velocity(&self, consts: &PhysicalConstants) -> Result<VectorField> {
        let grad = calculus::gradient(&self.s_r)?;
        VectorField::from_components(
            grad.into_components()
                .into_iter()
                .enumerate()
                .map(|(a, g)| {
                    let m = consts.mass_for_axis(a);
                    g.map(|v| v / m)
                })
                .collect(),
        )
    }
}

/// Fast-oscillation parameters.
#[derive(Debug, Clone, Copy)]
pub struct OscillationConfig {
    /// Fast frequency ω.
    pub omega: f64,
    /// Substeps per fast period; the step is Δt = 2π/(ωK).
    pub substeps_per_period: usize,
    /// Seed ρ_r = ρ + ζ, S_r = S + σ analytically at t₀ (suppresses the
    /// initial transient; switch off to measure it).
    pub seed_fast: bool,
    /// The oscillating pressure term itself; disabled only for degenerate
    /// test cases.
    pub pressure_term: bool,
}

impl OscillationConfig {
    pub fn new(omega: f64, substeps_per_period: usize) -> OscillationConfig {
        OscillationConfig {
            omega,
            substeps_per_period,
            seed_fast: true,
            pressure_term: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0) || !self.omega.is_finite() {
            return Err(Error::config(
                "omega",
                format!("fast frequency must be positive and finite, got {}", self.omega),
            ));
        }
        if self.substeps_per_period < 16 {
            return Err(Error::config(
                "substeps_per_period",
                format!(
                    "the oscillation must be resolved: need ≥ 16 substeps per period, got {}",
                    self.substeps_per_period
                ),
            ));
        }
        Ok(())
    }

    pub fn period(&self) -> f64 {
        TAU / self.omega
    }

    pub fn dt(&self) -> f64 {
        self.period() / self.substeps_per_period as f64
    }
}

/// The ideal-gas pressure behind the oscillating term. Diagnostic only — the
/// solver works with the ln ρ force directly.
#[derive(Debug, Clone, Copy)]
pub struct PressureLaw {
    pub hbar: f64,
    pub omega: f64,
}

impl PressureLaw {
    /// p(ρ_r, t) = −(ħω/√2) ρ_r cos ωt.
    pub fn pressure(&self, rho_r: &ScalarField, t: f64) -> ScalarField {
        let c = self.over_density(t);
        rho_r.map(|v| c * v)
    }

    /// p/ρ_r — a function of t alone (the ideal-gas signature).
    pub fn over_density(&self, t: f64) -> f64 {
        -(self.hbar * self.omega / SQRT_2) * (self.omega * t).cos()
    }

    /// Equivalent gas temperature −(ħω/√2k)cos ωt, with Boltzmann k = 1 in
    /// the crate's nondimensional units. Reported, never used.
    pub fn temperature(&self, t: f64) -> f64 {
        self.over_density(t)
    }
}

/// Which external coupling the flow sees.
pub enum HydroProblem<'a> {
    /// Plain scalar potential.
    Potential(&'a PotentialSpec),
    /// Electromagnetic potentials (A, φ) with the charge/light-speed from
    /// `PhysicalConstants`.
    Em(&'a EmPotentialSpec),
    /// Two particles on a 2D configuration grid with a pre-evaluated
    /// interaction potential U(x₁, x₂) and per-axis masses.
    ManyBody { u: &'a ScalarField },
}

/// A fully prepared stepper: grid-resident coupling fields plus the
/// oscillation parameters. All three public step entry points funnel into
/// this one RHS, which is what makes the A ≡ 0 electromagnetic reduction
/// reproduce the plain stepper bit-for-bit.
pub struct HydroSystem {
    grid: Arc<Grid>,
    /// Scalar potential energy: U, or qφ in the electromagnetic case.
    u_scalar: ScalarField,
    /// (q/c)·A per axis, when a vector potential is present.
    a_scaled: Option<VectorField>,
    /// ∂_k of the k-th component of `a_scaled`, for the velocity divergence.
    da_scaled: Option<VectorField>,
    masses: Vec<f64>,
    hbar: f64,
    /// ħω/√2 when the pressure term is on, 0.0 when disabled.
    pressure_amp: f64,
    pub osc: OscillationConfig,
    pub rho_floor: f64,
}

struct LogDeriv {
    lam_dot: ScalarField,
    sig_dot: ScalarField,
}

impl HydroSystem {
    pub fn new(
        grid: &Arc<Grid>,
        problem: &HydroProblem,
        osc: OscillationConfig,
        consts: &PhysicalConstants,
        rho_floor: f64,
    ) -> Result<HydroSystem> {
        osc.validate()?;
        consts.validate(grid.dims())?;
        let (u_scalar, a_scaled) = match problem {
            HydroProblem::Potential(spec) => (spec.evaluate(grid, consts)?, None),
            HydroProblem::Em(em) => {
                if em.phi().grid().as_ref() != grid.as_ref() {
                    return Err(Error::GridMismatch {
                        context: "EM potentials vs flow grid".into(),
                    });
                }
                let q = consts.charge;
                let u = em.phi().map(|p| q * p);
                let scale = q / consts.light_speed;
                let a = VectorField::from_components(
                    em.a()
                        .components()
                        .iter()
                        .map(|c| c.map(|v| scale * v))
                        .collect(),
                )?;
                (u, Some(a))
            }
            HydroProblem::ManyBody { u } => {
                if grid.dims() != 2 {
                    return Err(Error::config(
                        "grid",
                        "the two-particle flow runs on a 2D configuration grid",
                    ));
                }
                if u.grid().as_ref() != grid.as_ref() {
                    return Err(Error::GridMismatch {
                        context: "interaction potential vs configuration grid".into(),
                    });
                }
                ((*u).clone(), None)
            }
        };
        let masses = (0..grid.dims()).map(|a| consts.mass_for_axis(a)).collect();
        let pressure_amp = if osc.pressure_term {
            consts.hbar * osc.omega / SQRT_2
        } else {
            0.0
        };
        let da_scaled = match &a_scaled {
            Some(a) => {
                let comps = (0..grid.dims())
                    .map(|k| calculus::derivative_axis(a.component(k), k, DerivativeOrder::First))
                    .collect::<Result<Vec<_>>>()?;
                Some(VectorField::from_components(comps)?)
            }
            None => None,
        };
        Ok(HydroSystem {
            grid: Arc::clone(grid),
            u_scalar,
            a_scaled,
            da_scaled,
            masses,
            hbar: consts.hbar,
            pressure_amp,
            osc,
            rho_floor,
        })
    }

    pub fn pressure_law(&self) -> PressureLaw {
        PressureLaw {
            hbar: self.hbar,
            omega: self.osc.omega,
        }
    }

    /// v_k = (∇_k S_r − (q/c)A_k)/m_k. On dirichlet grids the derivative's
    /// one-sided closures treat the walls as an open tail: the flow there is
    /// whatever the interior profile extrapolates to, not a hard wall. That
    /// only stays faithful while the boundary density is large enough to be
    /// represented (see the module docs on box sizing).
    pub fn velocity(&self, state: &HydroState) -> Result<VectorField> {
        let grad = calculus::gradient(&state.s_r)?;
        VectorField::from_components(
            grad.into_components()
                .into_iter()
                .enumerate()
                .map(|(axis, mut g)| {
                    if let Some(a) = &self.a_scaled {
                        g = g.zip_map(a.component(axis), |gs, av| gs - av);
                    }
                    let m = self.masses[axis];
                    Ok(g.map(|x| x / m))
                })
                .collect::<Result<Vec<_>>>()?,
        )
    }

    /// Time integral of the pressure coefficient: b(t) = (ħ/√2)·sin ωt,
    /// identically zero when the pressure term is disabled.
    fn press_integral(&self, t: f64) -> f64 {
        self.pressure_amp / self.osc.omega * (self.osc.omega * t).sin()
    }

    /// Right-hand side in the working variables λ = ln ρ_r and
    /// Σ = S_r − b(t)·λ.
    ///
    /// Substituting S_r = Σ + bλ into the action equation cancels the
    /// pressure source against ḃλ exactly, leaving
    ///
    /// ```text
    /// λ̇ = −Σ_k (v_k ∂_k λ + ∂_k v_k),        Σ̇ = −K − U − b·λ̇,
    /// ```
    ///
    /// with v_k = (∂_k Σ + b ∂_k λ − (q/c)A_k)/m_k and K the kinetic
    /// density. Every coefficient here is bounded by the flow's own
    /// velocity scale and by b ≤ ħ/√2 — the ω-sized amplitude that makes
    /// the raw (ρ_r, S_r) form stiff never appears. Positivity of the
    /// density is automatic (ρ_r = e^λ), and in the wings λ is a gentle
    /// polynomial-like profile the one-sided closures handle cleanly,
    /// instead of a logarithm's blow-up fed back through division by ρ.
    fn rhs_log(&self, lam: &ScalarField, sig: &ScalarField, t: f64) -> Result<LogDeriv> {
        let b = self.press_integral(t);
        let n = self.grid.len();
        let mut kinetic = vec![0.0; n];
        let mut lam_dot = ScalarField::zeros(&self.grid);
        for axis in 0..self.grid.dims() {
            let m = self.masses[axis];
            let dlam = calculus::derivative_axis(lam, axis, DerivativeOrder::First)?;
            let dsig = calculus::derivative_axis(sig, axis, DerivativeOrder::First)?;
            let d2lam = calculus::derivative_axis(lam, axis, DerivativeOrder::Second)?;
            let d2sig = calculus::derivative_axis(sig, axis, DerivativeOrder::Second)?;
            let a = self.a_scaled.as_ref().map(|a| a.component(axis).values());
            let da = self.da_scaled.as_ref().map(|d| d.component(axis).values());
            let out = lam_dot.values_mut();
            for i in 0..n {
                let mut v = dsig.values()[i] + b * dlam.values()[i];
                if let Some(a) = a {
                    v -= a[i];
                }
                v /= m;
                let mut div = d2sig.values()[i] + b * d2lam.values()[i];
                if let Some(da) = da {
                    div -= da[i];
                }
                div /= m;
                out[i] -= v * dlam.values()[i] + div;
                kinetic[i] += 0.5 * m * v * v;
            }
        }
        let mut sig_dot = ScalarField::zeros(&self.grid);
        {
            let out = sig_dot.values_mut();
            for (i, o) in out.iter_mut().enumerate() {
                *o = -kinetic[i] - self.u_scalar.values()[i] - b * lam_dot.values()[i];
            }
        }
        self.slave_boundary_rows(&mut lam_dot);
        self.slave_boundary_rows(&mut sig_dot);
        Ok(LogDeriv { lam_dot, sig_dot })
    }

    fn slave_boundary_rows(&self, f: &mut ScalarField) {
        slave_boundary_rows(&self.grid, f);
    }

    fn rk4_log(
        &self,
        lam0: &ScalarField,
        sig0: &ScalarField,
        t: f64,
        dt: f64,
    ) -> Result<(ScalarField, ScalarField)> {
        let k1 = self.rhs_log(lam0, sig0, t)?;
        let half = dt / 2.0;

        let mut l = lam0.clone();
        l.add_scaled(&k1.lam_dot, half);
        let mut s = sig0.clone();
        s.add_scaled(&k1.sig_dot, half);
        let k2 = self.rhs_log(&l, &s, t + half)?;

        let mut l = lam0.clone();
        l.add_scaled(&k2.lam_dot, half);
        let mut s = sig0.clone();
        s.add_scaled(&k2.sig_dot, half);
        let k3 = self.rhs_log(&l, &s, t + half)?;

        let mut l = lam0.clone();
        l.add_scaled(&k3.lam_dot, dt);
        let mut s = sig0.clone();
        s.add_scaled(&k3.sig_dot, dt);
        let k4 = self.rhs_log(&l, &s, t + dt)?;

        let sixth = dt / 6.0;
        let third = dt / 3.0;
        let mut lam = lam0.clone();
        lam.add_scaled(&k1.lam_dot, sixth);
        lam.add_scaled(&k2.lam_dot, third);
        lam.add_scaled(&k3.lam_dot, third);
        lam.add_scaled(&k4.lam_dot, sixth);
        let mut sig = sig0.clone();
        sig.add_scaled(&k1.sig_dot, sixth);
        sig.add_scaled(&k2.sig_dot, third);
        sig.add_scaled(&k3.sig_dot, third);
        sig.add_scaled(&k4.sig_dot, sixth);
        Ok((lam, sig))
    }

    /// One RK4 advance in (λ, Σ), materialized back to (ρ_r, S_r).
    fn advance_log(&self, state: &HydroState, dt: f64, stats: &mut StepStats) -> Result<HydroState> {
        let floor = self.rho_floor;
        let lam0 = state.rho_r.map(|r| r.max(floor).ln());
        let b0 = self.press_integral(state.t);
        let sig0 = state.s_r.zip_map(&lam0, |s, l| s - b0 * l);
        let (lam, sig) = self.rk4_log(&lam0, &sig0, state.t, dt)?;
        let t1 = state.t + dt;
        let b1 = self.press_integral(t1);
        let mut rho_r = ScalarField::zeros(&self.grid);
        {
            let out = rho_r.values_mut();
            for (i, o) in out.iter_mut().enumerate() {
                let r = lam.values()[i].exp();
                if r < floor {
                    *o = floor;
                    stats.clamped += 1;
                } else {
                    *o = r;
                }
            }
        }
        let s_r = sig.zip_map(&lam, |s, l| s + b1 * l);
        finite_checked(HydroState { rho_r, s_r, t: t1 })
    }

    /// One time step of size `dt`.
    ///
    /// The advance happens in the variables λ = ln ρ_r and Σ = S_r − b(t)λ
    /// with b(t) = (ħ/√2) sin ωt: since ḃ equals the pressure coefficient
    /// (ħω/√2) cos ωt, the substitution
    ///
    /// ```text
    /// Σ̇ = Ṡ_r − ḃλ − bλ̇ = (−K − U + ḃλ) − ḃλ − bλ̇ = −K − U − bλ̇
    /// ```
    ///
    /// removes the ω-sized source term identically, while ρ_r = e^λ keeps
    /// the density positive by construction. The CFL bound is checked up
    /// front; a stage that blows up to non-finite values is retried once as
    /// two half steps before the run is declared collapsed.
    pub fn step(&self, state: &HydroState, dt: f64) -> Result<HydroState> {
        self.step_counted(state, dt, &mut StepStats::default())
    }

    /// As [`HydroSystem::step`], accumulating clamp/retry statistics.
    pub fn step_counted(
        &self,
        state: &HydroState,
        dt: f64,
        stats: &mut StepStats,
    ) -> Result<HydroState> {
        if dt <= 0.0 || !dt.is_finite() {
            return Err(Error::StepSize {
                what: "flow step".into(),
                dt,
                bound: self.osc.dt(),
            });
        }
        if dt > self.osc.dt() * (1.0 + 1e-9) {
            return Err(Error::StepSize {
                what: "fast-period resolution (Δt ≤ 2π/ωK)".into(),
                dt,
                bound: self.osc.dt(),
            });
        }
        if let Some((index, &value)) = state
            .rho_r
            .values()
            .iter()
            .enumerate()
            .find(|(_, &v)| v < self.rho_floor || !v.is_finite())
        {
            return Err(Error::NodeEncountered {
                index,
                density: value,
                floor: self.rho_floor,
            });
        }
        let v = self.velocity(state)?;
        for axis in 0..self.grid.dims() {
            let vmax = v.component(axis).max_abs();
            let dx = self.grid.spacing(axis);
            if dt * vmax > 0.5 * dx {
                return Err(Error::StepSize {
                    what: format!("advection CFL on axis {axis} (|v| = {vmax:.3e})"),
                    dt,
                    bound: 0.5 * dx / vmax,
                });
            }
        }

        match self.advance_log(state, dt, stats) {
            Ok(s) => Ok(s),
            // A blown-up stage (the one failure mode left — the density
            // itself cannot go negative through the exponential) is retried
            // once as two half steps before the run is declared collapsed.
            Err(Error::NonFinite { .. }) => {
                stats.halvings += 1;
                let mid = self
                    .advance_log(state, dt / 2.0, stats)
                    .map_err(collapse_if_nonfinite)?;
                self.advance_log(&mid, dt / 2.0, stats)
                    .map_err(collapse_if_nonfinite)
            }
            Err(e) => Err(e),
        }
    }
}

fn collapse_if_nonfinite(e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::DensityCollapse {
            step: 0,
            min: f64::NAN,
        },
        other => other,
    }
}

/// Counters for the step-acceptance machinery.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    /// Wing cells whose density underflowed the floor on exponentiation.
    pub clamped: usize,
    /// Steps retried as two half steps.
    pub halvings: usize,
}

fn finite_checked(state: HydroState) -> Result<HydroState> {
    state.rho_r.ensure_finite("flow density")?;
    state.s_r.ensure_finite("flow action")?;
    Ok(state)
}

/// One step of the plain-potential flow.
pub fn hj_step(
    state: &HydroState,
    u: &PotentialSpec,
    osc: &OscillationConfig,
    consts: &PhysicalConstants,
    dt: f64,
) -> Result<HydroState> {
    let sys = HydroSystem::new(
        state.grid(),
        &HydroProblem::Potential(u),
        *osc,
        consts,
        HYDRO_RHO_FLOOR,
    )?;
    sys.step(state, dt)
}

/// One step of the electromagnetic flow. With A ≡ 0 and qφ = U this
/// reproduces `hj_step` exactly (same code path; the A terms subtract a
/// literal zero).
pub fn hj_step_em(
    state: &HydroState,
    em: &EmPotentialSpec,
    osc: &OscillationConfig,
    consts: &PhysicalConstants,
    dt: f64,
) -> Result<HydroState> {
    let sys = HydroSystem::new(
        state.grid(),
        &HydroProblem::Em(em),
        *osc,
        consts,
        HYDRO_RHO_FLOOR,
    )?;
    sys.step(state, dt)
}

/// One step of the two-particle configuration-space flow.
pub fn hj_step_many(
    state: &HydroState,
    u: &ScalarField,
    osc: &OscillationConfig,
    consts: &PhysicalConstants,
    dt: f64,
) -> Result<HydroState> {
    let sys = HydroSystem::new(
        state.grid(),
        &HydroProblem::ManyBody { u },
        *osc,
        consts,
        HYDRO_RHO_FLOOR,
    )?;
    sys.step(state, dt)
}

/// Replace the two outermost rows of each dirichlet axis by quadratic
/// extrapolation from the three rows inside them.
///
/// The one-sided closure rows carry larger effective wavenumbers than the
/// interior stencil, so on a grid sized right at the scale-separation bound
/// (see the module docs) they are the one place the oscillating pressure can
/// still pump parametrically. Slaving the rate fields' wall rows to the
/// interior removes that independent boundary dynamics, and a quadratic is
/// all the exact oscillating solution needs there: its rates are degree-2
/// polynomials of the coordinates.
fn slave_boundary_rows(grid: &Grid, f: &mut ScalarField) {
    for axis in 0..grid.dims() {
        let ax = grid.axis(axis);
        if ax.boundary != Boundary::DirichletZero || ax.points < 8 {
            continue;
        }
        let n = ax.points;
        let stride = grid.strides()[axis];
        let outer = grid.len() / (n * stride);
        let vals = f.values_mut();
        for o in 0..outer {
            for i in 0..stride {
                let base = o * n * stride + i;
                let at = |j: usize| base + j * stride;
                vals[at(1)] = 3.0 * vals[at(2)] - 3.0 * vals[at(3)] + vals[at(4)];
                vals[at(0)] = 3.0 * vals[at(1)] - 3.0 * vals[at(2)] + vals[at(3)];
                vals[at(n - 2)] = 3.0 * vals[at(n - 3)] - 3.0 * vals[at(n - 4)] + vals[at(n - 5)];
                vals[at(n - 1)] = 3.0 * vals[at(n - 2)] - 3.0 * vals[at(n - 3)] + vals[at(n - 4)];
            }
        }
    }
}

/// Analytic fast components at time t₀:
/// σ = (ħ/√2) sin ωt₀ · ln ρ, ζ = (ħ/(√2ω)) cos ωt₀ · Σ_k (1/m_k)∇_k²ρ.
pub fn seed_fast_components(
    rho: &ScalarField,
    t0: f64,
    osc: &OscillationConfig,
    consts: &PhysicalConstants,
    rho_floor: f64,
) -> Result<(ScalarField, ScalarField)> {
    osc.validate()?;
    consts.validate(rho.grid().dims())?;
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
    let sigma_coef = consts.hbar / SQRT_2 * (osc.omega * t0).sin();
    let sigma = log_density(rho, rho_floor).map(|v| sigma_coef * v);

    let zeta_coef = consts.hbar / (SQRT_2 * osc.omega) * (osc.omega * t0).cos();
    let mut weighted_lap = ScalarField::zeros(rho.grid());
    for axis in 0..rho.grid().dims() {
        let d2 = calculus::derivative_axis(rho, axis, DerivativeOrder::Second)?;
        weighted_lap.add_scaled(&d2, 1.0 / consts.mass_for_axis(axis));
    }
    // The closure rows of a one-sided Laplacian are unreliable on steep
    // tails; extrapolate them from the interior like the stepper does.
    slave_boundary_rows(rho.grid(), &mut weighted_lap);
    let zeta = weighted_lap.map(|v| zeta_coef * v);
    Ok((sigma, zeta))
}

/// Starting point for a run.
pub enum InitialData {
    /// Decompose ψ = √ρ e^{iS/ħ} and flow the pieces.
    Wavefunction(Wavefunction),
    /// Slow fields given directly.
    Fields { rho: ScalarField, s: ScalarField },
}

/// Run parameters beyond the physics.
pub struct HydroRunConfig {
    pub osc: OscillationConfig,
    /// Total simulated time; must be an integer number of fast periods.
    pub total_time: f64,
    pub rho_floor: f64,
    /// Keep every substep of ρ_r and S_r (memory-heavy; needed for the
    /// fast/slow decomposition analyses). Per-period averages are always
    /// recorded.
    pub record_resolved: bool,
    /// Accumulate the convective/oscillating term-ratio diagnostic (extra
    /// gradient work per substep).
    pub measure_convective: bool,
}

impl HydroRunConfig {
    pub fn new(osc: OscillationConfig, total_time: f64) -> HydroRunConfig {
        HydroRunConfig {
            osc,
            total_time,
            rho_floor: HYDRO_RHO_FLOOR,
            record_resolved: false,
            measure_convective: false,
        }
    }
}

/// Scalar diagnostics accumulated over a run.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RunDiagnostics {
    /// ∫ρ_r dΩ at each period boundary.
    pub mass_series: Vec<f64>,
    /// max |mass − mass₀| over every accepted step.
    pub mass_drift_max: f64,
    /// p/ρ_r sampled at period boundaries (with the time of each sample).
    pub pressure_over_density: Vec<(f64, f64)>,
    /// Cycle-averaged energy ∫ρ̄(|∇S̄|²/2m + U)dΩ per period.
    pub mean_energy: Vec<f64>,
    /// RMS(convective)/RMS(oscillating) over the run, when measured.
    pub convective_ratio: Option<f64>,
    /// max over the run of the 2D curl of v_r (0 for 1D grids).
    pub curl_max: f64,
    /// Steps that had to be retried at dt/2.
    pub dt_halvings: usize,
    /// Wing cells clamped back to the floor after machine-tiny dips.
    pub negative_clamped: usize,
    /// ω·T_total — the scale-separation figure for the whole run.
    pub scale_separation: f64,
    /// Seeded cells whose fast swing was capped at half the slow density
    /// (wing positivity guard).
    pub seed_clamped: usize,
}

/// Everything a run produces.
pub struct HydroRun {
    /// Cycle-averaged density per fast period (trapezoid over K+1 substeps),
    /// stamped at the period midpoint.
    pub period_mid_times: Vec<f64>,
    pub period_avg_rho: Vec<ScalarField>,
    pub period_avg_s: Vec<ScalarField>,
    /// Every accepted substep, when `record_resolved` is on: (times, ρ_r, S_r).
    pub resolved: Option<(Vec<f64>, Vec<ScalarField>, Vec<ScalarField>)>,
    pub final_state: HydroState,
    pub diagnostics: RunDiagnostics,
}

/// Advance the oscillating flow for `config.total_time`, recording per-period
/// cycle averages and diagnostics.
pub fn run(
    initial: InitialData,
    problem: &HydroProblem,
    config: &HydroRunConfig,
    consts: &PhysicalConstants,
) -> Result<HydroRun> {
    let osc = config.osc;
    osc.validate()?;
    let periods_float = config.total_time / osc.period();
    let n_periods = periods_float.round();
    if config.total_time < 0.0 || (periods_float - n_periods).abs() > 1e-9 {
        return Err(Error::config(
            "total_time",
            format!(
                "must be an integer number of fast periods for clean averaging windows \
                 (got {:.6} periods)",
                periods_float
            ),
        ));
    }
    let n_periods = n_periods as usize;

    let (rho0, s0) = match initial {
        InitialData::Wavefunction(psi) => {
            let floor = madelung::default_rho_floor(&psi.density());
            let (rho, s) = madelung::madelung_decompose(&psi, consts, floor)?;
            (rho, s)
        }
        InitialData::Fields { rho, s } => (rho, s),
    };
    rho0.same_grid(&s0, "initial density vs action")?;
    let grid = Arc::clone(rho0.grid());
    let system = HydroSystem::new(&grid, problem, osc, consts, config.rho_floor)?;

    // Seed the analytic fast components so the run starts on the oscillating
    // solution branch instead of spending its first periods in a transient.
    let t0 = 0.0;
    let mut seed_clamped = 0usize;
    let mut state = if osc.seed_fast {
        let (sigma, zeta) = seed_fast_components(&rho0, t0, &osc, consts, config.rho_floor)?;
        // The linearized seed is only meaningful while |ζ| ≪ ρ̄. Cap the
        // swing at half the local slow density: in wall rows of coarse
        // dirichlet grids the one-sided Laplacian behind ζ can be wildly
        // off on a steep tail, and an uncapped seed would start the run
        // from a negative or floor-pinned density.
        let mut rho_r = rho0.clone();
        {
            let out = rho_r.values_mut();
            for (i, o) in out.iter_mut().enumerate() {
                let base = *o;
                let z = zeta.values()[i];
                let cap = 0.5 * base;
                let z_used = z.clamp(-cap, cap);
                if z_used != z {
                    seed_clamped += 1;
                }
                *o = (base + z_used).max(config.rho_floor);
            }
        }
        let s_r = &s0 + &sigma;
        HydroState::new(rho_r, s_r, t0)?
    } else {
        HydroState::new(rho0.clone(), s0.clone(), t0)?
    };

    let dt = osc.dt();
    let k_sub = osc.substeps_per_period;
    let mass0 = state.mass()?;
    let pressure = system.pressure_law();

    let mut diagnostics = RunDiagnostics {
        mass_series: vec![mass0],
        mass_drift_max: 0.0,
        pressure_over_density: vec![(t0, pressure.over_density(t0))],
        mean_energy: Vec::with_capacity(n_periods),
        convective_ratio: None,
        curl_max: 0.0,
        dt_halvings: 0,
        negative_clamped: 0,
        scale_separation: osc.omega * config.total_time,
        seed_clamped,
    };
    let mut stats = StepStats::default();

    let mut period_mid_times = Vec::with_capacity(n_periods);
    let mut period_avg_rho: Vec<ScalarField> = Vec::with_capacity(n_periods);
    let mut period_avg_s: Vec<ScalarField> = Vec::with_capacity(n_periods);
    let mut resolved = if config.record_resolved {
        Some((
            vec![state.t],
            vec![state.rho_r.clone()],
            vec![state.s_r.clone()],
        ))
    } else {
        None
    };

    let mut conv_num = 0.0f64;
    let mut conv_den = 0.0f64;

    for period in 0..n_periods {
        // Trapezoid accumulators over this period's K+1 samples.
        let mut acc_rho = state.rho_r.clone();
        acc_rho.scale(0.5);
        let mut acc_s = state.s_r.clone();
        acc_s.scale(0.5);
        // S samples kept only if the convective diagnostic needs them.
        let mut s_samples: Vec<ScalarField> = Vec::new();
        if config.measure_convective {
            s_samples.push(state.s_r.clone());
        }

        for sub in 0..k_sub {
            let step_index = period * k_sub + sub;
            let target_t = t0 + (step_index + 1) as f64 * dt;
            let next = match system.step_counted(&state, dt, &mut stats) {
                Ok(s) => s,
                Err(Error::DensityCollapse { min, .. }) => {
                    return Err(Error::DensityCollapse {
                        step: step_index,
                        min,
                    })
                }
                Err(e) => return Err(e),
            };
            state = next;
            // Keep the time lattice exact: RK4 accumulates t additively,
            // which drifts by an ulp per step; re-stamp from the lattice.
            state.t = target_t;

            let m = state.mass()?;
            diagnostics.mass_drift_max = diagnostics.mass_drift_max.max((m - mass0).abs());

            let w = if sub + 1 == k_sub { 0.5 } else { 1.0 };
            acc_rho.add_scaled(&state.rho_r, w);
            acc_s.add_scaled(&state.s_r, w);

            if config.measure_convective {
                s_samples.push(state.s_r.clone());
            }
            if let Some((times, rhos, ss)) = &mut resolved {
                times.push(state.t);
                rhos.push(state.rho_r.clone());
                ss.push(state.s_r.clone());
            }
        }

        let inv_k = 1.0 / k_sub as f64;
        acc_rho.scale(inv_k);
        acc_s.scale(inv_k);

        if grid.dims() == 2 {
            let v = system.velocity(&state)?;
            let curl = curl_2d(&v)?;
            diagnostics.curl_max = diagnostics.curl_max.max(curl.max_abs());
        }

        diagnostics
            .mean_energy
            .push(mean_energy(&acc_rho, &acc_s, &system)?);
        diagnostics.mass_series.push(state.mass()?);
        diagnostics
            .pressure_over_density
            .push((state.t, pressure.over_density(state.t)));

        if config.measure_convective {
            let (num, den) = convective_contributions(
                &s_samples,
                &acc_s,
                &acc_rho,
                &system,
                t0 + (period * k_sub) as f64 * dt,
                dt,
            )?;
            conv_num += num;
            conv_den += den;
        }

        period_mid_times.push(t0 + (period as f64 + 0.5) * osc.period());
        period_avg_rho.push(acc_rho);
        period_avg_s.push(acc_s);
    }

    if config.measure_convective && conv_den > 0.0 {
        diagnostics.convective_ratio = Some((conv_num / conv_den).sqrt());
    }
    diagnostics.dt_halvings = stats.halvings;
    diagnostics.negative_clamped = stats.clamped;

    Ok(HydroRun {
        period_mid_times,
        period_avg_rho,
        period_avg_s,
        resolved,
        final_state: state,
        diagnostics,
    })
}

/// ∂x v_y − ∂y v_x: the potential-flow violation diagnostic. The two mixed
/// partials act along different axes, so for v = ∇S/m (equal masses) they
/// are the same tensor-product operator applied in either order and the curl
/// cancels to roundoff.
pub fn curl_2d(v: &VectorField) -> Result<ScalarField> {
    let dvy_dx = calculus::derivative_axis(v.component(1), 0, DerivativeOrder::First)?;
    let dvx_dy = calculus::derivative_axis(v.component(0), 1, DerivativeOrder::First)?;
    Ok(&dvy_dx - &dvx_dy)
}

fn mean_energy(rho: &ScalarField, s: &ScalarField, system: &HydroSystem) -> Result<f64> {
    let grad = calculus::gradient(s)?;
    let mut density = ScalarField::zeros(&system.grid);
    for axis in 0..system.grid.dims() {
        let g = grad.component(axis);
        let m = system.masses[axis];
        density = density.zip_map(g, |acc, gv| acc + gv * gv / (2.0 * m));
    }
    let e_field = rho.zip_map(&density.zip_map(&system.u_scalar, |k, u| k + u), |r, e| r * e);
    calculus::integrate(&e_field)
}

/// Accumulate Σ‖kinetic(S) − kinetic(S̄)‖₂² (convective) and
/// Σ‖(ħω/√2)cos ωt · ln ρ̄‖₂² (oscillating) over one period's samples.
fn convective_contributions(
    s_samples: &[ScalarField],
    s_bar: &ScalarField,
    rho_bar: &ScalarField,
    system: &HydroSystem,
    t_start: f64,
    dt: f64,
) -> Result<(f64, f64)> {
    let kinetic = |s: &ScalarField| -> Result<ScalarField> {
        let grad = calculus::gradient(s)?;
        let mut k = ScalarField::zeros(&system.grid);
        for axis in 0..system.grid.dims() {
            let m = system.masses[axis];
            k = k.zip_map(grad.component(axis), |acc, g| acc + g * g / (2.0 * m));
        }
        Ok(k)
    };
    let k_bar = kinetic(s_bar)?;
    let ln_rho_bar = log_density(rho_bar, system.rho_floor);
    let amp = system.pressure_amp;
    let mut num = 0.0;
    let mut den = 0.0;
    for (j, s) in s_samples.iter().enumerate() {
        let t = t_start + j as f64 * dt;
        let k = kinetic(s)?;
        let conv = k.zip_map(&k_bar, |a, b| a - b);
        num += calculus::l2_norm(&conv)?.powi(2);
        let osc_term = amp * (system.osc.omega * t).cos();
        let o = ln_rho_bar.map(|v| osc_term * v);
        den += calculus::l2_norm(&o)?.powi(2);
    }
    Ok((num, den))
}

/// Reduced-order Euler-form stepper (density + velocity), kept only as a
/// cross-check that the Hamilton–Jacobi form solves the same flow:
/// m dv/dt = −∇U − (1/ρ)∇p with the oscillating ideal-gas pressure.
pub struct EulerState {
    pub rho: ScalarField,
    pub v: VectorField,
    pub t: f64,
}

pub fn euler_step_diagnostic(
    state: &EulerState,
    u: &ScalarField,
    osc: &OscillationConfig,
    consts: &PhysicalConstants,
    rho_floor: f64,
    dt: f64,
) -> Result<EulerState> {
    let grid = Arc::clone(state.rho.grid());
    let press_amp = if osc.pressure_term {
        consts.hbar * osc.omega / SQRT_2
    } else {
        0.0
    };
    let grad_u = calculus::gradient(u)?;
    let rhs = |rho: &ScalarField, v: &VectorField, t: f64| -> Result<(ScalarField, VectorField)> {
        let mut rho_dot = ScalarField::zeros(&grid);
        for axis in 0..grid.dims() {
            let flux = rho.zip_map(v.component(axis), |r, vi| r * vi);
            let d = calculus::derivative_axis(&flux, axis, DerivativeOrder::First)?;
            rho_dot = rho_dot.zip_map(&d, |acc, dv| acc - dv);
        }
        // −(1/ρ)∇p = +(ħω/√2)cos ωt ∇ln ρ, computed as ∇ρ/ρ.
        let press = press_amp * (osc.omega * t).cos();
        let grad_rho = calculus::gradient(rho)?;
        let mut v_dot_components = Vec::with_capacity(grid.dims());
        for axis in 0..grid.dims() {
            let m = consts.mass_for_axis(axis);
            // (v·∇)v_axis
            let mut advect = ScalarField::zeros(&grid);
            let grad_vaxis = calculus::gradient(v.component(axis))?;
            for j in 0..grid.dims() {
                advect =
                    advect.zip_map(&v.component(j).zip_map(grad_vaxis.component(j), |a, b| a * b), |acc, p| acc + p);
            }
            let force = grad_u.component(axis).zip_map(
                &grad_rho.component(axis).zip_map(rho, |g, r| g / r.max(rho_floor)),
                |du, dlnr| (-du + press * dlnr) / m,
            );
            let v_dot = force.zip_map(&advect, |f, a| f - a);
            v_dot_components.push(v_dot);
        }
        Ok((rho_dot, VectorField::from_components(v_dot_components)?))
    };
    // Heun's method — second order is plenty for a cross-check.
    let (kr1, kv1) = rhs(&state.rho, &state.v, state.t)?;
    let mut rho_p = state.rho.clone();
    rho_p.add_scaled(&kr1, dt);
    let v_p = VectorField::from_components(
        (0..grid.dims())
            .map(|a| {
                let mut c = state.v.component(a).clone();
                c.add_scaled(kv1.component(a), dt);
                c
            })
            .collect(),
    )?;
    let (kr2, kv2) = rhs(&rho_p, &v_p, state.t + dt)?;
    let mut rho = state.rho.clone();
    rho.add_scaled(&kr1, dt / 2.0);
    rho.add_scaled(&kr2, dt / 2.0);
    let v = VectorField::from_components(
        (0..grid.dims())
            .map(|a| {
                let mut c = state.v.component(a).clone();
                c.add_scaled(kv1.component(a), dt / 2.0);
                c.add_scaled(kv2.component(a), dt / 2.0);
                c
            })
            .collect(),
    )?;
    Ok(EulerState {
        rho,
        v,
        t: state.t + dt,
    })
}
