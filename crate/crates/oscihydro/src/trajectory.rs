//! Particle paths through the flow: the kinematic rule ṙ = ∇S/m, Newtonian
//! motion in an effective potential, and Newtonian motion against the raw
//! oscillating potential.
//!
//! The three integrators answer one question from three sides. Kinematic
//! trajectories ride the velocity field of an already-solved flow — they add
//! no dynamics of their own, and an ensemble of them transports the density
//! exactly as the continuity equation says it must. `newton_effective`
//! forgets the flow and pushes a point mass through the cycle-averaged
//! potential. `newton_true` does the same against the full oscillating
//! potential, fast wiggle and all; averaged over a cycle it should land on
//! `newton_effective`'s answer, and watching the two agree (and the rate at
//! which they agree as ω grows) is the particle-level check on the whole
//! averaging story.
//!
//! Fields are interpolated multilinearly in space and linearly in time
//! between series samples. Multilinear is a deliberate floor, not an
//! oversight: every trajectory acceptance figure here is tolerance-based,
//! and a fancier interpolant mostly complicates the question of when a
//! sample point has strayed onto a density node.

use std::io::Write as IoWrite;

use crate::averaging::FieldSeries;
use crate::calculus::{self, DerivativeOrder};
use crate::constants::PhysicalConstants;
use crate::error::{Error, Result};
use crate::field::VectorField;

/// Fewest force/velocity samples per fast period that `newton_true` accepts,
/// mirroring the flow stepper's own resolution floor.
pub const MIN_SAMPLES_PER_PERIOD: usize = 16;

/// A sampled density below this fraction of the series' peak counts as a
/// node: the phase is not defined there and the kinematic rule loses meaning.
pub const NODE_FLOOR_REL: f64 = 1e-10;

/// Which integrator produced a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Kinematic,
    NewtonEffective,
    NewtonTrue,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Kinematic => "kinematic",
            Provenance::NewtonEffective => "newton_effective",
            Provenance::NewtonTrue => "newton_true",
        }
    }
}

/// One integrated path: uniform times, positions, velocities, and the tag
/// saying which rule produced it. Components beyond the grid dimension are
/// stored as zero.
#[derive(Debug, Clone)]
pub struct TrajectorySample {
    pub times: Vec<f64>,
    pub positions: Vec<[f64; 3]>,
    pub velocities: Vec<[f64; 3]>,
    pub dims: usize,
    pub provenance: Provenance,
}

impl TrajectorySample {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i][..self.dims]
    }

    pub fn velocity(&self, i: usize) -> &[f64] {
        &self.velocities[i][..self.dims]
    }

    /// Write the path as CSV: time, position components, velocity
    /// components, provenance tag.
    pub fn write_csv<W: IoWrite>(&self, w: &mut W) -> std::io::Result<()> {
        const AXES: [&str; 3] = ["x", "y", "z"];
        write!(w, "t")?;
        for a in 0..self.dims {
            write!(w, ",{}", AXES[a])?;
        }
        for a in 0..self.dims {
            write!(w, ",v{}", AXES[a])?;
        }
        writeln!(w, ",provenance")?;
        for i in 0..self.len() {
            write!(w, "{:.9e}", self.times[i])?;
            for a in 0..self.dims {
                write!(w, ",{:.9e}", self.positions[i][a])?;
            }
            for a in 0..self.dims {
                write!(w, ",{:.9e}", self.velocities[i][a])?;
            }
            writeln!(w, ",{}", self.provenance.as_str())?;
        }
        Ok(())
    }
}

/// A time-indexed stack of vector fields with linear interpolation between
/// samples — velocity tables for the kinematic rule, force tables for the
/// Newtonian ones.
struct VectorTable {
    times: Vec<f64>,
    fields: Vec<VectorField>,
    dims: usize,
}

impl VectorTable {
    /// Velocity table v_k = ∂_k S / m_k from an action series.
    fn velocities(s: &FieldSeries, consts: &PhysicalConstants) -> Result<VectorTable> {
        let dims = s.grid().dims();
        let mut fields = Vec::with_capacity(s.len());
        for f in s.fields() {
            let mut comps = Vec::with_capacity(dims);
            for axis in 0..dims {
                let mut d = calculus::derivative_axis(f, axis, DerivativeOrder::First)?;
                d.scale(1.0 / consts.mass_for_axis(axis));
                comps.push(d);
            }
            fields.push(VectorField::from_components(comps)?);
        }
        Ok(VectorTable {
            times: s.times().to_vec(),
            fields,
            dims,
        })
    }

    /// Acceleration table a_k = −∂_k U / m_k from a potential series.
    fn accelerations(u: &FieldSeries, consts: &PhysicalConstants) -> Result<VectorTable> {
        let dims = u.grid().dims();
        let mut fields = Vec::with_capacity(u.len());
        for f in u.fields() {
            let mut comps = Vec::with_capacity(dims);
            for axis in 0..dims {
                let mut d = calculus::derivative_axis(f, axis, DerivativeOrder::First)?;
                d.scale(-1.0 / consts.mass_for_axis(axis));
                comps.push(d);
            }
            fields.push(VectorField::from_components(comps)?);
        }
        Ok(VectorTable {
            times: u.times().to_vec(),
            fields,
            dims,
        })
    }

    fn span(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            self.times[self.times.len() - 1] - self.times[0]
        }
    }

    /// Sample at (r, t); `None` when r has left the domain. Times are
    /// clamped to the table's span, so callers must check coverage up front.
    fn eval(&self, r: &[f64; 3], t: f64, out: &mut [f64; 3]) -> Option<()> {
        if self.fields.len() == 1 {
            let v = self.fields[0].sample(&r[..self.dims])?;
            out[..self.dims].copy_from_slice(&v);
            return Some(());
        }
        let dt = self.times[1] - self.times[0];
        let u = ((t - self.times[0]) / dt).clamp(0.0, (self.times.len() - 1) as f64);
        let i = (u.floor() as usize).min(self.times.len() - 2);
        let a = u - i as f64;
        let lo = self.fields[i].sample(&r[..self.dims])?;
        let hi = self.fields[i + 1].sample(&r[..self.dims])?;
        for k in 0..self.dims {
            out[k] = (1.0 - a) * lo[k] + a * hi[k];
        }
        Some(())
    }
}

/// Optional density guard for kinematic integration: the trajectory errors
/// out if the sampled density falls below `NODE_FLOOR_REL` of the series
/// peak, instead of silently coasting through a node where the phase (and
/// hence the velocity field) is undefined.
pub struct NodeGuard<'a> {
    rho: &'a FieldSeries,
    floor: f64,
}

impl<'a> NodeGuard<'a> {
    pub fn new(rho: &'a FieldSeries) -> NodeGuard<'a> {
        let peak = rho
            .fields()
            .iter()
            .map(|f| f.max_value())
            .fold(f64::NEG_INFINITY, f64::max);
        NodeGuard {
            rho,
            floor: NODE_FLOOR_REL * peak.max(0.0),
        }
    }

    fn check(&self, r: &[f64; 3], t: f64, dims: usize, step: usize) -> Result<()> {
        let times = self.rho.times();
        let idx = if times.len() == 1 {
            0
        } else {
            let dt = times[1] - times[0];
            (((t - times[0]) / dt).round() as isize).clamp(0, times.len() as isize - 1) as usize
        };
        if let Some(d) = calculus::sample_multilinear(self.rho.field(idx), &r[..dims]) {
            if d < self.floor {
                return Err(Error::NodeEncountered {
                    index: step,
                    density: d,
                    floor: self.floor,
                });
            }
        }
        Ok(())
    }
}

fn step_count(span: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) {
        return Err(Error::config("dt", "must be positive"));
    }
    let ratio = span / dt;
    let n = ratio.round();
    if n < 1.0 || (ratio - n).abs() > 1e-6 {
        return Err(Error::config(
            "dt",
            format!(
                "step {:.3e} does not divide the integration window {:.3e}",
                dt, span
            ),
        ));
    }
    Ok(n as usize)
}

fn pack(r0: &[f64], dims: usize) -> Result<[f64; 3]> {
    if r0.len() != dims {
        return Err(Error::config(
            "r0",
            format!("{} components for a {}-dimensional grid", r0.len(), dims),
        ));
    }
    let mut out = [0.0; 3];
    out[..dims].copy_from_slice(r0);
    Ok(out)
}

fn kinematic_from_table(
    table: &VectorTable,
    guard: Option<&NodeGuard>,
    r0: &[f64],
    dt: f64,
) -> Result<TrajectorySample> {
    let dims = table.dims;
    let n_steps = step_count(table.span(), dt)?;
    let t0 = table.times[0];
    let mut r = pack(r0, dims)?;
    let escape = |step: usize| Error::Escape { index: 0, step };

    let mut times = Vec::with_capacity(n_steps + 1);
    let mut positions = Vec::with_capacity(n_steps + 1);
    let mut velocities = Vec::with_capacity(n_steps + 1);

    let mut k1 = [0.0; 3];
    let mut k2 = [0.0; 3];
    let mut k3 = [0.0; 3];
    let mut k4 = [0.0; 3];
    let mut stage = [0.0; 3];

    for step in 0..=n_steps {
        let t = t0 + step as f64 * dt;
        table.eval(&r, t, &mut k1).ok_or_else(|| escape(step))?;
        if let Some(g) = guard {
            g.check(&r, t, dims, step)?;
        }
        times.push(t);
        positions.push(r);
        velocities.push(k1);
        if step == n_steps {
            break;
        }
        for a in 0..dims {
            stage[a] = r[a] + 0.5 * dt * k1[a];
        }
        table
            .eval(&stage, t + 0.5 * dt, &mut k2)
            .ok_or_else(|| escape(step))?;
        for a in 0..dims {
            stage[a] = r[a] + 0.5 * dt * k2[a];
        }
        table
            .eval(&stage, t + 0.5 * dt, &mut k3)
            .ok_or_else(|| escape(step))?;
        for a in 0..dims {
            stage[a] = r[a] + dt * k3[a];
        }
        table
            .eval(&stage, t + dt, &mut k4)
            .ok_or_else(|| escape(step))?;
        for a in 0..dims {
            r[a] += dt / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]);
        }
    }

    Ok(TrajectorySample {
        times,
        positions,
        velocities,
        dims,
        provenance: Provenance::Kinematic,
    })
}

/// Integrate ṙ = ∇S/m with classic RK4 over the full span of the action
/// series. Space is interpolated multilinearly, time linearly between series
/// samples. Pass a [`NodeGuard`] to error out on density nodes instead of
/// coasting through them.
pub fn kinematic_trajectory(
    s: &FieldSeries,
    guard: Option<&NodeGuard>,
    r0: &[f64],
    dt: f64,
    consts: &PhysicalConstants,
) -> Result<TrajectorySample> {
    let table = VectorTable::velocities(s, consts)?;
    kinematic_from_table(&table, guard, r0, dt)
}

/// Integrate a batch of kinematic trajectories in parallel, one result per
/// start point. Trajectories are independent, so the batch splits into
/// per-thread chunks with nothing shared but the (read-only) velocity table;
/// an escape or node error in one path does not disturb the others.
pub fn kinematic_batch(
    s: &FieldSeries,
    guard: Option<&NodeGuard>,
    starts: &[Vec<f64>],
    dt: f64,
    consts: &PhysicalConstants,
) -> Result<Vec<Result<TrajectorySample>>> {
    let table = VectorTable::velocities(s, consts)?;
    if starts.is_empty() {
        return Ok(Vec::new());
    }
    let n_threads = std::thread::available_parallelism()
        .map(|p| p.get())
        .unwrap_or(1)
        .min(starts.len());
    let chunk = starts.len().div_ceil(n_threads);
    let mut out: Vec<Option<Result<TrajectorySample>>> =
        (0..starts.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (ci, (starts_chunk, out_chunk)) in
            starts.chunks(chunk).zip(out.chunks_mut(chunk)).enumerate()
        {
            let table = &table;
            scope.spawn(move || {
                for (j, (start, slot)) in
                    starts_chunk.iter().zip(out_chunk.iter_mut()).enumerate()
                {
                    let idx = ci * chunk + j;
                    *slot = Some(
                        kinematic_from_table(table, guard, start, dt).map_err(|e| match e {
                            Error::Escape { step, .. } => Error::Escape { index: idx, step },
                            other => other,
                        }),
                    );
                }
            });
        }
    });
    Ok(out.into_iter().map(|s| s.expect("chunk covered")).collect())
}

fn verlet(
    table: &VectorTable,
    r0: &[f64],
    v0: &[f64],
    dt: f64,
    total_time: f64,
    provenance: Provenance,
) -> Result<TrajectorySample> {
    let dims = table.dims;
    let n_steps = step_count(total_time, dt)?;
    if table.times.len() >= 2 && table.span() < total_time * (1.0 - 1e-9) {
        return Err(Error::config(
            "total_time",
            format!(
                "potential series spans {:.6e} but {:.6e} was requested",
                table.span(),
                total_time
            ),
        ));
    }
    let t0 = table.times[0];
    let mut r = pack(r0, dims)?;
    let mut v = pack(v0, dims)?;
    let escape = |step: usize| Error::Escape { index: 0, step };

    let mut times = Vec::with_capacity(n_steps + 1);
    let mut positions = Vec::with_capacity(n_steps + 1);
    let mut velocities = Vec::with_capacity(n_steps + 1);

    let mut acc = [0.0; 3];
    table.eval(&r, t0, &mut acc).ok_or_else(|| escape(0))?;
    let mut acc_next = [0.0; 3];

    for step in 0..=n_steps {
        let t = t0 + step as f64 * dt;
        times.push(t);
        positions.push(r);
        velocities.push(v);
        if step == n_steps {
            break;
        }
        // Velocity Verlet: drift with the current acceleration, re-evaluate,
        // then kick with the average of old and new.
        for a in 0..dims {
            r[a] += dt * v[a] + 0.5 * dt * dt * acc[a];
        }
        table
            .eval(&r, t + dt, &mut acc_next)
            .ok_or_else(|| escape(step))?;
        for a in 0..dims {
            v[a] += 0.5 * dt * (acc[a] + acc_next[a]);
        }
        acc = acc_next;
    }

    Ok(TrajectorySample {
        times,
        positions,
        velocities,
        dims,
        provenance,
    })
}

/// Newtonian motion m r̈ = −∇U_ef through a (typically static) effective
/// potential: velocity Verlet, second order and energy-stable over long
/// hauls. A single-sample series means a frozen potential; a longer series
/// is interpolated linearly in time and must cover `total_time`.
pub fn newton_effective(
    u_ef: &FieldSeries,
    r0: &[f64],
    v0: &[f64],
    dt: f64,
    total_time: f64,
    consts: &PhysicalConstants,
) -> Result<TrajectorySample> {
    let table = VectorTable::accelerations(u_ef, consts)?;
    verlet(&table, r0, v0, dt, total_time, Provenance::NewtonEffective)
}

/// Newtonian motion against the raw oscillating potential, fast wiggle
/// included. Both the step and the series sampling must resolve the
/// oscillation (≥ [`MIN_SAMPLES_PER_PERIOD`] per 2π/ω); the integration runs
/// over the full series span.
pub fn newton_true(
    u_ref: &FieldSeries,
    r0: &[f64],
    v0: &[f64],
    dt: f64,
    omega: f64,
    consts: &PhysicalConstants,
) -> Result<TrajectorySample> {
    if !(omega > 0.0) {
        return Err(Error::config("omega", "must be positive"));
    }
    let bound = std::f64::consts::TAU / omega / MIN_SAMPLES_PER_PERIOD as f64;
    if dt > bound * (1.0 + 1e-9) {
        return Err(Error::StepSize {
            what: "oscillation resolution".into(),
            dt,
            bound,
        });
    }
    let series_dt = u_ref.dt()?;
    if series_dt > bound * (1.0 + 1e-9) {
        return Err(Error::StepSize {
            what: "oscillating-potential sampling".into(),
            dt: series_dt,
            bound,
        });
    }
    let table = VectorTable::accelerations(u_ref, consts)?;
    let span = table.span();
    verlet(&table, r0, v0, dt, span, Provenance::NewtonTrue)
}

/// Centered moving average of a path over whole fast periods — the
/// trajectory-space counterpart of the field-series cycle average, with the
/// same trapezoid window and the same endpoint trimming.
pub fn cycle_average_path(
    sample: &TrajectorySample,
    omega: f64,
    window_periods: usize,
) -> Result<TrajectorySample> {
    let n = sample.len();
    if n < 2 {
        return Err(Error::config("trajectory", "too short to average"));
    }
    let dt = sample.times[1] - sample.times[0];
    let period = std::f64::consts::TAU / omega;
    let ratio = period / dt;
    let spp = ratio.round();
    if spp < 2.0 || (ratio - spp).abs() > 1e-6 * spp {
        return Err(Error::config(
            "trajectory",
            "sample spacing does not divide the fast period",
        ));
    }
    let w = window_periods * spp as usize;
    if w % 2 != 0 || w + 1 > n {
        return Err(Error::config(
            "window_periods",
            "window cannot be centered inside the trajectory",
        ));
    }
    let h = w / 2;
    let inv_w = 1.0 / w as f64;
    let mut times = Vec::with_capacity(n - w);
    let mut positions = Vec::with_capacity(n - w);
    let mut velocities = Vec::with_capacity(n - w);
    let avg = |rows: &[[f64; 3]], i: usize| {
        let mut acc = [0.0; 3];
        for a in 0..3 {
            acc[a] = 0.5 * (rows[i - h][a] + rows[i + h][a]);
            for j in i - h + 1..i + h {
                acc[a] += rows[j][a];
            }
            acc[a] *= inv_w;
        }
        acc
    };
    for i in h..n - h {
        times.push(sample.times[i]);
        positions.push(avg(&sample.positions, i));
        velocities.push(avg(&sample.velocities, i));
    }
    Ok(TrajectorySample {
        times,
        positions,
        velocities,
        dims: sample.dims,
        provenance: sample.provenance,
    })
}
