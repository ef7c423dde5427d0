//! Differential operators and quadrature on lattice fields.
//!
//! Periodic axes differentiate spectrally (FFT, exact for band-limited data);
//! dirichlet axes use 4th-order central stencils with one-sided closures at
//! the edges. The crate's solvers are accuracy-limited by time stepping, so
//! this spatial accuracy keeps space out of every error budget.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::Result;
use crate::field::{ScalarField, VectorField, Wavefunction};
use crate::grid::{Boundary, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeOrder {
    First,
    Second,
}

// Planning an FFT is far more expensive than running one, and the solvers
// differentiate the same line lengths millions of times. Plans are cached per
// thread; `Arc<dyn Fft>` clones are cheap.
thread_local! {
    static FFT_CACHE: RefCell<HashMap<usize, (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>)>> =
        RefCell::new(HashMap::new());
}

pub(crate) fn fft_pair(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    FFT_CACHE.with(|cache| {
        let mut map = cache.borrow_mut();
        let (fwd, inv) = map.entry(n).or_insert_with(|| {
            let mut planner = FftPlanner::new();
            (planner.plan_fft_forward(n), planner.plan_fft_inverse(n))
        });
        (Arc::clone(fwd), Arc::clone(inv))
    })
}

/// Spectral multipliers for d/dx or d²/dx² on a periodic axis of physical
/// length `length` with `n` samples. The Nyquist bin of the first derivative
/// is zeroed: the sampled Nyquist mode is pure cosine, whose derivative
/// vanishes on the lattice, and zeroing keeps real fields real.
fn spectral_multipliers(n: usize, length: f64, order: DerivativeOrder) -> Vec<Complex64> {
    let mut mult = vec![Complex64::new(0.0, 0.0); n];
    for (j, m) in mult.iter_mut().enumerate() {
        let jj = if j <= n / 2 {
            j as i64
        } else {
            j as i64 - n as i64
        };
        let k = 2.0 * PI * jj as f64 / length;
        *m = match order {
            DerivativeOrder::First => {
                if n % 2 == 0 && j == n / 2 {
                    Complex64::new(0.0, 0.0)
                } else {
                    Complex64::new(0.0, k)
                }
            }
            DerivativeOrder::Second => Complex64::new(-k * k, 0.0),
        };
    }
    mult
}

fn spectral_line(
    buf: &mut [Complex64],
    mult: &[Complex64],
    fwd: &Arc<dyn Fft<f64>>,
    inv: &Arc<dyn Fft<f64>>,
) {
    fwd.process(buf);
    for (b, &m) in buf.iter_mut().zip(mult) {
        *b *= m;
    }
    inv.process(buf);
    let scale = 1.0 / buf.len() as f64;
    for b in buf.iter_mut() {
        *b *= scale;
    }
}

/// 4th-order first derivative with one-sided closures; any smooth line, no
/// boundary-value assumption.
fn fd_first(line: &[Complex64], out: &mut [Complex64], h: f64) {
    let n = line.len();
    let c = 1.0 / (12.0 * h);
    out[0] =
        (line[0] * -25.0 + line[1] * 48.0 + line[2] * -36.0 + line[3] * 16.0 + line[4] * -3.0) * c;
    out[1] =
        (line[0] * -3.0 + line[1] * -10.0 + line[2] * 18.0 + line[3] * -6.0 + line[4]) * c;
    for i in 2..n - 2 {
        out[i] = (line[i - 2] - line[i + 2] + (line[i + 1] - line[i - 1]) * 8.0) * c;
    }
    // Mirror image of the left closure; d/dx flips sign under x → −x.
    out[n - 2] = (line[n - 1] * 3.0 + line[n - 2] * 10.0 + line[n - 3] * -18.0
        + line[n - 4] * 6.0
        - line[n - 5])
        * c;
    out[n - 1] = (line[n - 1] * 25.0 + line[n - 2] * -48.0 + line[n - 3] * 36.0
        + line[n - 4] * -16.0
        + line[n - 5] * 3.0)
        * c;
}

fn fd_second(line: &[Complex64], out: &mut [Complex64], h: f64) {
    let n = line.len();
    let c = 1.0 / (12.0 * h * h);
    out[0] = (line[0] * 45.0 + line[1] * -154.0 + line[2] * 214.0 + line[3] * -156.0
        + line[4] * 61.0
        + line[5] * -10.0)
        * c;
    out[1] = (line[0] * 10.0 + line[1] * -15.0 + line[2] * -4.0 + line[3] * 14.0 + line[4] * -6.0
        + line[5])
        * c;
    for i in 2..n - 2 {
        out[i] = (-(line[i - 2] + line[i + 2]) + (line[i - 1] + line[i + 1]) * 16.0
            - line[i] * 30.0)
            * c;
    }
    out[n - 2] = (line[n - 1] * 10.0 + line[n - 2] * -15.0 + line[n - 3] * -4.0
        + line[n - 4] * 14.0
        + line[n - 5] * -6.0
        + line[n - 6])
        * c;
    out[n - 1] = (line[n - 1] * 45.0 + line[n - 2] * -154.0 + line[n - 3] * 214.0
        + line[n - 4] * -156.0
        + line[n - 5] * 61.0
        + line[n - 6] * -10.0)
        * c;
}

/// Apply a 1-D derivative along `axis` to a complex-valued lattice, visiting
/// every lattice line in place.
fn derive_lattice(
    values: &mut [Complex64],
    grid: &Grid,
    axis: usize,
    order: DerivativeOrder,
) {
    let n = grid.axis(axis).points;
    let stride = grid.strides()[axis];
    let lines = values.len() / n;
    let outer = values.len() / (n * stride);

    let mut line = vec![Complex64::new(0.0, 0.0); n];
    let mut out = vec![Complex64::new(0.0, 0.0); n];

    let periodic = grid.axis(axis).boundary == Boundary::Periodic;
    let mult;
    let ffts;
    if periodic {
        mult = spectral_multipliers(n, grid.axis(axis).length, order);
        ffts = Some(fft_pair(n));
    } else {
        mult = Vec::new();
        ffts = None;
    }
    let h = grid.spacing(axis);

    debug_assert_eq!(outer * stride, lines);
    for o in 0..outer {
        for i in 0..stride {
            let base = o * n * stride + i;
            for (j, slot) in line.iter_mut().enumerate() {
                *slot = values[base + j * stride];
            }
            if let Some((fwd, inv)) = &ffts {
                spectral_line(&mut line, &mult, fwd, inv);
                for (j, &v) in line.iter().enumerate() {
                    values[base + j * stride] = v;
                }
            } else {
                match order {
                    DerivativeOrder::First => fd_first(&line, &mut out, h),
                    DerivativeOrder::Second => fd_second(&line, &mut out, h),
                }
                for (j, &v) in out.iter().enumerate() {
                    values[base + j * stride] = v;
                }
            }
        }
    }
}

/// ∂f/∂x_axis (first) or ∂²f/∂x_axis² (second) of a real field.
pub fn derivative_axis(
    f: &ScalarField,
    axis: usize,
    order: DerivativeOrder,
) -> Result<ScalarField> {
    f.ensure_finite("derivative input")?;
    let grid = f.grid();
    let mut buf: Vec<Complex64> = f
        .values()
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    derive_lattice(&mut buf, grid, axis, order);
    ScalarField::from_values(grid, buf.into_iter().map(|z| z.re).collect())
}

/// Complex-field counterpart of [`derivative_axis`], used by the propagators
/// and energy functionals.
pub fn derivative_axis_complex(
    psi: &Wavefunction,
    axis: usize,
    order: DerivativeOrder,
) -> Result<Wavefunction> {
    psi.ensure_finite("derivative input")?;
    let grid = psi.grid();
    let mut buf = psi.values().to_vec();
    derive_lattice(&mut buf, grid, axis, order);
    Wavefunction::from_values(grid, buf)
}

/// ∇f, one component per axis.
pub fn gradient(f: &ScalarField) -> Result<VectorField> {
    let components = (0..f.grid().dims())
        .map(|a| derivative_axis(f, a, DerivativeOrder::First))
        .collect::<Result<Vec<_>>>()?;
    VectorField::from_components(components)
}

/// ∇·v, the sum of per-axis first derivatives.
pub fn divergence(v: &VectorField) -> Result<ScalarField> {
    let mut acc = derivative_axis(v.component(0), 0, DerivativeOrder::First)?;
    for a in 1..v.dims() {
        let d = derivative_axis(v.component(a), a, DerivativeOrder::First)?;
        acc.add_scaled(&d, 1.0);
    }
    Ok(acc)
}

/// ∇²f, the sum of per-axis second derivatives (not div∘grad: the second
/// derivative keeps the Nyquist mode that a repeated first derivative must
/// drop, so this form is the more accurate one).
pub fn laplacian(f: &ScalarField) -> Result<ScalarField> {
    let mut acc = derivative_axis(f, 0, DerivativeOrder::Second)?;
    for a in 1..f.grid().dims() {
        let d = derivative_axis(f, a, DerivativeOrder::Second)?;
        acc.add_scaled(&d, 1.0);
    }
    Ok(acc)
}

fn axis_weights(grid: &Grid) -> Vec<Vec<f64>> {
    grid.axes()
        .iter()
        .map(|ax| {
            let dx = ax.spacing();
            match ax.boundary {
                Boundary::Periodic => vec![dx; ax.points],
                Boundary::DirichletZero => {
                    let mut w = vec![dx; ax.points];
                    w[0] = 0.5 * dx;
                    w[ax.points - 1] = 0.5 * dx;
                    w
                }
            }
        })
        .collect()
}

/// ∫ f dΩ — rectangle rule on periodic axes (spectrally accurate there),
/// trapezoid on dirichlet axes.
pub fn integrate(f: &ScalarField) -> Result<f64> {
    f.ensure_finite("integrate input")?;
    let grid = f.grid();
    let weights = axis_weights(grid);
    let mut idx = [0usize; 3];
    let mut acc = 0.0;
    for (flat, &v) in f.values().iter().enumerate() {
        grid.unflatten(flat, &mut idx);
        let mut w = 1.0;
        for (a, wa) in weights.iter().enumerate() {
            w *= wa[idx[a]];
        }
        acc += v * w;
    }
    Ok(acc)
}

/// ∫ f·g dΩ.
pub fn inner_product(f: &ScalarField, g: &ScalarField) -> Result<f64> {
    f.same_grid(g, "inner_product")?;
    integrate(&(f * g))
}

/// √∫ f² dΩ.
pub fn l2_norm(f: &ScalarField) -> Result<f64> {
    Ok(inner_product(f, f)?.sqrt())
}

/// ‖a − b‖₂ / ‖b‖₂ with the grid measure.
pub fn relative_l2_error(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    a.same_grid(b, "relative_l2_error")?;
    let diff = a - b;
    Ok(l2_norm(&diff)? / l2_norm(b)?)
}

/// Multilinear interpolation of `f` at a physical point. Periodic axes wrap;
/// returns `None` if the point lies outside a dirichlet axis.
pub fn sample_multilinear(f: &ScalarField, point: &[f64]) -> Option<f64> {
    let grid = f.grid();
    let dims = grid.dims();
    debug_assert!(point.len() >= dims);

    let mut base = [0usize; 3];
    let mut next = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..dims {
        let ax = grid.axis(a);
        let n = ax.points;
        let u = (point[a] - ax.origin) / ax.spacing();
        match ax.boundary {
            Boundary::Periodic => {
                let un = u.rem_euclid(n as f64);
                let i0 = (un.floor() as usize).min(n - 1);
                base[a] = i0;
                next[a] = (i0 + 1) % n;
                frac[a] = un - i0 as f64;
            }
            Boundary::DirichletZero => {
                if u < 0.0 || u > (n - 1) as f64 {
                    return None;
                }
                let i0 = (u.floor() as usize).min(n - 2);
                base[a] = i0;
                next[a] = i0 + 1;
                frac[a] = u - i0 as f64;
            }
        }
    }

    let values = f.values();
    let strides = grid.strides();
    let mut acc = 0.0;
    for corner in 0..(1usize << dims) {
        let mut flat = 0;
        let mut w = 1.0;
        for a in 0..dims {
            if corner & (1 << a) != 0 {
                flat += next[a] * strides[a];
                w *= frac[a];
            } else {
                flat += base[a] * strides[a];
                w *= 1.0 - frac[a];
            }
        }
        acc += w * values[flat];
    }
    Some(acc)
}
