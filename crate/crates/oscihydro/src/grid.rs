use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boundary behaviour of one axis.
///
/// Periodic axes wrap, sample the half-open interval `[origin, origin + L)`
/// and use spectral differentiation. Dirichlet axes sample the closed
/// interval `[origin, origin + L]`, use finite differences, and carry fields
/// that vanish on (or never reach) the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    Periodic,
    DirichletZero,
}

/// One spatial axis: a physical length, a sample count and a boundary tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub length: f64,
    pub points: usize,
    pub boundary: Boundary,
    /// Coordinate of sample 0. Defaults to `-length/2` (domain centred on 0).
    pub origin: f64,
}

impl Axis {
    pub fn periodic(length: f64, points: usize) -> Axis {
        Axis {
            length,
            points,
            boundary: Boundary::Periodic,
            origin: -length / 2.0,
        }
    }

    pub fn dirichlet(length: f64, points: usize) -> Axis {
        Axis {
            length,
            points,
            boundary: Boundary::DirichletZero,
            origin: -length / 2.0,
        }
    }

    pub fn with_origin(mut self, origin: f64) -> Axis {
        self.origin = origin;
        self
    }

    /// Sample spacing: L/N on periodic axes (point N would alias point 0),
    /// L/(N−1) on dirichlet axes (both endpoints are samples).
    pub fn spacing(&self) -> f64 {
        match self.boundary {
            Boundary::Periodic => self.length / self.points as f64,
            Boundary::DirichletZero => self.length / (self.points - 1) as f64,
        }
    }

    pub fn coord(&self, index: usize) -> f64 {
        self.origin + index as f64 * self.spacing()
    }

    fn validate(&self, axis: usize) -> Result<()> {
        if self.points < 8 {
            return Err(Error::Grid(format!(
                "axis {axis} has {} points; at least 8 are required",
                self.points
            )));
        }
        if !(self.length > 0.0) || !self.length.is_finite() {
            return Err(Error::Grid(format!(
                "axis {axis} has non-positive length {}",
                self.length
            )));
        }
        if !self.origin.is_finite() {
            return Err(Error::Grid(format!("axis {axis} has non-finite origin")));
        }
        Ok(())
    }
}

/// A rectangular lattice over 1–3 axes, stored row-major with the **last**
/// axis fastest. Grids compare by content; every field operation demands
/// operands on equal grids rather than resampling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Grid {
    axes: Vec<Axis>,
    #[serde(skip)]
    strides: Vec<usize>,
    #[serde(skip)]
    len: usize,
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.axes == other.axes
    }
}

fn compute_strides(axes: &[Axis]) -> (Vec<usize>, usize) {
    let mut strides = vec![0usize; axes.len()];
    let mut acc = 1usize;
    for (a, axis) in axes.iter().enumerate().rev() {
        strides[a] = acc;
        acc *= axis.points;
    }
    (strides, acc)
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Grid> {
        if axes.is_empty() || axes.len() > 3 {
            return Err(Error::Grid(format!(
                "{} axes requested; 1 to 3 are supported",
                axes.len()
            )));
        }
        for (a, axis) in axes.iter().enumerate() {
            axis.validate(a)?;
        }
        let (strides, len) = compute_strides(&axes);
        Ok(Grid { axes, strides, len })
    }

    /// Centred periodic 1-D grid. Panics on invalid arguments; use
    /// [`Grid::new`] when the input is untrusted.
    pub fn periodic_1d(length: f64, points: usize) -> Arc<Grid> {
        Arc::new(Grid::new(vec![Axis::periodic(length, points)]).expect("valid 1d grid"))
    }

    pub fn periodic_2d(lengths: [f64; 2], points: [usize; 2]) -> Arc<Grid> {
        Arc::new(
            Grid::new(vec![
                Axis::periodic(lengths[0], points[0]),
                Axis::periodic(lengths[1], points[1]),
            ])
            .expect("valid 2d grid"),
        )
    }

    pub fn dirichlet_1d(length: f64, points: usize) -> Arc<Grid> {
        Arc::new(Grid::new(vec![Axis::dirichlet(length, points)]).expect("valid 1d grid"))
    }

    pub fn dirichlet_2d(lengths: [f64; 2], points: [usize; 2]) -> Arc<Grid> {
        Arc::new(
            Grid::new(vec![
                Axis::dirichlet(lengths[0], points[0]),
                Axis::dirichlet(lengths[1], points[1]),
            ])
            .expect("valid 2d grid"),
        )
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    /// Total number of lattice points.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false // a valid grid always has ≥ 8 points per axis
    }

    pub fn axis(&self, a: usize) -> &Axis {
        &self.axes[a]
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn spacing(&self, a: usize) -> f64 {
        self.axes[a].spacing()
    }

    pub fn min_spacing(&self) -> f64 {
        self.axes
            .iter()
            .map(Axis::spacing)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn is_all_periodic(&self) -> bool {
        self.axes.iter().all(|ax| ax.boundary == Boundary::Periodic)
    }

    pub fn is_all_dirichlet(&self) -> bool {
        self.axes
            .iter()
            .all(|ax| ax.boundary == Boundary::DirichletZero)
    }

    /// Volume element of one cell, Π Δx_i.
    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(Axis::spacing).product()
    }

    pub fn flatten(&self, multi: &[usize]) -> usize {
        debug_assert_eq!(multi.len(), self.dims());
        multi
            .iter()
            .zip(&self.strides)
            .map(|(&i, &s)| i * s)
            .sum()
    }

    pub fn unflatten(&self, flat: usize, out: &mut [usize; 3]) {
        let mut rest = flat;
        for (a, &s) in self.strides.iter().enumerate() {
            out[a] = rest / s;
            rest %= s;
        }
        for slot in out.iter_mut().skip(self.dims()) {
            *slot = 0;
        }
    }

    /// Physical coordinates of the lattice point with flat index `flat`.
    /// Unused components are zero.
    pub fn point(&self, flat: usize) -> [f64; 3] {
        let mut idx = [0usize; 3];
        self.unflatten(flat, &mut idx);
        let mut out = [0.0f64; 3];
        for a in 0..self.dims() {
            out[a] = self.axes[a].coord(idx[a]);
        }
        out
    }

    /// True if the flat index touches the boundary of any dirichlet axis.
    pub fn on_dirichlet_boundary(&self, flat: usize) -> bool {
        let mut idx = [0usize; 3];
        self.unflatten(flat, &mut idx);
        self.axes.iter().enumerate().any(|(a, ax)| {
            ax.boundary == Boundary::DirichletZero
                && (idx[a] == 0 || idx[a] == ax.points - 1)
        })
    }
}
