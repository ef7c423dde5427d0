use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use num_complex::Complex64;

use crate::calculus;
use crate::error::{Error, Result};
use crate::grid::Grid;

/// A real sample per grid point, row-major with the last axis fastest.
///
/// Fields are cheap to clone relative to the solver work done on them and
/// share their grid through an `Arc`. All arithmetic demands operands on an
/// equal grid; there is no resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &Arc<Grid>) -> ScalarField {
        ScalarField {
            grid: Arc::clone(grid),
            values: vec![0.0; grid.len()],
        }
    }

    pub fn constant(grid: &Arc<Grid>, value: f64) -> ScalarField {
        ScalarField {
            grid: Arc::clone(grid),
            values: vec![value; grid.len()],
        }
    }

    /// Evaluate `f` at every lattice point. The slice passed to `f` holds the
    /// physical coordinates, one entry per axis.
    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn(&[f64]) -> f64) -> ScalarField {
        let dims = grid.dims();
        let values = (0..grid.len())
            .map(|i| {
                let p = grid.point(i);
                f(&p[..dims])
            })
            .collect();
        ScalarField {
            grid: Arc::clone(grid),
            values,
        }
    }

    pub fn from_values(grid: &Arc<Grid>, values: Vec<f64>) -> Result<ScalarField> {
        if values.len() != grid.len() {
            return Err(Error::Length {
                expected: grid.len(),
                got: values.len(),
            });
        }
        Ok(ScalarField {
            grid: Arc::clone(grid),
            values,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Error out if the two fields live on different grids.
    pub fn same_grid(&self, other: &ScalarField, context: &str) -> Result<()> {
        if self.grid == other.grid {
            Ok(())
        } else {
            Err(Error::GridMismatch {
                context: context.to_string(),
            })
        }
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(index) => Err(Error::NonFinite {
                index,
                context: context.to_string(),
            }),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField {
            grid: Arc::clone(&self.grid),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pointwise combination of two fields on the same grid.
    ///
    /// Panics on a grid mismatch: formula-level code validates its inputs
    /// once at the public entry point and then treats mismatch as a bug.
    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> ScalarField {
        assert!(
            self.grid == other.grid,
            "zip_map requires operands on the same grid"
        );
        ScalarField {
            grid: Arc::clone(&self.grid),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += c * other`, the small BLAS-style kernel the integrators run on.
    pub fn add_scaled(&mut self, other: &ScalarField, c: f64) {
        assert!(
            self.grid == other.grid,
            "add_scaled requires operands on the same grid"
        );
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.values {
            *v *= c;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |m, &v| m.min(v))
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    /// Plain lattice root-mean-square (no volume measure).
    pub fn rms(&self) -> f64 {
        let sum: f64 = self.values.iter().map(|&v| v * v).sum();
        (sum / self.values.len() as f64).sqrt()
    }

    /// Max-norm of the pointwise difference.
    pub fn linf_diff(&self, other: &ScalarField) -> f64 {
        assert!(
            self.grid == other.grid,
            "linf_diff requires operands on the same grid"
        );
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (&a, &b)| m.max((a - b).abs()))
    }
}

macro_rules! field_binop {
    ($trait:ident, $method:ident, $op:tt) => {
        impl $trait for &ScalarField {
            type Output = ScalarField;
            fn $method(self, rhs: &ScalarField) -> ScalarField {
                self.zip_map(rhs, |a, b| a $op b)
            }
        }
    };
}

field_binop!(Add, add, +);
field_binop!(Sub, sub, -);
field_binop!(Mul, mul, *);

impl Mul<f64> for &ScalarField {
    type Output = ScalarField;
    fn mul(self, rhs: f64) -> ScalarField {
        self.map(|v| v * rhs)
    }
}

impl Neg for &ScalarField {
    type Output = ScalarField;
    fn neg(self) -> ScalarField {
        self.map(|v| -v)
    }
}

/// One real component per axis, each a [`ScalarField`] on the shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    components: Vec<ScalarField>,
}

impl VectorField {
    pub fn zeros(grid: &Arc<Grid>) -> VectorField {
        VectorField {
            components: (0..grid.dims()).map(|_| ScalarField::zeros(grid)).collect(),
        }
    }

    pub fn from_components(components: Vec<ScalarField>) -> Result<VectorField> {
        let dims = components
            .first()
            .map(|c| c.grid().dims())
            .ok_or_else(|| Error::Grid("vector field needs at least one component".into()))?;
        if components.len() != dims {
            return Err(Error::Grid(format!(
                "vector field has {} components on a {dims}-axis grid",
                components.len()
            )));
        }
        for c in &components[1..] {
            components[0].same_grid(c, "vector field components")?;
        }
        Ok(VectorField { components })
    }

    /// Constant vector, e.g. a uniform gauge potential.
    pub fn uniform(grid: &Arc<Grid>, value: &[f64]) -> VectorField {
        assert_eq!(value.len(), grid.dims(), "one component per axis");
        VectorField {
            components: value
                .iter()
                .map(|&v| ScalarField::constant(grid, v))
                .collect(),
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.components[0].grid()
    }

    pub fn dims(&self) -> usize {
        self.components.len()
    }

    pub fn component(&self, a: usize) -> &ScalarField {
        &self.components[a]
    }

    pub fn component_mut(&mut self, a: usize) -> &mut ScalarField {
        &mut self.components[a]
    }

    pub fn components(&self) -> &[ScalarField] {
        &self.components
    }

    pub fn into_components(self) -> Vec<ScalarField> {
        self.components
    }

    pub fn dot(&self, other: &VectorField) -> ScalarField {
        assert_eq!(self.dims(), other.dims(), "dimension mismatch in dot");
        let mut acc = &self.components[0] * &other.components[0];
        for a in 1..self.dims() {
            acc.add_scaled(&(&self.components[a] * &other.components[a]), 1.0);
        }
        acc
    }

    pub fn magnitude_squared(&self) -> ScalarField {
        self.dot(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.components.iter().map(ScalarField::max_abs).fold(0.0, f64::max)
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        for c in &self.components {
            c.ensure_finite(context)?;
        }
        Ok(())
    }

    /// Multilinear sample of every component at a physical point.
    /// `None` when the point lies outside a dirichlet axis.
    pub fn sample(&self, point: &[f64]) -> Option<Vec<f64>> {
        self.components
            .iter()
            .map(|c| calculus::sample_multilinear(c, point))
            .collect()
    }
}

/// A complex sample per grid point: ψ = √ρ · exp(iS/ħ).
#[derive(Debug, Clone, PartialEq)]
pub struct Wavefunction {
    grid: Arc<Grid>,
    values: Vec<Complex64>,
}

impl Wavefunction {
    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn(&[f64]) -> Complex64) -> Wavefunction {
        let dims = grid.dims();
        let values = (0..grid.len())
            .map(|i| {
                let p = grid.point(i);
                f(&p[..dims])
            })
            .collect();
        Wavefunction {
            grid: Arc::clone(grid),
            values,
        }
    }

    pub fn from_values(grid: &Arc<Grid>, values: Vec<Complex64>) -> Result<Wavefunction> {
        if values.len() != grid.len() {
            return Err(Error::Length {
                expected: grid.len(),
                got: values.len(),
            });
        }
        Ok(Wavefunction {
            grid: Arc::clone(grid),
            values,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn density(&self) -> ScalarField {
        ScalarField {
            grid: Arc::clone(&self.grid),
            values: self.values.iter().map(|z| z.norm_sqr()).collect(),
        }
    }

    /// ∫ |ψ|² dΩ.
    pub fn norm_squared(&self) -> f64 {
        calculus::integrate(&self.density()).expect("|psi|^2 is finite")
    }

    /// Rescale to unit norm.
    pub fn normalize(&mut self) {
        let n2 = self.norm_squared();
        assert!(n2 > 0.0, "cannot normalize the zero wavefunction");
        let inv = 1.0 / n2.sqrt();
        for z in &mut self.values {
            *z *= inv;
        }
    }

    pub fn normalized(mut self) -> Wavefunction {
        self.normalize();
        self
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        match self
            .values
            .iter()
            .position(|z| !z.re.is_finite() || !z.im.is_finite())
        {
            None => Ok(()),
            Some(index) => Err(Error::NonFinite {
                index,
                context: context.to_string(),
            }),
        }
    }

    /// Max-norm distance to another wavefunction, for bit-level comparisons.
    pub fn linf_diff(&self, other: &Wavefunction) -> f64 {
        assert!(
            self.grid == other.grid,
            "linf_diff requires operands on the same grid"
        );
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).norm()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    #[test]
    fn from_fn_sees_physical_coordinates() {
        let g = Grid::periodic_1d(4.0, 8);
        let f = ScalarField::from_fn(&g, |p| p[0]);
        assert_eq!(f.values()[0], -2.0);
        assert_eq!(f.values()[4], 0.0);
    }

    #[test]
    fn from_values_checks_length() {
        let g = Grid::periodic_1d(4.0, 8);
        assert!(ScalarField::from_values(&g, vec![0.0; 7]).is_err());
        assert!(ScalarField::from_values(&g, vec![0.0; 8]).is_ok());
    }

    #[test]
    fn mixed_grid_arithmetic_is_rejected() {
        let a = ScalarField::zeros(&Grid::periodic_1d(4.0, 8));
        let b = ScalarField::zeros(&Grid::periodic_1d(4.0, 16));
        assert!(a.same_grid(&b, "test").is_err());
        let panicked = std::panic::catch_unwind(|| &a + &b);
        assert!(panicked.is_err());
    }

    #[test]
    fn finite_check_reports_position() {
        let g = Grid::periodic_1d(4.0, 8);
        let mut f = ScalarField::zeros(&g);
        f.values_mut()[3] = f64::NAN;
        match f.ensure_finite("test") {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 3),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn vector_field_component_count_is_checked() {
        let g = Grid::periodic_2d([1.0, 1.0], [8, 8]);
        let one = vec![ScalarField::zeros(&g)];
        assert!(VectorField::from_components(one).is_err());
        let two = vec![ScalarField::zeros(&g), ScalarField::zeros(&g)];
        assert!(VectorField::from_components(two).is_ok());
    }

    #[test]
    fn normalization_gives_unit_mass() {
        let g = Grid::periodic_1d(20.0, 128);
        let psi = Wavefunction::from_fn(&g, |p| {
            Complex64::new((-p[0] * p[0] / 2.0).exp(), 0.0)
        })
        .normalized();
        assert!((psi.norm_squared() - 1.0).abs() < 1e-12);
    }
}
