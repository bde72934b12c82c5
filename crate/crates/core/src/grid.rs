//! Uniform cell-centered grids on the unit square and the fields that live on them.
//!
//! Cell `(i, j)` has center `((i + 1/2)/nx, (j + 1/2)/ny)` and is stored at
//! linear index `j * nx + i` (row-major, rows run along `x`).

use crate::error::{Error, Result};

/// Relative slack accepted when validating that a density has unit mass.
const MASS_TOLERANCE: f64 = 1e-9;

/// Default density floor, as a fraction of the maximum pixel intensity.
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid2D {
    nx: usize,
    ny: usize,
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::GridTooSmall { nx, ny });
        }
        Ok(Self { nx, ny })
    }

    /// Square `n x n` grid.
    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n)
    }

    #[inline]
    pub fn nx(&self) -> usize {
        self.nx
    }

    #[inline]
    pub fn ny(&self) -> usize {
        self.ny
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn cell_area(&self) -> f64 {
        1.0 / (self.nx * self.ny) as f64
    }

    #[inline]
    pub fn hx(&self) -> f64 {
        1.0 / self.nx as f64
    }

    #[inline]
    pub fn hy(&self) -> f64 {
        1.0 / self.ny as f64
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        (i as f64 + 0.5) / self.nx as f64
    }

    #[inline]
    pub fn y(&self, j: usize) -> f64 {
        (j as f64 + 0.5) / self.ny as f64
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// Inverse of [`Grid2D::index`].
    #[inline]
    pub fn coords(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    /// Cell center of linear index `k`.
    #[inline]
    pub fn center(&self, k: usize) -> (f64, f64) {
        let (i, j) = self.coords(k);
        (self.x(i), self.y(j))
    }

    pub(crate) fn ensure_same(&self, other: &Grid2D) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch {
                a: (self.nx, self.ny),
                b: (other.nx, other.ny),
            });
        }
        Ok(())
    }

    pub(crate) fn ensure_len(&self, got: usize) -> Result<()> {
        if got != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                got,
            });
        }
        Ok(())
    }
}

/// A probability density with respect to Lebesgue measure on the unit square,
/// piecewise constant over grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    grid: Grid2D,
    values: Vec<f64>,
}

impl DensityField {
    /// Wraps values that already form a probability density.
    pub fn new(grid: Grid2D, values: Vec<f64>) -> Result<Self> {
        grid.ensure_len(values.len())?;
        if let Some(k) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidDensity(format!(
                "value {} at cell {k} is negative or not finite",
                values[k]
            )));
        }
        let mass = grid.cell_area() * values.iter().sum::<f64>();
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidDensity(format!("total mass is {mass}, expected 1")));
        }
        Ok(Self { grid, values })
    }

    /// Rescales nonnegative weights to unit mass.
    pub fn normalized(grid: Grid2D, mut values: Vec<f64>) -> Result<Self> {
        grid.ensure_len(values.len())?;
        if let Some(k) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidDensity(format!(
                "value {} at cell {k} is negative or not finite",
                values[k]
            )));
        }
        let total: f64 = values.iter().sum();
        if total <= 0.0 {
            return Err(Error::AllZeroInput);
        }
        let scale = 1.0 / (total * grid.cell_area());
        values.iter_mut().for_each(|v| *v *= scale);
        Ok(Self { grid, values })
    }

    /// The uniform density (value 1 everywhere).
    pub fn uniform(grid: Grid2D) -> Self {
        Self {
            grid,
            values: vec![1.0; grid.len()],
        }
    }

    /// Builds a density from raw values without validation. Callers must
    /// guarantee nonnegativity and unit mass.
    pub(crate) fn from_raw(grid: Grid2D, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> Grid2D {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mass(&self) -> f64 {
        self.grid.cell_area() * self.values.iter().sum::<f64>()
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Mean position `(E[x], E[y])`.
    pub fn centroid(&self) -> (f64, f64) {
        let a = self.grid.cell_area();
        let mut cx = 0.0;
        let mut cy = 0.0;
        for (k, &v) in self.values.iter().enumerate() {
            let (x, y) = self.grid.center(k);
            cx += a * v * x;
            cy += a * v * y;
        }
        (cx, cy)
    }
}

/// A real-valued function sampled at cell centers (dual potential or net potential).
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialField {
    grid: Grid2D,
    values: Vec<f64>,
}

impl PotentialField {
    pub fn new(grid: Grid2D, values: Vec<f64>) -> Result<Self> {
        grid.ensure_len(values.len())?;
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinitePotential(k));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid2D) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid2D, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    /// Samples `f(x, y)` at every cell center.
    pub fn from_fn(grid: Grid2D, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|k| {
                let (x, y) = grid.center(k);
                f(x, y)
            })
            .collect();
        Self { grid, values }
    }

    pub(crate) fn from_raw(grid: Grid2D, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> Grid2D {
        self.grid
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

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// `self + other`, cell by cell.
    pub fn add(&self, other: &PotentialField) -> Result<PotentialField> {
        self.grid.ensure_same(&other.grid)?;
        Ok(self.zip_with(other, |a, b| a + b))
    }

    /// `self - other`, cell by cell.
    pub fn sub(&self, other: &PotentialField) -> Result<PotentialField> {
        self.grid.ensure_same(&other.grid)?;
        Ok(self.zip_with(other, |a, b| a - b))
    }

    /// `self + alpha * other`, in place.
    pub fn axpy(&mut self, alpha: f64, other: &PotentialField) -> Result<()> {
        self.grid.ensure_same(&other.grid)?;
        self.values
            .iter_mut()
            .zip(&other.values)
            .for_each(|(a, b)| *a += alpha * b);
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> PotentialField {
        PotentialField {
            grid: self.grid,
            values: self.values.iter().map(|v| alpha * v).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &PotentialField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn zip_with(&self, other: &PotentialField, op: impl Fn(f64, f64) -> f64) -> PotentialField {
        PotentialField {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| op(a, b))
                .collect(),
        }
    }
}

/// Builds a density from a nonnegative intensity image of `width x height`
/// pixels (row-major, first row at `y` near 0). A floor of
/// `floor * max(pixels)` is added to every pixel before normalization.
pub fn density_from_image(
    width: usize,
    height: usize,
    pixels: &[f64],
    floor: f64,
) -> Result<DensityField> {
    let grid = Grid2D::new(width, height)?;
    grid.ensure_len(pixels.len())?;
    if !(floor.is_finite() && floor >= 0.0) {
        return Err(Error::InvalidDensity(format!("floor must be nonnegative, got {floor}")));
    }
    if let Some(k) = pixels.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidDensity(format!(
            "pixel {k} has intensity {} (must be nonnegative)",
            pixels[k]
        )));
    }
    let max = pixels.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        // every pixel is zero; a floor relative to the max would also be zero
        if floor > 0.0 {
            return Ok(DensityField::uniform(grid));
        }
        return Err(Error::AllZeroInput);
    }
    let offset = floor * max;
    DensityField::normalized(grid, pixels.iter().map(|p| p + offset).collect())
}

/// Discrete integral `a * sum_k f_k mu_k`.
pub fn integrate_against(f: &PotentialField, mu: &DensityField) -> Result<f64> {
    f.grid.ensure_same(&mu.grid)?;
    let s: f64 = f.values.iter().zip(&mu.values).map(|(a, b)| a * b).sum();
    Ok(f.grid.cell_area() * s)
}

/// L1 distance `a * sum_k |mu_k - nu_k|`, in `[0, 2]` for probability densities.
pub fn l1_distance(mu: &DensityField, nu: &DensityField) -> Result<f64> {
    mu.grid.ensure_same(&nu.grid)?;
    let s: f64 = mu
        .values
        .iter()
        .zip(&nu.values)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(mu.grid.cell_area() * s)
}
