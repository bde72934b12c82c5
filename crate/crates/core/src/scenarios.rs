//! Synthetic densities and ready-made test problems.

use crate::cost_graph::CostGraph;
use crate::error::Result;
use crate::grid::{density_from_image, DensityField, Grid2D};

/// Smooth compactly supported bump `(1 - |x - c|^2 / r^2)_+^2` centred on cell
/// `(ci, cj)`, normalized to unit mass.
pub fn bump_at_cell(grid: Grid2D, ci: usize, cj: usize, r: f64) -> Result<DensityField> {
    let (cx, cy) = (grid.x(ci), grid.y(cj));
    bump(grid, cx, cy, r)
}

/// Smooth bump centred at `(cx, cy)` with radius `r`, unit mass.
pub fn bump(grid: Grid2D, cx: f64, cy: f64, r: f64) -> Result<DensityField> {
    sampled(grid, |x, y| {
        let d2 = ((x - cx).powi(2) + (y - cy).powi(2)) / (r * r);
        (1.0 - d2).max(0.0).powi(2)
    })
}

/// Anisotropic Gaussian with axes rotated by `angle`, unit mass.
pub fn gaussian(grid: Grid2D, cx: f64, cy: f64, sx: f64, sy: f64, angle: f64) -> Result<DensityField> {
    let (s, c) = angle.sin_cos();
    sampled(grid, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (-0.5 * (u * u / (sx * sx) + v * v / (sy * sy))).exp()
    })
}

/// Samples `f` at cell centers and normalizes to unit mass.
pub fn sampled(grid: Grid2D, f: impl Fn(f64, f64) -> f64) -> Result<DensityField> {
    DensityField::normalized(grid, (0..grid.len()).map(|k| {
        let (x, y) = grid.center(k);
        f(x, y)
    }).collect())
}

/// Indicator-style shapes used for barycenter demos.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Cross,
    Heart,
    Ring,
    Square,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Cross, Shape::Heart, Shape::Ring, Shape::Square];

    /// Whether the point `(x, y)` of the unit square lies in the shape.
    pub fn contains(self, x: f64, y: f64) -> bool {
        let (u, v) = (x - 0.5, y - 0.5);
        match self {
            Shape::Cross => {
                let (a, b) = (u.abs(), v.abs());
                (a <= 0.25 && b <= 0.08) || (a <= 0.08 && b <= 0.25)
            }
            Shape::Heart => {
                // implicit heart curve, y axis pointing up
                let (s, t) = (u / 0.28, -v / 0.28 + 0.15);
                (s * s + t * t - 1.0).powi(3) - s * s * t.powi(3) <= 0.0
            }
            Shape::Ring => {
                let r = (u * u + v * v).sqrt();
                (0.15..=0.27).contains(&r)
            }
            Shape::Square => u.abs() <= 0.2 && v.abs() <= 0.2,
        }
    }

    /// Rasterized shape as a density; `floor` is added to empty pixels.
    pub fn density(self, grid: Grid2D, floor: f64) -> Result<DensityField> {
        let pixels: Vec<f64> = (0..grid.len())
            .map(|k| {
                let (x, y) = grid.center(k);
                if self.contains(x, y) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        density_from_image(grid.nx(), grid.ny(), &pixels, floor)
    }
}

/// Four translated copies of one bump on an `n x n` grid, coupled by the
/// chain cost `1/2 sum |x_i - x_{i+1}|^2`.
#[derive(Debug, Clone)]
pub struct TranslationTest {
    pub graph: CostGraph,
    pub marginals: Vec<DensityField>,
    /// Exact optimal value of the discrete problem.
    pub exact: f64,
}

/// Cell offsets between consecutive copies at 256 x 256; the squared lengths
/// sum to 15729 cells^2, i.e. 0.24 up to 3e-6.
const STEPS_256: [(usize, usize); 3] = [(49, 49), (51, 51), (53, 54)];

/// Translation test on an `n x n` grid. Offsets and radius scale with `n`
/// relative to the 256 layout; for `n = 256` the optimum is
/// `15729 / (2 * 256^2) = 0.1200027...`.
pub fn translation_test(n: usize) -> Result<TranslationTest> {
    let grid = Grid2D::square(n)?;
    let scale = n as f64 / 256.0;
    let mut pos = ((51.0 * scale).round() as usize, (51.0 * scale).round() as usize);
    let r = 0.1;
    let mut marginals = vec![bump_at_cell(grid, pos.0, pos.1, r)?];
    let mut cells2 = 0usize;
    for (a, b) in STEPS_256 {
        let (a, b) = ((a as f64 * scale).round() as usize, (b as f64 * scale).round() as usize);
        cells2 += a * a + b * b;
        pos = (pos.0 + a, pos.1 + b);
        marginals.push(bump_at_cell(grid, pos.0, pos.1, r)?);
    }
    let h2 = 1.0 / (n * n) as f64;
    Ok(TranslationTest {
        graph: CostGraph::chain(4, 1.0)?,
        marginals,
        exact: 0.5 * cells2 as f64 * h2,
    })
}
