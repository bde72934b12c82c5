//! Neumann Poisson solve on the cell-centred grid.
//!
//! The 5-point Laplacian with reflecting boundaries is diagonalised by the
//! DCT-II basis `cos(pi p (i + 1/2) / nx) cos(pi q (j + 1/2) / ny)`, with
//! eigenvalues `-lambda_pq`. Solving divides by `lambda_pq` and drops the
//! constant mode, so the result has zero mean.

use std::sync::Arc;

use rustdct::{DctPlanner, TransformType2And3};

use crate::error::Result;
use crate::grid::{Grid2D, PotentialField};

/// `lambda_pq` for the negated 5-point Neumann Laplacian on `grid`.
pub fn eigenvalue(grid: Grid2D, p: usize, q: usize) -> f64 {
    let (nx, ny) = (grid.nx() as f64, grid.ny() as f64);
    let ax = (2.0 - 2.0 * (std::f64::consts::PI * p as f64 / nx).cos()) * nx * nx;
    let ay = (2.0 - 2.0 * (std::f64::consts::PI * q as f64 / ny).cos()) * ny * ny;
    ax + ay
}

/// Reusable DCT plans and eigenvalues for one grid.
pub struct PoissonSolver {
    grid: Grid2D,
    dct_x: Arc<dyn TransformType2And3<f64>>,
    dct_y: Arc<dyn TransformType2And3<f64>>,
    inv_lambda: Vec<f64>,
}

impl PoissonSolver {
    pub fn new(grid: Grid2D) -> Self {
        let mut planner = DctPlanner::new();
        let dct_x = planner.plan_dct2(grid.nx());
        let dct_y = planner.plan_dct2(grid.ny());
        let mut inv_lambda = vec![0.0; grid.len()];
        for q in 0..grid.ny() {
            for p in 0..grid.nx() {
                if p + q > 0 {
                    inv_lambda[grid.index(p, q)] = 1.0 / eigenvalue(grid, p, q);
                }
            }
        }
        PoissonSolver { grid, dct_x, dct_y, inv_lambda }
    }

    pub fn grid(&self) -> Grid2D {
        self.grid
    }

    /// DCT-II (forward) or DCT-III along rows, then along columns.
    fn apply(&self, data: &mut [f64], forward: bool) {
        let (nx, ny) = (self.grid.nx(), self.grid.ny());
        let mut scratch = vec![0.0; self.dct_x.get_scratch_len().max(self.dct_y.get_scratch_len())];
        for row in data.chunks_mut(nx) {
            if forward {
                self.dct_x.process_dct2_with_scratch(row, &mut scratch);
            } else {
                self.dct_x.process_dct3_with_scratch(row, &mut scratch);
            }
        }
        let mut col = vec![0.0; ny];
        for i in 0..nx {
            for j in 0..ny {
                col[j] = data[j * nx + i];
            }
            if forward {
                self.dct_y.process_dct2_with_scratch(&mut col, &mut scratch);
            } else {
                self.dct_y.process_dct3_with_scratch(&mut col, &mut scratch);
            }
            for j in 0..ny {
                data[j * nx + i] = col[j];
            }
        }
    }

    /// Solves `-Laplacian(u) = rhs` with homogeneous Neumann conditions.
    /// The mean of `rhs` is discarded; the returned `u` has zero mean.
    pub fn solve(&self, rhs: &[f64]) -> Result<PotentialField> {
        self.grid.ensure_len(rhs.len())?;
        let mut data = rhs.to_vec();
        self.apply(&mut data, true);
        for (v, il) in data.iter_mut().zip(&self.inv_lambda) {
            *v *= il;
        }
        // DCT-III inverts DCT-II up to a factor n/2 per axis
        let scale = 4.0 / (self.grid.nx() * self.grid.ny()) as f64;
        self.apply(&mut data, false);
        data.iter_mut().for_each(|v| *v *= scale);
        Ok(PotentialField::from_raw(self.grid, data))
    }
}

/// One-off Neumann Poisson solve; see [`PoissonSolver::solve`].
pub fn inverse_neumann_laplacian(rhs: &PotentialField) -> Result<PotentialField> {
    PoissonSolver::new(rhs.grid()).solve(rhs.values())
}
