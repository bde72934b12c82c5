//! Wasserstein barycenters through the complete-graph multimarginal problem
//! with pairwise weights `lambda_i lambda_j`.

use rayon::prelude::*;

use crate::cost_graph::CostGraph;
use crate::error::{Error, Result};
use crate::grid::{DensityField, PotentialField};
use crate::solver::{solve, MmotProblem, Solution, SolverConfig};
use crate::transforms::pushforward;

/// Marginals and positive weights summing to one.
#[derive(Debug, Clone)]
pub struct BarycenterProblem {
    marginals: Vec<DensityField>,
    weights: Vec<f64>,
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.len() < 2 {
        return Err(Error::BadWeights(format!("need at least two weights, got {}", weights.len())));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::BadWeights(format!("weights must be positive, got {w}")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::BadWeights(format!("weights sum to {sum}, expected 1")));
    }
    Ok(())
}

impl BarycenterProblem {
    pub fn new(marginals: Vec<DensityField>, weights: Vec<f64>) -> Result<Self> {
        check_weights(&weights)?;
        if marginals.len() != weights.len() {
            return Err(Error::BadWeights(format!(
                "{} weights for {} marginals",
                weights.len(),
                marginals.len()
            )));
        }
        let grid = marginals[0].grid();
        for m in &marginals[1..] {
            grid.ensure_same(&m.grid())?;
        }
        Ok(BarycenterProblem { marginals, weights })
    }

    pub fn marginals(&self) -> &[DensityField] {
        &self.marginals
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Complete graph on `m` nodes with edge weights `lambda_i lambda_j`.
pub fn gs_cost_graph(weights: &[f64]) -> Result<CostGraph> {
    check_weights(weights)?;
    let m = weights.len();
    let edges = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j, weights[i] * weights[j])));
    CostGraph::new(m, edges)
}

/// Barycenter as the image of `mu_i` under `x - grad f_i(x) / lambda_i`, where
/// `f_i` is the potential recovered for original node `i`.
pub fn extract_barycenter(f_i: &PotentialField, mu_i: &DensityField, lambda_i: f64) -> Result<DensityField> {
    pushforward(f_i, mu_i, lambda_i)
}

#[derive(Debug, Clone)]
pub struct BarycenterResult {
    pub density: DensityField,
    pub solution: Solution,
}

impl BarycenterResult {
    /// Barycenter extracted from another original node.
    pub fn extract_from(&self, problem: &BarycenterProblem, node: usize) -> Result<DensityField> {
        if node >= problem.marginals.len() {
            return Err(Error::InvalidRoot { root: node, nodes: problem.marginals.len() });
        }
        extract_barycenter(&self.solution.potentials[node], &problem.marginals[node], problem.weights[node])
    }
}

/// Solves the multimarginal problem and extracts the barycenter from node 0.
pub fn solve_barycenter(problem: &BarycenterProblem, config: &SolverConfig) -> Result<BarycenterResult> {
    let graph = gs_cost_graph(&problem.weights)?;
    let mmot = MmotProblem::new(graph, problem.marginals.clone())?;
    let solution = solve(&mmot, config)?;
    let density = extract_barycenter(&solution.potentials[0], &problem.marginals[0], problem.weights[0])?;
    Ok(BarycenterResult { density, solution })
}

/// Barycenter for arbitrary nonnegative weights: zero weights are dropped and
/// a single remaining marginal is returned as is.
pub fn barycenter_with_zero_weights(
    marginals: &[DensityField],
    weights: &[f64],
    config: &SolverConfig,
) -> Result<DensityField> {
    if marginals.len() != weights.len() {
        return Err(Error::BadWeights(format!(
            "{} weights for {} marginals",
            weights.len(),
            marginals.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::BadWeights("weights must be nonnegative".into()));
    }
    let keep: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    match keep.len() {
        0 => Err(Error::BadWeights("all weights are zero".into())),
        1 => Ok(marginals[keep[0]].clone()),
        _ => {
            let total: f64 = keep.iter().map(|&i| weights[i]).sum();
            let mut w: Vec<f64> = keep.iter().map(|&i| weights[i] / total).collect();
            // absorb rounding so the weights sum to one exactly enough
            let last = w.len() - 1;
            w[last] = 1.0 - w[..last].iter().sum::<f64>();
            let problem = BarycenterProblem::new(keep.iter().map(|&i| marginals[i].clone()).collect(), w)?;
            Ok(solve_barycenter(&problem, config)?.density)
        }
    }
}

/// Bilinear corner weights for parameters `(u, v)` in `[0, 1]^2`, in corner
/// order (0,0), (1,0), (0,1), (1,1).
pub fn bilinear_weights(u: f64, v: f64) -> [f64; 4] {
    [(1.0 - u) * (1.0 - v), u * (1.0 - v), (1.0 - u) * v, u * v]
}

/// `s x s` atlas of barycenters between four corner densities; entry
/// `[row][col]` uses `u = col / (s - 1)`, `v = row / (s - 1)`. Cells are
/// solved on a pool of `jobs` threads.
pub fn barycentric_grid(
    corners: &[DensityField; 4],
    s: usize,
    config: &SolverConfig,
    jobs: usize,
) -> Result<Vec<Vec<DensityField>>> {
    if s < 2 {
        return Err(Error::InvalidProblem(format!("atlas needs at least 2 steps, got {s}")));
    }
    let grid = corners[0].grid();
    for c in &corners[1..] {
        grid.ensure_same(&c.grid())?;
    }
    let cells: Vec<(usize, usize)> = (0..s).flat_map(|r| (0..s).map(move |c| (r, c))).collect();
    let run = || {
        cells
            .par_iter()
            .map(|&(r, c)| {
                let u = c as f64 / (s - 1) as f64;
                let v = r as f64 / (s - 1) as f64;
                barycenter_with_zero_weights(corners, &bilinear_weights(u, v), config)
            })
            .collect::<Result<Vec<_>>>()
    };
    let flat = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidProblem(format!("thread pool: {e}")))?
        .install(run)?;
    let mut rows = Vec::with_capacity(s);
    let mut it = flat.into_iter();
    for _ in 0..s {
        rows.push(it.by_ref().take(s).collect());
    }
    Ok(rows)
}

/// Fraction of mass on cells whose density exceeds `level * max`.
pub fn mass_fraction_above(mu: &DensityField, level: f64) -> f64 {
    let cut = level * mu.max_value();
    let a = mu.grid().cell_area();
    a * mu.values().iter().filter(|&&v| v > cut).sum::<f64>() / mu.mass()
}

/// Separable Gaussian blur with standard deviation `sigma_cells` (in cells),
/// reflecting at the boundary; preserves mass.
pub fn gaussian_blur(mu: &DensityField, sigma_cells: f64) -> Result<DensityField> {
    let grid = mu.grid();
    let radius = (3.0 * sigma_cells).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-0.5 * (k as f64 / sigma_cells).powi(2)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let reflect = |i: isize, n: isize| -> usize {
        let mut i = i;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - i - 1;
            } else {
                return i as usize;
            }
        }
    };
    let (nx, ny) = (grid.nx() as isize, grid.ny() as isize);
    let src = mu.values();
    let mut tmp = vec![0.0; grid.len()];
    for j in 0..ny {
        for i in 0..nx {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let ii = reflect(i + t as isize - radius, nx);
                acc += k * src[(j * nx) as usize + ii];
            }
            tmp[(j * nx + i) as usize] = acc;
        }
    }
    let mut out = vec![0.0; grid.len()];
    for j in 0..ny {
        for i in 0..nx {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let jj = reflect(j + t as isize - radius, ny);
                acc += k * tmp[jj * nx as usize + i as usize];
            }
            out[(j * nx + i) as usize] = acc;
        }
    }
    DensityField::normalized(grid, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost_graph::unroll;
    use crate::grid::{l1_distance, Grid2D};
    use crate::scenarios::bump;

    #[test]
    fn weights_are_validated() {
        let grid = Grid2D::square(8).unwrap();
        let mu = DensityField::uniform(grid);
        assert!(matches!(
            BarycenterProblem::new(vec![mu.clone(); 2], vec![0.5, 0.6]),
            Err(Error::BadWeights(_))
        ));
        assert!(BarycenterProblem::new(vec![mu.clone(); 2], vec![1.0, 0.0]).is_err());
        assert!(BarycenterProblem::new(vec![mu.clone(); 3], vec![0.5, 0.5]).is_err());
        assert!(BarycenterProblem::new(vec![mu; 2], vec![0.5, 0.5]).is_ok());
    }

    #[test]
    fn gs_graph_shapes() {
        let g = gs_cost_graph(&[0.5, 0.5]).unwrap();
        assert_eq!(g.edges().len(), 1);
        assert_eq!(g.edges()[0].cost.weight(), 0.25);
        let g4 = gs_cost_graph(&[0.25; 4]).unwrap();
        assert_eq!(g4.edges().len(), 6);
        assert!(g4.edges().iter().all(|e| e.cost.weight() == 1.0 / 16.0));
        assert_eq!(unroll(&g4).unwrap().tree.node_count(), 7);
        for m in 2..7 {
            let g = gs_cost_graph(&vec![1.0 / m as f64; m]).unwrap();
            assert_eq!(g.edges().len(), m * (m - 1) / 2);
        }
    }

    #[test]
    fn zero_weight_corners_short_circuit() {
        let grid = Grid2D::square(16).unwrap();
        let a = bump(grid, 0.3, 0.3, 0.2).unwrap();
        let b = bump(grid, 0.7, 0.7, 0.2).unwrap();
        let out = barycenter_with_zero_weights(&[a.clone(), b], &[1.0, 0.0], &SolverConfig::default()).unwrap();
        assert_eq!(out.values(), a.values());
    }

    #[test]
    fn identical_marginals_give_themselves() {
        let grid = Grid2D::square(32).unwrap();
        let a = bump(grid, 0.45, 0.5, 0.25).unwrap();
        let p = BarycenterProblem::new(vec![a.clone(); 3], vec![0.2, 0.3, 0.5]).unwrap();
        let r = solve_barycenter(&p, &SolverConfig::default()).unwrap();
        assert!(l1_distance(&r.density, &a).unwrap() < 1e-12);
        assert!((r.density.mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blur_preserves_mass_and_lowers_sharpness() {
        let grid = Grid2D::square(32).unwrap();
        let sq = crate::scenarios::Shape::Square.density(grid, 0.0).unwrap();
        let blurred = gaussian_blur(&sq, 2.0).unwrap();
        assert!((blurred.mass() - 1.0).abs() < 1e-12);
        assert!(mass_fraction_above(&sq, 0.1) > mass_fraction_above(&blurred, 0.1));
        assert_eq!(mass_fraction_above(&sq, 0.1), 1.0);
    }

    #[test]
    fn atlas_corners_are_inputs() {
        let grid = Grid2D::square(8).unwrap();
        let corners = [
            bump(grid, 0.3, 0.3, 0.3).unwrap(),
            bump(grid, 0.7, 0.3, 0.3).unwrap(),
            bump(grid, 0.3, 0.7, 0.3).unwrap(),
            bump(grid, 0.7, 0.7, 0.3).unwrap(),
        ];
        let cfg = SolverConfig { max_iters: 5, ..SolverConfig::default() };
        let atlas = barycentric_grid(&corners, 2, &cfg, 2).unwrap();
        assert_eq!(atlas.len(), 2);
        assert_eq!(atlas[0][0].values(), corners[0].values());
        assert_eq!(atlas[0][1].values(), corners[1].values());
        assert_eq!(atlas[1][0].values(), corners[2].values());
        assert_eq!(atlas[1][1].values(), corners[3].values());
        assert!(barycentric_grid(&corners, 1, &cfg, 1).is_err());
    }
}
