//! Dual gradient ascent for tree-structured multimarginal transport.
//!
//! Potentials live on the nodes of the unrolled tree. For a chosen root, each
//! non-root node carries a net potential `f'_i = (f_i - sum of children f'_j)^c`
//! on the edge to its parent, and the root potential is the sum of its
//! children's net potentials, which keeps the tuple dual-feasible.
//! Each iteration takes an H^1 ascent step on every non-root node with a
//! shared step size chosen by Armijo backtracking.

use std::fmt::Write as _;
use std::time::Instant;

use crate::cost_graph::{recover_duals, root_tree, run_order, unroll, CostGraph, RootedTree, Unrolled};
use crate::error::{Error, Result};
use crate::grid::{integrate_against, l1_distance, DensityField, Grid2D, PotentialField};
use crate::poisson::PoissonSolver;
use crate::transforms::{c_transform, c_transform_with_argmin, pushforward_by_map, pushforward_with, SplatMode};

/// Cost graph plus one density per original node.
#[derive(Debug, Clone)]
pub struct MmotProblem {
    graph: CostGraph,
    marginals: Vec<DensityField>,
}

impl MmotProblem {
    pub fn new(graph: CostGraph, marginals: Vec<DensityField>) -> Result<Self> {
        if graph.node_count() != marginals.len() {
            return Err(Error::InvalidProblem(format!(
                "graph has {} nodes but {} marginals were given",
                graph.node_count(),
                marginals.len()
            )));
        }
        if marginals.len() < 2 {
            return Err(Error::InvalidProblem("need at least two marginals".into()));
        }
        let grid = marginals[0].grid();
        for m in &marginals[1..] {
            grid.ensure_same(&m.grid())?;
        }
        Ok(MmotProblem { graph, marginals })
    }

    pub fn graph(&self) -> &CostGraph {
        &self.graph
    }

    pub fn marginals(&self) -> &[DensityField] {
        &self.marginals
    }

    pub fn grid(&self) -> Grid2D {
        self.marginals[0].grid()
    }
}

/// Which tree node serves as root at each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RootMode {
    Fixed(usize),
    /// Root `k mod n` at iteration `k`, over all tree nodes.
    Cycle,
}

/// How the transport map of a net potential moves the parent's mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MapMode {
    /// `x - grad f'(x) / w` with finite differences, bilinear deposit.
    #[default]
    Bilinear,
    /// Same map, nearest-cell deposit.
    Nearest,
    /// The minimizing cell of the discrete c-transform. This is the exact
    /// supergradient of the discrete objective.
    Argmin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Initial step; `None` means `1 / max edge weight`.
    pub sigma0: Option<f64>,
    pub armijo_slope: f64,
    pub shrink: f64,
    pub grow: f64,
    pub max_backtracks: usize,
    pub max_iters: usize,
    pub tol_objective: f64,
    pub tol_residual: f64,
    pub root_mode: RootMode,
    pub map_mode: MapMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            sigma0: None,
            armijo_slope: 0.1,
            shrink: 0.5,
            grow: 1.1,
            max_backtracks: 20,
            max_iters: 500,
            tol_objective: 1e-9,
            tol_residual: 1e-4,
            root_mode: RootMode::Cycle,
            map_mode: MapMode::Bilinear,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidProblem(format!("solver config: {what}")));
        if let Some(s) = self.sigma0 {
            if !(s.is_finite() && s > 0.0) {
                return bad("sigma0 must be positive");
            }
        }
        if !(self.armijo_slope > 0.0 && self.armijo_slope < 1.0) {
            return bad("armijo_slope must lie in (0, 1)");
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return bad("shrink must lie in (0, 1)");
        }
        if !(self.grow >= 1.0 && self.grow.is_finite()) {
            return bad("grow must be at least 1");
        }
        if !(self.tol_objective >= 0.0 && self.tol_residual >= 0.0) {
            return bad("tolerances must be nonnegative");
        }
        Ok(())
    }
}

/// Potentials on every tree node and the net potentials of the current root.
#[derive(Debug, Clone)]
pub struct DualState {
    pub potentials: Vec<PotentialField>,
    /// `net[i]` is `f'_i` for the edge from `i` to its parent; `None` at the
    /// root and for nodes not yet processed.
    pub net: Vec<Option<PotentialField>>,
    pub iteration: usize,
    pub objective_history: Vec<f64>,
    pub residual_history: Vec<f64>,
}

impl DualState {
    pub fn zeros(grid: Grid2D, nodes: usize) -> Self {
        DualState {
            potentials: vec![PotentialField::zeros(grid); nodes],
            net: vec![None; nodes],
            iteration: 0,
            objective_history: Vec::new(),
            residual_history: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.potentials.len()
    }
}

/// `f_i - sum of children's net potentials`.
fn reduced_potential(i: usize, state: &DualState, rt: &RootedTree) -> Result<PotentialField> {
    let mut g = state.potentials[i].clone();
    for &j in rt.children(i) {
        match &state.net[j] {
            Some(fj) => g.axpy(-1.0, fj)?,
            None => return Err(Error::ChildNotReady { node: i, child: j }),
        }
    }
    Ok(g)
}

fn parent_weight(i: usize, rt: &RootedTree) -> Result<f64> {
    rt.parent_cost(i)
        .map(|c| c.weight())
        .ok_or(Error::RootHasNoNetPotential(i))
}

/// Net potential `f'_i = (f_i - sum over children j of f'_j)^c` on the edge
/// from `i` to its parent. Children must already hold current values.
pub fn net_potential(i: usize, state: &DualState, rt: &RootedTree) -> Result<PotentialField> {
    let w = parent_weight(i, rt)?;
    c_transform(&reduced_potential(i, state, rt)?, w)
}

/// Recomputes all net potentials in run order and resets the root potential
/// to the sum of its children's net potentials.
pub fn refresh_net_potentials(state: &mut DualState, rt: &RootedTree, order: &[usize]) -> Result<()> {
    state.net.iter_mut().for_each(|n| *n = None);
    for &i in order {
        if i == rt.root() {
            continue;
        }
        let f = net_potential(i, state, rt)?;
        state.net[i] = Some(f);
    }
    let r = rt.root();
    let mut root = PotentialField::zeros(state.potentials[r].grid());
    for &j in rt.children(r) {
        root.axpy(1.0, state.net[j].as_ref().expect("filled in run order"))?;
    }
    state.potentials[r] = root;
    Ok(())
}

/// Sum over tree nodes of the integral of `f_i` against `mu_i`.
pub fn dual_objective(state: &DualState, mus: &[DensityField]) -> Result<f64> {
    if mus.len() != state.node_count() {
        return Err(Error::InvalidProblem(format!(
            "{} densities for {} tree nodes",
            mus.len(),
            state.node_count()
        )));
    }
    let mut total = 0.0;
    for (f, mu) in state.potentials.iter().zip(mus) {
        total += integrate_against(f, mu)?;
    }
    Ok(total)
}

/// Image of the parent's density under the map induced by `f'_k`.
fn transported_parent(
    k: usize,
    state: &DualState,
    mus: &[DensityField],
    rt: &RootedTree,
    mode: MapMode,
) -> Result<DensityField> {
    let p = rt.parent(k).ok_or(Error::RootHasNoNetPotential(k))?;
    let w = parent_weight(k, rt)?;
    match mode {
        MapMode::Argmin => {
            let (_, arg) = c_transform_with_argmin(&reduced_potential(k, state, rt)?, w)?;
            pushforward_by_map(&mus[p], &arg)
        }
        MapMode::Bilinear | MapMode::Nearest => {
            let splat = if mode == MapMode::Nearest { SplatMode::Nearest } else { SplatMode::Bilinear };
            let fk = state.net[k].as_ref().ok_or(Error::ChildNotReady { node: p, child: k })?;
            pushforward_with(fk, &mus[p], w, splat)
        }
    }
}

/// Max over non-root nodes `k` of the L1 distance between `mu_k` and the
/// parent's density transported by `f'_k`. Net potentials must be current.
pub fn marginal_residual(state: &DualState, mus: &[DensityField], rt: &RootedTree) -> Result<f64> {
    marginal_residual_with(state, mus, rt, MapMode::Bilinear)
}

pub fn marginal_residual_with(
    state: &DualState,
    mus: &[DensityField],
    rt: &RootedTree,
    mode: MapMode,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for k in 0..rt.node_count() {
        if k == rt.root() {
            continue;
        }
        let push = transported_parent(k, state, mus, rt, mode)?;
        worst = worst.max(l1_distance(&mus[k], &push)?);
    }
    Ok(worst)
}

/// Ascent directions at the current state, one per non-root node.
#[derive(Debug, Clone)]
pub struct AscentDirection {
    /// `(-Laplacian)^{-1}(mu_k - transported parent)`; `None` at the root.
    pub directions: Vec<Option<PotentialField>>,
    /// The corresponding density residuals.
    pub residuals: Vec<Option<PotentialField>>,
    /// Sum over nodes of the squared H^1 norm of the direction, i.e. the
    /// directional derivative of the objective along it.
    pub slope: f64,
    /// Max L1 residual over nodes.
    pub max_residual: f64,
}

/// Computes the ascent direction. Net potentials must be current for `rt`.
pub fn ascent_direction(
    state: &DualState,
    mus: &[DensityField],
    rt: &RootedTree,
    mode: MapMode,
    poisson: &PoissonSolver,
) -> Result<AscentDirection> {
    let n = rt.node_count();
    let grid = poisson.grid();
    let mut directions = vec![None; n];
    let mut residuals = vec![None; n];
    let mut slope = 0.0;
    let mut max_residual: f64 = 0.0;
    for k in 0..n {
        if k == rt.root() {
            continue;
        }
        let push = transported_parent(k, state, mus, rt, mode)?;
        max_residual = max_residual.max(l1_distance(&mus[k], &push)?);
        let res: Vec<f64> = mus[k].values().iter().zip(push.values()).map(|(a, b)| a - b).collect();
        let d = poisson.solve(&res)?;
        slope += grid.cell_area() * d.values().iter().zip(&res).map(|(a, b)| a * b).sum::<f64>();
        residuals[k] = Some(PotentialField::new(grid, res)?);
        directions[k] = Some(d);
    }
    Ok(AscentDirection { directions, residuals, slope, max_residual })
}

/// Moves every non-root potential by `sigma` along its direction, then
/// recomputes net potentials and the root potential.
pub fn apply_step(
    state: &DualState,
    dir: &AscentDirection,
    rt: &RootedTree,
    order: &[usize],
    sigma: f64,
) -> Result<DualState> {
    let mut next = state.clone();
    for (f, d) in next.potentials.iter_mut().zip(&dir.directions) {
        if let Some(d) = d {
            f.axpy(sigma, d)?;
        }
    }
    refresh_net_potentials(&mut next, rt, order)?;
    Ok(next)
}

/// One ascent step on a rooted tree with fixed step size `sigma`: net
/// potentials are brought up to date, every non-root node moves along
/// `(-Laplacian)^{-1}(mu_k - transported parent)`, and the root is reset.
pub fn ascent_step(
    rt: &RootedTree,
    state: &DualState,
    mus: &[DensityField],
    sigma: f64,
    mode: MapMode,
) -> Result<DualState> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidProblem(format!("step size must be positive, got {sigma}")));
    }
    let order = run_order(rt);
    let mut current = state.clone();
    refresh_net_potentials(&mut current, rt, &order)?;
    let poisson = PoissonSolver::new(current.potentials[0].grid());
    let dir = ascent_direction(&current, mus, rt, mode, &poisson)?;
    let mut next = apply_step(&current, &dir, rt, &order, sigma)?;
    next.iteration += 1;
    Ok(next)
}

/// Why the iteration stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Residual,
    ObjectiveStall,
    /// The ascent direction vanished.
    Stationary,
    MaxIters,
    /// Every backtracking step was rejected; the best state is returned.
    LineSearchFailed,
}

/// One row of the iteration log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub root: usize,
    /// Step accepted at this iteration (the last one tried if none was).
    pub sigma: f64,
    /// Objective after the step.
    pub objective: f64,
    /// Residual at the start of the iteration.
    pub residual: f64,
    pub backtracks: usize,
    pub wall_ms: f64,
}

pub const HISTORY_HEADER: &str = "iter,root,sigma,objective,residual,backtracks";

/// Iteration log as CSV with a header line. Wall-clock times are appended as
/// a `wall_ms` column only when `timing` is set, so the default output is
/// reproducible byte for byte.
pub fn history_csv(history: &[IterationRecord], timing: bool) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push_str(if timing { ",wall_ms\n" } else { "\n" });
    for r in history {
        let _ = write!(
            out,
            "{},{},{:e},{:.17e},{:.17e},{}",
            r.iter, r.root, r.sigma, r.objective, r.residual, r.backtracks
        );
        if timing {
            let _ = write!(out, ",{:.3}", r.wall_ms);
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub unrolled: Unrolled,
    /// Potentials on the tree nodes; the last root holds its c-transform value.
    pub tree_potentials: Vec<PotentialField>,
    /// Potentials summed back onto the original marginals.
    pub potentials: Vec<PotentialField>,
    pub objective: f64,
    pub history: Vec<IterationRecord>,
    pub converged: bool,
    pub stop_reason: StopReason,
    /// Root used for the final net potentials.
    pub final_root: usize,
}

impl Solution {
    pub fn iterations(&self) -> usize {
        self.history.len()
    }

    /// First iteration (1-based) whose objective lies within `tol` of `target`.
    pub fn iterations_to(&self, target: f64, tol: f64) -> Option<usize> {
        self.history
            .iter()
            .position(|r| (r.objective - target).abs() <= tol)
            .map(|p| p + 1)
    }
}

/// Runs the full solve: unroll, then iterate root selection, ascent direction,
/// and backtracking line search until a stopping rule fires.
pub fn solve(problem: &MmotProblem, config: &SolverConfig) -> Result<Solution> {
    solve_with_observer(problem, config, |_| {})
}

/// As [`solve`], calling `observe` after every iteration.
pub fn solve_with_observer(
    problem: &MmotProblem,
    config: &SolverConfig,
    mut observe: impl FnMut(&IterationRecord),
) -> Result<Solution> {
    config.validate()?;
    let unrolled = unroll(problem.graph())?;
    let tree = &unrolled.tree;
    let n = tree.node_count();
    if let RootMode::Fixed(r) = config.root_mode {
        if r >= n {
            return Err(Error::InvalidRoot { root: r, nodes: n });
        }
    }
    let grid = problem.grid();
    let mus: Vec<DensityField> = unrolled
        .dup_map
        .iter()
        .map(|&o| problem.marginals()[o].clone())
        .collect();
    let poisson = PoissonSolver::new(grid);
    let mut rooted: Vec<Option<(RootedTree, Vec<usize>)>> = vec![None; n];

    let mut state = DualState::zeros(grid, n);
    let mut sigma = config.sigma0.unwrap_or(1.0 / tree.max_weight());
    let mut last_objective = f64::NEG_INFINITY;
    let mut history = Vec::new();
    let mut stop = StopReason::MaxIters;
    let mut final_root = match config.root_mode {
        RootMode::Fixed(r) => r,
        RootMode::Cycle => 0,
    };

    for it in 0..config.max_iters {
        let start = Instant::now();
        let root = match config.root_mode {
            RootMode::Fixed(r) => r,
            RootMode::Cycle => it % n,
        };
        final_root = root;
        if rooted[root].is_none() {
            let rt = root_tree(tree, root)?;
            let order = run_order(&rt);
            rooted[root] = Some((rt, order));
        }
        let (rt, order) = rooted[root].as_ref().expect("just filled");

        // re-rooting replaces the root potential by the tightest feasible
        // value, which can only raise the objective
        refresh_net_potentials(&mut state, rt, order)?;
        let baseline = dual_objective(&state, &mus)?.max(last_objective);
        if it == 0 {
            last_objective = baseline;
        }

        let dir = ascent_direction(&state, &mus, rt, config.map_mode, &poisson)?;
        state.residual_history.push(dir.max_residual);
        if dir.max_residual < config.tol_residual {
            stop = StopReason::Residual;
            break;
        }
        if dir.slope.is_nan() || dir.slope <= 0.0 {
            stop = StopReason::Stationary;
            break;
        }

        let mut backtracks = 0;
        let mut accepted = None;
        loop {
            let trial = apply_step(&state, &dir, rt, order, sigma)?;
            let value = dual_objective(&trial, &mus)?;
            if value.is_finite() && value - baseline >= config.armijo_slope * sigma * dir.slope {
                accepted = Some((trial, value));
                break;
            }
            if backtracks == config.max_backtracks {
                break;
            }
            backtracks += 1;
            sigma *= config.shrink;
        }

        let Some((trial, value)) = accepted else {
            let record = IterationRecord {
                iter: it + 1,
                root,
                sigma,
                objective: baseline,
                residual: dir.max_residual,
                backtracks,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            observe(&record);
            history.push(record);
            stop = StopReason::LineSearchFailed;
            break;
        };

        let objective_history = std::mem::take(&mut state.objective_history);
        let residual_history = std::mem::take(&mut state.residual_history);
        state = trial;
        state.objective_history = objective_history;
        state.residual_history = residual_history;
        state.objective_history.push(value);
        state.iteration = it + 1;

        let record = IterationRecord {
            iter: it + 1,
            root,
            sigma,
            objective: value,
            residual: dir.max_residual,
            backtracks,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        observe(&record);
        history.push(record);
        sigma *= config.grow;

        let gain = value - baseline;
        last_objective = value;
        if gain <= config.tol_objective * value.abs().max(f64::MIN_POSITIVE) {
            stop = StopReason::ObjectiveStall;
            break;
        }
    }

    // leave the state consistent with the final root
    let (rt, order) = match &rooted[final_root] {
        Some(x) => (x.0.clone(), x.1.clone()),
        None => {
            let rt = root_tree(tree, final_root)?;
            let order = run_order(&rt);
            (rt, order)
        }
    };
    refresh_net_potentials(&mut state, &rt, &order)?;
    let objective = dual_objective(&state, &mus)?.max(last_objective);
    let potentials = recover_duals(&state.potentials, &unrolled.dup_map)?;
    let converged = matches!(
        stop,
        StopReason::Residual | StopReason::ObjectiveStall | StopReason::Stationary
    );
    Ok(Solution {
        tree_potentials: state.potentials,
        potentials,
        objective,
        history,
        converged,
        stop_reason: stop,
        final_root,
        unrolled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid2D;

    fn blob(grid: Grid2D, cx: f64, cy: f64, r: f64) -> DensityField {
        DensityField::normalized(
            grid,
            (0..grid.len())
                .map(|k| {
                    let (x, y) = grid.center(k);
                    let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                    (1.0 - d2 / (r * r)).max(0.0).powi(2)
                })
                .collect(),
        )
        .unwrap()
    }

    fn chain3(grid: Grid2D) -> (CostGraph, Vec<DensityField>) {
        (
            CostGraph::chain(3, 1.0).unwrap(),
            vec![blob(grid, 0.3, 0.4, 0.15), blob(grid, 0.5, 0.5, 0.2), blob(grid, 0.65, 0.45, 0.12)],
        )
    }

    #[test]
    fn problem_validation() {
        let grid = Grid2D::new(8, 8).unwrap();
        let g = CostGraph::chain(3, 1.0).unwrap();
        let mu = DensityField::uniform(grid);
        assert!(MmotProblem::new(g.clone(), vec![mu.clone(); 2]).is_err());
        let other = DensityField::uniform(Grid2D::new(4, 8).unwrap());
        assert!(matches!(
            MmotProblem::new(g.clone(), vec![mu.clone(), mu.clone(), other]),
            Err(Error::GridMismatch { .. })
        ));
        assert!(MmotProblem::new(g, vec![mu; 3]).is_ok());
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = SolverConfig::default();
        assert_eq!((c.armijo_slope, c.shrink, c.grow, c.max_iters), (0.1, 0.5, 1.1, 500));
        assert!(c.validate().is_ok());
        let bad = SolverConfig { shrink: 1.5, ..SolverConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn leaf_with_zero_potential_has_zero_net() {
        let grid = Grid2D::new(8, 8).unwrap();
        let tree = CostGraph::chain(3, 1.0).unwrap();
        let rt = root_tree(&tree, 2).unwrap();
        let state = DualState::zeros(grid, 3);
        let f0 = net_potential(0, &state, &rt).unwrap();
        assert!(f0.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn net_potential_requires_children() {
        let grid = Grid2D::new(8, 8).unwrap();
        let tree = CostGraph::chain(3, 1.0).unwrap();
        let rt = root_tree(&tree, 2).unwrap();
        let state = DualState::zeros(grid, 3);
        assert!(matches!(
            net_potential(1, &state, &rt),
            Err(Error::ChildNotReady { node: 1, child: 0 })
        ));
        assert!(matches!(net_potential(2, &state, &rt), Err(Error::RootHasNoNetPotential(2))));
    }

    #[test]
    fn middle_net_potential_composes_transforms() {
        let grid = Grid2D::new(10, 10).unwrap();
        let tree = CostGraph::new(3, [(0, 1, 1.0), (1, 2, 0.5)]).unwrap();
        let rt = root_tree(&tree, 2).unwrap();
        let mut state = DualState::zeros(grid, 3);
        state.potentials[0] = PotentialField::from_fn(grid, |x, y| 0.1 * x - 0.2 * y * y);
        state.potentials[1] = PotentialField::from_fn(grid, |x, y| (3.0 * x).sin() * 0.05 + y * 0.1);
        refresh_net_potentials(&mut state, &rt, &run_order(&rt)).unwrap();
        let f1c = c_transform(&state.potentials[0], 1.0).unwrap();
        let expect = c_transform(&state.potentials[1].sub(&f1c).unwrap(), 0.5).unwrap();
        assert!(state.net[1].as_ref().unwrap().max_abs_diff(&expect) == 0.0);
        assert!(state.potentials[2].max_abs_diff(&expect) == 0.0);
    }

    #[test]
    fn identical_marginals_are_a_fixed_point() {
        let grid = Grid2D::new(16, 16).unwrap();
        let mu = blob(grid, 0.5, 0.5, 0.25);
        let problem = MmotProblem::new(CostGraph::chain(3, 1.0).unwrap(), vec![mu; 3]).unwrap();
        let sol = solve(&problem, &SolverConfig::default()).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.stop_reason, StopReason::Residual);
        assert_eq!(sol.iterations(), 0);
        assert_eq!(sol.objective, 0.0);
        assert!(sol.potentials.iter().all(|f| f.values().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn first_two_node_step_moves_along_poisson_direction() {
        let grid = Grid2D::new(16, 16).unwrap();
        let mus = vec![blob(grid, 0.4, 0.5, 0.2), blob(grid, 0.6, 0.5, 0.2)];
        let tree = CostGraph::chain(2, 1.0).unwrap();
        let rt = root_tree(&tree, 1).unwrap();
        let state = DualState::zeros(grid, 2);
        let next = ascent_step(&rt, &state, &mus, 0.5, MapMode::Bilinear).unwrap();
        let rhs: Vec<f64> = mus[0].values().iter().zip(mus[1].values()).map(|(a, b)| a - b).collect();
        let d = PoissonSolver::new(grid).solve(&rhs).unwrap();
        let expect = d.scaled(0.5);
        assert!(next.potentials[0].max_abs_diff(&expect) < 1e-15);
        let root = c_transform(&expect, 1.0).unwrap();
        assert!(next.potentials[1].max_abs_diff(&root) < 1e-15);
    }

    #[test]
    fn residual_is_bounded_and_zero_for_identical() {
        let grid = Grid2D::new(12, 12).unwrap();
        let (g, mus) = chain3(grid);
        let rt = root_tree(&g, 0).unwrap();
        let mut state = DualState::zeros(grid, 3);
        refresh_net_potentials(&mut state, &rt, &run_order(&rt)).unwrap();
        let r = marginal_residual(&state, &mus, &rt).unwrap();
        assert!(r > 0.0 && r <= 2.0);
        let same = vec![mus[0].clone(); 3];
        assert!(marginal_residual(&state, &same, &rt).unwrap() < 1e-12);
    }

    #[test]
    fn solve_is_monotone_and_feasible() {
        let grid = Grid2D::new(24, 24).unwrap();
        let (g, mus) = chain3(grid);
        let problem = MmotProblem::new(g.clone(), mus).unwrap();
        let config = SolverConfig { max_iters: 40, ..SolverConfig::default() };
        let sol = solve(&problem, &config).unwrap();
        let objs: Vec<f64> = sol.history.iter().map(|r| r.objective).collect();
        assert!(objs.windows(2).all(|w| w[1] >= w[0]));
        assert!(sol.objective > 0.0);
        // sampled dual constraint on the grid
        let f = &sol.potentials;
        let n = grid.len();
        for s in 0..2000usize {
            let k = [s * 7919 % n, s * 104729 % n, s * 1299709 % n];
            let pts: Vec<[f64; 2]> = k.iter().map(|&k| grid.center(k).into()).collect();
            let c = g.eval(&[&pts[0][..], &pts[1][..], &pts[2][..]]);
            let lhs: f64 = (0..3).map(|i| f[i].values()[k[i]]).sum();
            assert!(lhs <= c + 1e-10);
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let rec = IterationRecord {
            iter: 1,
            root: 0,
            sigma: 1.0,
            objective: 0.5,
            residual: 0.25,
            backtracks: 2,
            wall_ms: 1.5,
        };
        let csv = history_csv(&[rec], false);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], HISTORY_HEADER);
        assert!(lines[1].starts_with("1,0,1e0,"));
        assert_eq!(lines[1].split(',').count(), 6);
        let timed = history_csv(&[rec], true);
        assert!(timed.starts_with(&format!("{HISTORY_HEADER},wall_ms\n")));
        assert!(timed.lines().nth(1).unwrap().ends_with(",1.500"));
    }
}
