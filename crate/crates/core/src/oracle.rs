//! Exact verification on tiny instances: the multimarginal transport LP solved
//! by a dense revised simplex, and a checker for the dual constraint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cost_graph::CostGraph;
use crate::error::{Error, Result};
use crate::grid::{DensityField, PotentialField};

/// Largest number of tuples the LP accepts.
pub const TUPLE_CAP: usize = 200_000;

/// Finitely supported probability measure in the plane.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    pub points: Vec<[f64; 2]>,
    pub masses: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Vec<[f64; 2]>, masses: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != masses.len() {
            return Err(Error::InvalidDensity(format!(
                "{} points with {} masses",
                points.len(),
                masses.len()
            )));
        }
        if masses.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::InvalidDensity("masses must be nonnegative".into()));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDensity(format!("masses sum to {total}")));
        }
        Ok(DiscreteMeasure { points, masses })
    }

    /// Cells of positive mass, at their centers, with mass `a * mu`.
    pub fn from_density(mu: &DensityField) -> Self {
        let grid = mu.grid();
        let a = grid.cell_area();
        let (points, masses) = mu
            .values()
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(|(k, v)| (<[f64; 2]>::from(grid.center(k)), a * v))
            .unzip();
        DiscreteMeasure { points, masses }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Optimal value and a sparse optimal plan (tuple of support indices, mass).
#[derive(Debug, Clone)]
pub struct LpSolution {
    pub value: f64,
    pub plan: Vec<(Vec<usize>, f64)>,
    pub pivots: usize,
}

impl LpSolution {
    /// Largest deviation of the plan's marginals from the prescribed masses.
    pub fn feasibility_residual(&self, marginals: &[DiscreteMeasure]) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, mu) in marginals.iter().enumerate() {
            let mut sums = vec![0.0; mu.len()];
            for (t, p) in &self.plan {
                sums[t[i]] += p;
            }
            for (s, m) in sums.iter().zip(&mu.masses) {
                worst = worst.max((s - m).abs());
            }
        }
        worst
    }
}

/// Mixed-radix enumeration of tuples in lexicographic order (last index fastest).
fn decode(mut k: usize, sizes: &[usize], out: &mut [usize]) {
    for i in (0..sizes.len()).rev() {
        out[i] = k % sizes[i];
        k /= sizes[i];
    }
}

fn tuple_cost(graph: &CostGraph, marginals: &[DiscreteMeasure], t: &[usize]) -> f64 {
    graph
        .edges()
        .iter()
        .map(|e| {
            let p = marginals[e.a].points[t[e.a]];
            let q = marginals[e.b].points[t[e.b]];
            e.cost.eval(&p, &q)
        })
        .sum()
}

struct Simplex {
    rows: usize,
    /// `row_of[i][s]`: constraint row of marginal `i`, support point `s`
    /// (`None` for the dropped redundant rows).
    row_of: Vec<Vec<Option<usize>>>,
    sizes: Vec<usize>,
    ncols: usize,
    costs: Vec<f64>,
    b: Vec<f64>,
    /// Column index per basis position; `>= ncols` are artificials.
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    binv: Vec<f64>,
    xb: Vec<f64>,
    pivots: usize,
}

const EPS: f64 = 1e-11;

impl Simplex {
    fn column(&self, j: usize, out: &mut Vec<usize>) {
        out.clear();
        if j >= self.ncols {
            out.push(j - self.ncols);
            return;
        }
        let mut t = vec![0; self.sizes.len()];
        decode(j, &self.sizes, &mut t);
        for (i, &s) in t.iter().enumerate() {
            if let Some(r) = self.row_of[i][s] {
                out.push(r);
            }
        }
    }

    fn refactor(&mut self) -> Result<()> {
        let n = self.rows;
        let mut mat = vec![0.0f64; n * n];
        let mut rows = Vec::new();
        for (pos, &j) in self.basis.iter().enumerate() {
            self.column(j, &mut rows);
            for &r in &rows {
                mat[r * n + pos] = 1.0;
            }
        }
        let mut inv = vec![0.0; n * n];
        for i in 0..n {
            inv[i * n + i] = 1.0;
        }
        for c in 0..n {
            let p = (c..n)
                .max_by(|&a, &b| mat[a * n + c].abs().total_cmp(&mat[b * n + c].abs()))
                .expect("nonempty range");
            if mat[p * n + c].abs() < 1e-12 {
                return Err(Error::LpFailure("singular basis".into()));
            }
            if p != c {
                for k in 0..n {
                    mat.swap(p * n + k, c * n + k);
                    inv.swap(p * n + k, c * n + k);
                }
            }
            let d = mat[c * n + c];
            for k in 0..n {
                mat[c * n + k] /= d;
                inv[c * n + k] /= d;
            }
            for r in 0..n {
                if r != c {
                    let f = mat[r * n + c];
                    if f != 0.0 {
                        for k in 0..n {
                            mat[r * n + k] -= f * mat[c * n + k];
                            inv[r * n + k] -= f * inv[c * n + k];
                        }
                    }
                }
            }
        }
        self.binv = inv;
        self.xb = (0..n).map(|r| (0..n).map(|k| self.binv[r * n + k] * self.b[k]).sum()).collect();
        for v in self.xb.iter_mut() {
            if *v < 0.0 && *v > -1e-12 {
                *v = 0.0;
            }
        }
        Ok(())
    }

    /// `B^{-1} a_j`.
    fn ftran(&self, j: usize, rows: &mut Vec<usize>) -> Vec<f64> {
        self.column(j, rows);
        let n = self.rows;
        (0..n).map(|r| rows.iter().map(|&k| self.binv[r * n + k]).sum()).collect()
    }

    fn pivot(&mut self, pos: usize, j: usize, u: &[f64]) {
        let n = self.rows;
        let piv = u[pos];
        let theta = self.xb[pos] / piv;
        for (r, (x, &ur)) in self.xb.iter_mut().zip(u).enumerate() {
            if r != pos {
                *x -= theta * ur;
                if x.abs() < 1e-14 {
                    *x = 0.0;
                }
            }
        }
        self.xb[pos] = theta;
        let prow: Vec<f64> = (0..n).map(|k| self.binv[pos * n + k] / piv).collect();
        for (r, &ur) in u.iter().enumerate().take(n) {
            if r != pos && ur != 0.0 {
                for (b, &p) in self.binv[r * n..(r + 1) * n].iter_mut().zip(&prow) {
                    *b -= ur * p;
                }
            }
        }
        self.binv[pos * n..(pos + 1) * n].copy_from_slice(&prow);
        let old = self.basis[pos];
        if old < self.ncols {
            self.in_basis[old] = false;
        }
        self.basis[pos] = j;
        self.in_basis[j] = true;
        self.pivots += 1;
    }

    /// Runs simplex iterations with the given column costs (artificials use
    /// `art_cost`). Artificial columns never re-enter.
    fn optimize(&mut self, phase_one: bool) -> Result<()> {
        let n = self.rows;
        let mut degenerate_run = 0usize;
        let mut rows = Vec::new();
        let max_pivots = 50 * (self.ncols + n) + 1000;
        loop {
            if self.pivots > 0 && self.pivots.is_multiple_of(50) {
                self.refactor()?;
            }
            let cb: Vec<f64> = self
                .basis
                .iter()
                .map(|&j| match (phase_one, j >= self.ncols) {
                    (true, true) => 1.0,
                    (true, false) => 0.0,
                    (false, true) => 0.0,
                    (false, false) => self.costs[j],
                })
                .collect();
            let y: Vec<f64> = (0..n).map(|k| (0..n).map(|r| cb[r] * self.binv[r * n + k]).sum()).collect();
            let bland = degenerate_run >= 50;
            let mut enter = None;
            let mut best = -EPS;
            for j in 0..self.ncols {
                if self.in_basis[j] {
                    continue;
                }
                let cj = if phase_one { 0.0 } else { self.costs[j] };
                self.column(j, &mut rows);
                let d = cj - rows.iter().map(|&r| y[r]).sum::<f64>();
                if d < best {
                    enter = Some(j);
                    if bland {
                        break;
                    }
                    best = d;
                }
            }
            let Some(j) = enter else { return Ok(()) };
            let u = self.ftran(j, &mut rows);
            let mut leave: Option<usize> = None;
            let mut ratio = f64::INFINITY;
            for r in 0..n {
                if u[r] > 1e-9 {
                    let q = self.xb[r] / u[r];
                    let better = match leave {
                        None => true,
                        Some(l) => {
                            if q < ratio - 1e-13 {
                                true
                            } else if q <= ratio + 1e-13 {
                                if bland {
                                    self.basis[r] < self.basis[l]
                                } else {
                                    u[r] > u[l]
                                }
                            } else {
                                false
                            }
                        }
                    };
                    if better {
                        leave = Some(r);
                        ratio = q;
                    }
                }
            }
            let Some(pos) = leave else {
                return Err(Error::LpFailure("unbounded direction".into()));
            };
            if ratio <= 1e-14 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            self.pivot(pos, j, &u);
            if self.pivots > max_pivots {
                return Err(Error::LpFailure("pivot limit reached".into()));
            }
        }
    }
}

/// Solves the multimarginal transport LP exactly:
/// minimize `sum_t c(t) P(t)` over plans `P >= 0` with the given marginals.
pub fn lp_mmot(marginals: &[DiscreteMeasure], graph: &CostGraph) -> Result<LpSolution> {
    let m = marginals.len();
    if m != graph.node_count() || m < 2 {
        return Err(Error::InvalidProblem(format!(
            "{} marginals for a {}-node graph",
            m,
            graph.node_count()
        )));
    }
    let sizes: Vec<usize> = marginals.iter().map(|mu| mu.len()).collect();
    if sizes.contains(&0) {
        return Err(Error::InvalidDensity("empty marginal".into()));
    }
    let mut ncols: usize = 1;
    for &s in &sizes {
        ncols = ncols.checked_mul(s).filter(|&n| n <= TUPLE_CAP).ok_or(Error::TooLarge {
            tuples: sizes.iter().fold(1usize, |a, &s| a.saturating_mul(s)),
            cap: TUPLE_CAP,
        })?;
    }

    // one redundant equation per marginal beyond the first
    let mut row_of = Vec::with_capacity(m);
    let mut b = Vec::new();
    for (i, mu) in marginals.iter().enumerate() {
        let keep = if i == 0 { mu.len() } else { mu.len() - 1 };
        let mut rows = vec![None; mu.len()];
        for (s, slot) in rows.iter_mut().enumerate().take(keep) {
            *slot = Some(b.len());
            b.push(mu.masses[s]);
        }
        row_of.push(rows);
    }
    let rows = b.len();
    let mut t = vec![0; m];
    let costs: Vec<f64> = (0..ncols)
        .map(|k| {
            decode(k, &sizes, &mut t);
            tuple_cost(graph, marginals, &t)
        })
        .collect();

    let mut lp = Simplex {
        rows,
        row_of,
        sizes: sizes.clone(),
        ncols,
        costs,
        b: b.clone(),
        basis: (0..rows).map(|r| ncols + r).collect(),
        in_basis: vec![false; ncols + rows],
        binv: Vec::new(),
        xb: Vec::new(),
        pivots: 0,
    };
    for r in 0..rows {
        lp.in_basis[ncols + r] = true;
    }
    lp.refactor()?;
    lp.optimize(true)?;
    let infeasibility: f64 = lp
        .basis
        .iter()
        .zip(&lp.xb)
        .filter(|(j, _)| **j >= ncols)
        .map(|(_, x)| *x)
        .sum();
    if infeasibility > 1e-9 {
        return Err(Error::LpFailure(format!("marginals are inconsistent ({infeasibility:e})")));
    }
    // drive zero-level artificials out of the basis
    let mut scratch = Vec::new();
    for pos in 0..rows {
        if lp.basis[pos] < ncols {
            continue;
        }
        let n = rows;
        let candidate = (0..ncols).find(|&j| {
            if lp.in_basis[j] {
                return false;
            }
            lp.column(j, &mut scratch);
            scratch.iter().map(|&k| lp.binv[pos * n + k]).sum::<f64>().abs() > 1e-9
        });
        if let Some(j) = candidate {
            let u = lp.ftran(j, &mut scratch);
            lp.pivot(pos, j, &u);
        }
    }
    lp.refactor()?;
    lp.optimize(false)?;
    lp.refactor()?;

    let mut plan = Vec::new();
    let mut value = 0.0;
    for (&j, &x) in lp.basis.iter().zip(&lp.xb) {
        // basic variables at roundoff level are zero
        if j < ncols && x > 1e-13 {
            decode(j, &sizes, &mut t);
            value += lp.costs[j] * x;
            plan.push((t.clone(), x));
        }
    }
    plan.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(LpSolution { value, plan, pivots: lp.pivots })
}

/// `W_2^2` between two discrete measures.
pub fn w2_squared(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<f64> {
    let g = CostGraph::chain(2, 1.0)?;
    Ok(2.0 * lp_mmot(&[a.clone(), b.clone()], &g)?.value)
}

/// Outcome of [`certify_duals`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualCertificate {
    /// Max over checked grid tuples of `sum f_i(x_i) - c(x)`.
    pub max_violation: f64,
    /// `sum_i integral of f_i against mu_i`.
    pub dual_value: f64,
    pub tuples_checked: usize,
    pub exhaustive: bool,
}

impl DualCertificate {
    /// `reference - dual_value`; nonnegative for feasible potentials when
    /// `reference` is the primal optimum.
    pub fn gap_to(&self, reference: f64) -> f64 {
        reference - self.dual_value
    }
}

/// Checks `sum_i f_i(x_i) <= c(x_1, ..., x_m)` over grid tuples. All tuples
/// are visited when there are at most `exhaustive_cap` of them; otherwise
/// `samples` tuples are drawn uniformly with the given seed.
pub fn certify_duals(
    potentials: &[PotentialField],
    marginals: &[DensityField],
    graph: &CostGraph,
    samples: usize,
    exhaustive_cap: usize,
    seed: u64,
) -> Result<DualCertificate> {
    let m = potentials.len();
    if m != marginals.len() || m != graph.node_count() || m == 0 {
        return Err(Error::InvalidProblem(format!(
            "{} potentials, {} marginals, {} graph nodes",
            m,
            marginals.len(),
            graph.node_count()
        )));
    }
    let grid = marginals[0].grid();
    for (f, mu) in potentials.iter().zip(marginals) {
        grid.ensure_same(&f.grid())?;
        grid.ensure_same(&mu.grid())?;
    }
    let mut dual_value = 0.0;
    for (f, mu) in potentials.iter().zip(marginals) {
        dual_value += crate::grid::integrate_against(f, mu)?;
    }
    let n = grid.len();
    let centers: Vec<[f64; 2]> = (0..n).map(|k| grid.center(k).into()).collect();
    let check = |t: &[usize]| -> f64 {
        let lhs: f64 = t.iter().enumerate().map(|(i, &k)| potentials[i].values()[k]).sum();
        let c: f64 = graph
            .edges()
            .iter()
            .map(|e| e.cost.eval(&centers[t[e.a]], &centers[t[e.b]]))
            .sum();
        lhs - c
    };
    let total = (0..m).try_fold(1usize, |acc, _| acc.checked_mul(n));
    let mut worst = f64::NEG_INFINITY;
    let mut t = vec![0; m];
    let sizes = vec![n; m];
    let (checked, exhaustive) = match total {
        Some(total) if total <= exhaustive_cap => {
            for k in 0..total {
                decode(k, &sizes, &mut t);
                worst = worst.max(check(&t));
            }
            (total, true)
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..samples {
                t.iter_mut().for_each(|x| *x = rng.random_range(0..n));
                worst = worst.max(check(&t));
            }
            (samples, false)
        }
    };
    Ok(DualCertificate {
        max_violation: worst,
        dual_value,
        tuples_checked: checked,
        exhaustive,
    })
}
