//! Pairwise cost graphs: construction, unrolling of cycles into a tree, and
//! rooting with breadth-first layers.
//!
//! Nodes are 0-based here; the text formats used by the CLI are 1-based.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::grid::PotentialField;

/// Scaled quadratic pairwise cost `c(x, y) = (w/2) |x - y|^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairwiseCost {
    weight: f64,
}

impl PairwiseCost {
    pub fn new(weight: f64) -> Result<Self> {
        if !(weight.is_finite() && weight > 0.0) {
            return Err(Error::NonpositiveWeight(weight));
        }
        Ok(Self { weight })
    }

    #[inline]
    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// `h(z) = (w/2)|z|^2` evaluated at `x - y`.
    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        0.5 * self.weight * d2
    }

    /// `grad h*(p) = p / w`.
    #[inline]
    pub fn grad_conjugate(&self, p: f64) -> f64 {
        p / self.weight
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub cost: PairwiseCost,
}

/// Simple undirected graph of pairwise costs between marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct CostGraph {
    nodes: usize,
    edges: Vec<Edge>,
}

impl CostGraph {
    /// Validates that the graph is simple (no self-loops, no parallel edges)
    /// and that every endpoint exists. Edges are stored with `a < b`.
    /// Connectivity is checked separately by [`CostGraph::is_connected`].
    pub fn new(nodes: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::InvalidGraph("graph has no nodes".into()));
        }
        let mut out: Vec<Edge> = Vec::new();
        for (a, b, w) in edges {
            if a >= nodes || b >= nodes {
                return Err(Error::InvalidGraph(format!(
                    "edge ({a}, {b}) references a node outside 0..{nodes}"
                )));
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop at node {a}")));
            }
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            if out.iter().any(|e| e.a == a && e.b == b) {
                return Err(Error::InvalidGraph(format!("parallel edge ({a}, {b})")));
            }
            out.push(Edge {
                a,
                b,
                cost: PairwiseCost::new(w)?,
            });
        }
        Ok(Self { nodes, edges: out })
    }

    /// Path `0 - 1 - ... - (m-1)` with a common weight.
    pub fn chain(m: usize, weight: f64) -> Result<Self> {
        Self::new(m, (1..m).map(|i| (i - 1, i, weight)))
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn max_weight(&self) -> f64 {
        self.edges
            .iter()
            .map(|e| e.cost.weight())
            .fold(0.0, f64::max)
    }

    /// Sorted adjacency lists `(neighbor, edge index)`.
    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.nodes];
        for (k, e) in self.edges.iter().enumerate() {
            adj[e.a].push((e.b, k));
            adj[e.b].push((e.a, k));
        }
        adj.iter_mut().for_each(|v| v.sort_unstable());
        adj
    }

    /// BFS from `start`: returns (depth, discovering edge) per node, `None` when unreachable.
    fn bfs(&self, start: usize) -> Vec<Option<(usize, Option<usize>)>> {
        let adj = self.adjacency();
        let mut seen: Vec<Option<(usize, Option<usize>)>> = vec![None; self.nodes];
        seen[start] = Some((0, None));
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            let depth = seen[u].map(|s| s.0).unwrap_or(0);
            for &(v, k) in &adj[u] {
                if seen[v].is_none() {
                    seen[v] = Some((depth + 1, Some(k)));
                    queue.push_back(v);
                }
            }
        }
        seen
    }

    pub fn is_connected(&self) -> bool {
        self.bfs(0).iter().all(Option::is_some)
    }

    pub fn is_tree(&self) -> bool {
        self.edges.len() + 1 == self.nodes && self.is_connected()
    }

    /// Cost of a tuple of points, one per node.
    pub fn eval(&self, points: &[&[f64]]) -> f64 {
        self.edges
            .iter()
            .map(|e| e.cost.eval(points[e.a], points[e.b]))
            .sum()
    }
}

/// Result of [`unroll`]: a tree on `|E| + 1` nodes and the map from tree
/// nodes back to the original marginals. The map is the identity on the
/// first `original_nodes` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Unrolled {
    pub tree: CostGraph,
    pub dup_map: Vec<usize>,
    pub original_nodes: usize,
}

impl Unrolled {
    pub fn duplicate_count(&self) -> usize {
        self.dup_map.len() - self.original_nodes
    }
}

/// Breaks every cycle by rerouting non-tree edges to fresh duplicate nodes.
///
/// A spanning tree is grown by BFS from node 0 (neighbors in ascending
/// order). Each remaining edge `(a, b)` keeps one endpoint and has the other
/// replaced by a new node carrying the same marginal: the endpoint deeper in
/// the BFS tree is duplicated, the higher index on equal depth.
pub fn unroll(g: &CostGraph) -> Result<Unrolled> {
    let bfs = g.bfs(0);
    if bfs.iter().any(Option::is_none) {
        return Err(Error::DisconnectedGraph);
    }
    let depth: Vec<usize> = bfs.iter().map(|s| s.map(|s| s.0).unwrap_or(0)).collect();
    let mut in_tree = vec![false; g.edges.len()];
    for s in bfs.iter().flatten() {
        if let Some(k) = s.1 {
            in_tree[k] = true;
        }
    }
    let mut dup_map: Vec<usize> = (0..g.nodes).collect();
    let mut edges = Vec::with_capacity(g.edges.len());
    for (k, e) in g.edges.iter().enumerate() {
        if in_tree[k] {
            edges.push(*e);
            continue;
        }
        let (keep, dup) = if depth[e.a] > depth[e.b] { (e.b, e.a) } else { (e.a, e.b) };
        let fresh = dup_map.len();
        dup_map.push(dup);
        let (a, b) = if keep < fresh { (keep, fresh) } else { (fresh, keep) };
        edges.push(Edge { a, b, cost: e.cost });
    }
    let tree = CostGraph {
        nodes: dup_map.len(),
        edges,
    };
    debug_assert!(tree.is_tree());
    Ok(Unrolled {
        tree,
        dup_map,
        original_nodes: g.nodes,
    })
}

/// A tree with all edges directed toward a root, plus BFS layers.
#[derive(Debug, Clone, PartialEq)]
pub struct RootedTree {
    root: usize,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    layer: Vec<usize>,
    /// Cost of the edge `(i, parent(i))`; `None` at the root.
    parent_cost: Vec<Option<PairwiseCost>>,
}

impl RootedTree {
    pub fn root(&self) -> usize {
        self.root
    }

    pub fn node_count(&self) -> usize {
        self.parent.len()
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parent[i]
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    pub fn layer(&self, i: usize) -> usize {
        self.layer[i]
    }

    pub fn layers(&self) -> &[usize] {
        &self.layer
    }

    pub fn parent_cost(&self, i: usize) -> Option<PairwiseCost> {
        self.parent_cost[i]
    }
}

/// Directs every edge of `tree` toward `root`.
pub fn root_tree(tree: &CostGraph, root: usize) -> Result<RootedTree> {
    if root >= tree.nodes {
        return Err(Error::InvalidRoot {
            root,
            nodes: tree.nodes,
        });
    }
    if tree.edges.len() + 1 != tree.nodes {
        return Err(Error::NotATree);
    }
    let bfs = tree.bfs(root);
    if bfs.iter().any(Option::is_none) {
        return Err(Error::NotATree);
    }
    let n = tree.nodes;
    let mut parent = vec![None; n];
    let mut parent_cost = vec![None; n];
    let mut children = vec![Vec::new(); n];
    let mut layer = vec![0; n];
    for (v, s) in bfs.iter().enumerate() {
        let (depth, via) = s.expect("checked above");
        layer[v] = depth;
        if let Some(k) = via {
            let e = tree.edges[k];
            let p = if e.a == v { e.b } else { e.a };
            parent[v] = Some(p);
            parent_cost[v] = Some(e.cost);
            children[p].push(v);
        }
    }
    children.iter_mut().for_each(|c| c.sort_unstable());
    Ok(RootedTree {
        root,
        parent,
        children,
        layer,
        parent_cost,
    })
}

/// Nodes ordered by descending layer, ties by ascending index; the root is last.
pub fn run_order(rt: &RootedTree) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rt.node_count()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(rt.layer[i]), i));
    order
}

/// Sums tree-node potentials back onto the original marginals:
/// `f_i = sum over j with dup_map[j] == i of tree_potentials[j]`.
pub fn recover_duals(tree_potentials: &[PotentialField], dup_map: &[usize]) -> Result<Vec<PotentialField>> {
    if tree_potentials.len() != dup_map.len() {
        return Err(Error::InvalidProblem(format!(
            "{} tree potentials for {} tree nodes",
            tree_potentials.len(),
            dup_map.len()
        )));
    }
    let m = dup_map.iter().copied().max().map_or(0, |x| x + 1);
    let mut out: Vec<Option<PotentialField>> = vec![None; m];
    for (f, &i) in tree_potentials.iter().zip(dup_map) {
        out[i] = Some(match out[i].take() {
            None => f.clone(),
            Some(acc) => acc.add(f)?,
        });
    }
    out.into_iter()
        .enumerate()
        .map(|(i, f)| f.ok_or_else(|| Error::InvalidProblem(format!("no tree node maps to marginal {i}"))))
        .collect()
}
