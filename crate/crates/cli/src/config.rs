//! Problem files: `key = value` lines grouped under `[graph]`, `[solver]` and
//! `[output]`. Blank lines and `#` comments are ignored. Nodes are numbered
//! from 1. In `[graph]` the `=` may be left out (`edge 1 2 0.5`).
//!
//! ```text
//! [graph]
//! marginal = 1 blob1.pgm
//! marginal = 2 blob2.pgm
//! edge = 1 2 1.0
//!
//! [solver]
//! max_iters = 200
//! root = cycle
//!
//! [output]
//! dir = out
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mmot::solver::{MapMode, RootMode, SolverConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConfig {
    /// 0-based endpoints and weight.
    pub edges: Vec<(usize, usize, f64)>,
    /// Image path per node, in node order, resolved against the config file.
    pub marginals: Vec<PathBuf>,
    pub solver: SolverConfig,
    /// Relative density floor applied when reading images.
    pub floor: f64,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub history: String,
    pub potential_prefix: String,
    pub write_potentials: bool,
    /// Add a wall-clock column to the history.
    pub timing: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("."),
            history: "history.csv".into(),
            potential_prefix: "potential".into(),
            write_potentials: true,
            timing: false,
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Graph,
    Solver,
    Output,
}

fn err(line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::Parse(format!("line {line}: {msg}"))
}

fn number<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| err(line, format!("bad value '{v}' for {key}")))
}

fn node(line: usize, v: &str) -> Result<usize, CliError> {
    match v.parse::<usize>() {
        Ok(n) if n >= 1 => Ok(n - 1),
        _ => Err(err(line, format!("bad node '{v}' (nodes are numbered from 1)"))),
    }
}

fn flag(line: usize, key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(err(line, format!("bad value '{v}' for {key}"))),
    }
}

/// Parses config text; relative image and output paths are taken relative to
/// `base`.
pub fn parse(text: &str, base: &Path) -> Result<ProblemConfig, CliError> {
    let mut section = Section::None;
    let mut edges = Vec::new();
    let mut marginals: BTreeMap<usize, PathBuf> = BTreeMap::new();
    let mut solver = SolverConfig::default();
    let mut floor = mmot::grid::DEFAULT_FLOOR;
    let mut output = OutputConfig { dir: base.to_path_buf(), ..OutputConfig::default() };

    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = match name.trim() {
                "graph" => Section::Graph,
                "solver" => Section::Solver,
                "output" => Section::Output,
                other => return Err(err(line, format!("unknown section [{other}]"))),
            };
            continue;
        }
        let pair = content.split_once('=').or_else(|| match section {
            Section::Graph => content.split_once(char::is_whitespace),
            _ => None,
        });
        let (key, value) = pair
            .map(|(a, b)| (a.trim(), b.trim()))
            .ok_or_else(|| err(line, "expected key = value"))?;
        match (section, key) {
            (Section::None, _) => return Err(err(line, "setting outside of a section")),
            (Section::Graph, "edge") => {
                let parts: Vec<&str> = value.split_whitespace().collect();
                let [a, b, rest @ ..] = parts.as_slice() else {
                    return Err(err(line, "edge needs two nodes and an optional weight"));
                };
                let w = match rest {
                    [] => 1.0,
                    [w] => number(line, "edge weight", w)?,
                    _ => return Err(err(line, "edge needs two nodes and an optional weight")),
                };
                edges.push((node(line, a)?, node(line, b)?, w));
            }
            (Section::Graph, "marginal") => {
                let (n, path) = value
                    .split_once(char::is_whitespace)
                    .ok_or_else(|| err(line, "marginal needs a node and a path"))?;
                let n = node(line, n.trim())?;
                if marginals.insert(n, base.join(path.trim())).is_some() {
                    return Err(err(line, format!("marginal {} given twice", n + 1)));
                }
            }
            (Section::Solver, "max_iters") => solver.max_iters = number(line, key, value)?,
            (Section::Solver, "tol") | (Section::Solver, "tol_objective") => {
                solver.tol_objective = number(line, key, value)?
            }
            (Section::Solver, "tol_residual") => solver.tol_residual = number(line, key, value)?,
            (Section::Solver, "sigma0") => solver.sigma0 = Some(number(line, key, value)?),
            (Section::Solver, "armijo_slope") => solver.armijo_slope = number(line, key, value)?,
            (Section::Solver, "shrink") => solver.shrink = number(line, key, value)?,
            (Section::Solver, "grow") => solver.grow = number(line, key, value)?,
            (Section::Solver, "max_backtracks") => solver.max_backtracks = number(line, key, value)?,
            (Section::Solver, "floor") => floor = number(line, key, value)?,
            (Section::Solver, "root") => {
                solver.root_mode = if value == "cycle" {
                    RootMode::Cycle
                } else {
                    RootMode::Fixed(node(line, value)?)
                }
            }
            (Section::Solver, "map") => {
                solver.map_mode = match value {
                    "bilinear" => MapMode::Bilinear,
                    "nearest" => MapMode::Nearest,
                    "argmin" => MapMode::Argmin,
                    _ => return Err(err(line, format!("unknown map '{value}'"))),
                }
            }
            (Section::Output, "dir") => output.dir = base.join(value),
            (Section::Output, "history") => output.history = value.to_string(),
            (Section::Output, "potentials") => output.potential_prefix = value.to_string(),
            (Section::Output, "write_potentials") => output.write_potentials = flag(line, key, value)?,
            (Section::Output, "timing") => output.timing = flag(line, key, value)?,
            (_, key) => return Err(err(line, format!("unknown key '{key}'"))),
        }
    }

    let count = marginals.len();
    if count < 2 {
        return Err(CliError::Parse("at least two marginals are required".into()));
    }
    if let Some(n) = marginals.keys().enumerate().find_map(|(i, &n)| (i != n).then_some(n)) {
        return Err(CliError::Parse(format!(
            "marginals must be numbered 1..{count} without gaps (found {})",
            n + 1
        )));
    }
    if let Some(&(a, b, _)) = edges.iter().find(|&&(a, b, _)| a >= count || b >= count) {
        return Err(CliError::Parse(format!("edge {}-{} refers to a node without a marginal", a + 1, b + 1)));
    }
    if !(floor.is_finite() && floor >= 0.0) {
        return Err(CliError::Parse(format!("floor must be nonnegative, got {floor}")));
    }
    Ok(ProblemConfig {
        edges,
        marginals: marginals.into_values().collect(),
        solver,
        floor,
        output,
    })
}
