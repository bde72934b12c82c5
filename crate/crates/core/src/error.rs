use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid dimensions must be at least 2x2, got {nx}x{ny}")]
    GridTooSmall { nx: usize, ny: usize },

    #[error("field has {got} values but the grid has {expected} cells")]
    LengthMismatch { expected: usize, got: usize },

    #[error("fields live on different grids: {a:?} vs {b:?}")]
    GridMismatch { a: (usize, usize), b: (usize, usize) },

    #[error("image is all zero and no floor was requested")]
    AllZeroInput,

    #[error("invalid density: {0}")]
    InvalidDensity(String),

    #[error("potential contains a non-finite value at cell {0}")]
    NonFinitePotential(usize),

    #[error("cost weight must be positive and finite, got {0}")]
    NonpositiveWeight(f64),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("graph is not connected")]
    DisconnectedGraph,

    #[error("graph is not a tree")]
    NotATree,

    #[error("root {root} is not a node of a {nodes}-node tree")]
    InvalidRoot { root: usize, nodes: usize },

    #[error("node {0} is the root and has no net potential")]
    RootHasNoNetPotential(usize),

    #[error("net potential of child {child} is not available when updating node {node}")]
    ChildNotReady { node: usize, child: usize },

    #[error("problem is inconsistent: {0}")]
    InvalidProblem(String),

    #[error("bad barycenter weights: {0}")]
    BadWeights(String),

    #[error("LP too large: {tuples} tuples exceeds the cap of {cap}")]
    TooLarge { tuples: usize, cap: usize },

    #[error("LP failed: {0}")]
    LpFailure(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
