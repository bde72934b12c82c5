//! Multimarginal optimal transport with pairwise quadratic costs on 2D grids.

pub mod barycenter;
pub mod cost_graph;
pub mod error;
pub mod grid;
pub mod io;
pub mod oracle;
pub mod poisson;
pub mod scenarios;
pub mod solver;
pub mod transforms;
pub mod validate;

pub use error::{Error, Result};
