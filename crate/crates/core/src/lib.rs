//! Variational reconstruction of multi-channel images from several data
//! channels with squared-norm or Kullback-Leibler discrepancies, coupled
//! through a joint regularizer (TGV², joint wavelet sparsity, or a quadratic
//! penalty), solved with a first-order primal-dual iteration.

pub mod coupling;
pub mod diffops;
pub mod discrepancy;
pub mod error;
pub mod forward;
pub mod grid;
pub mod io;
pub mod problem;
pub mod rates;
pub mod solver;

pub use error::{Error, Result};
pub use grid::{Coupling, Grid, MultiImage, SymTensorField, VectorField};
pub use problem::{ChannelSpec, DiscrepancyKind, Problem, ProblemSpec, Regularizer};
pub use solver::{solve, SolveOutput, Solver, SolverConfig, StepPolicy};
