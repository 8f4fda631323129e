//! Boundary-noise linear quadratic control of the heat equation on the
//! half-line, discretized on a truncated graded mesh in weighted L² spaces.
//!
//! The crate is organized around five layers:
//!
//! * [`space`] — the discrete weighted space: grid, weight, quadrature,
//!   Gram algebra and the orthonormalizing change of coordinates.
//! * [`operators`] — the Dirichlet Laplacian, its semigroup (kernel
//!   quadrature and spectral matrix exponential), fractional powers,
//!   the Dirichlet map and boundary actuation vectors, and regularity
//!   diagnostics.
//! * [`stochastic`] — reproducible counter-keyed Brownian drivers and the
//!   exponential-Euler integrator for the mild state equation, open and
//!   closed loop.
//! * [`riccati`] — two independent solvers for the backward operator
//!   Riccati equation (RK4 on the differential form, Picard on the mild
//!   form) with the feedback gain and the noise trace integral.
//! * [`lq`] — cost evaluation, value function, the fundamental cost
//!   identity and optimality comparisons tying everything together.
//!
//! The `heatctl` binary exposes the experiment harness; see [`config`]
//! and [`report`] for the file formats.

pub mod config;
pub mod lq;
pub mod operators;
pub mod report;
pub mod riccati;
pub mod space;
pub mod stochastic;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("operands live on different grids")]
    GridMismatch,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("simulation produced a non-finite state at step {step}")]
    Simulation { step: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Maps path indices through `f`, in parallel when the `parallel`
/// feature is enabled. Output order is always the index order, so
/// downstream reductions are schedule-independent.
#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<T, F: Fn(usize) -> T>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}
