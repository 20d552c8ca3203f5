//! Flow-based generative modeling of discrete sequences on the product sphere
//! `(S^{d-1})^L`.
//!
//! Tokens are embedded as unit vectors and corrupted by a conditional noise
//! process per position. The von Mises-Fisher path is the centerpiece: its
//! conditional score is closed-form (`kappa * P_x(w)`) and its conditional
//! velocity is the unique bounded solution of a scalar ODE in the cosine
//! similarity, tabulated once over a `(cosine, concentration)` grid and read
//! back by bilinear interpolation. Geodesic interpolation and the Euclidean
//! VP/VE paths are provided for comparison.
//!
//! The per-position posterior over the vocabulary is the single learned (or,
//! at desk scale, exactly enumerated) object; marginal velocity, marginal
//! score, and the SDE drift are all posterior-weighted tangent sums that
//! differ only in scalar weights.
//!
//! Module map:
//! - [`geometry`]: extrinsic sphere primitives (projection, retraction, slerp).
//! - [`vmf`]: Bessel ratio, radial density, velocity-scalar and radial-CDF
//!   tables, vMF sampling.
//! - [`paths`]: the four conditional noise processes.
//! - [`schedule`]: linear concentration schedule and the learned piecewise
//!   linear time warp.
//! - [`posterior`]: softmax decoder head, exact Bayes oracle, tiny trainable
//!   backbone with analytic gradients.
//! - [`field`]: marginal velocity / score / SDE drift assembly.
//! - [`sampler`]: Euler predictor, Langevin corrector, PC and SDE loops,
//!   decoding, clue pinning.
//! - [`train`]: cross-entropy training loop and synthetic task generators.
//! - [`sudoku`]: mini 4x4 Sudoku task with validity checking.
//! - [`diag`]: runnable numerical diagnostics (ODE residuals, transport and
//!   stationarity tests, score finite differences, sampler TV).

// index loops over parallel grids/buffers dominate the numeric kernels and
// read better than zipped iterators there
#![allow(clippy::needless_range_loop)]

pub mod diag;
pub mod field;
pub mod geometry;
pub mod paths;
pub mod posterior;
pub mod sampler;
pub mod schedule;
pub mod sudoku;
pub mod train;
pub mod vmf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate retraction: |x + step| = {norm:.3e} is below 1e-12")]
    DegenerateRetraction { norm: f64 },
    #[error("antipodal points: geodesic is not unique (angle {angle} rad)")]
    AntipodalPoints { angle: f64 },
    #[error("Bessel-ratio continued fraction did not converge (d={d}, kappa={kappa})")]
    NoConvergence { d: usize, kappa: f64 },
    #[error("table build failed: {0}")]
    TableBuild(String),
    #[error("time singularity: t={t} exceeds the VP cap {cap}")]
    TimeSingularity { t: f64, cap: f64 },
    #[error("score is unavailable for the {kind} path")]
    ScoreUnavailable { kind: &'static str },
    #[error("progress variable is unavailable for the {kind} path")]
    ProgressUnavailable { kind: &'static str },
    #[error("oracle instance too large: N^L = {size} exceeds {bound}")]
    InstanceTooLarge { size: u128, bound: u128 },
    #[error("embedding row {row} has norm below 1e-12")]
    ZeroEmbedding { row: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
