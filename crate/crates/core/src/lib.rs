//! Attribution of in-context demonstrations via influence functions over the
//! kernel ridge regression a transformer implicitly fits to its prompt.
//!
//! The crate is organized bottom-up:
//!
//! - [`linalg`]: dense matrices, Gram matrices, Cholesky solves, random projections.
//! - [`influence`]: ridge fit, gradients, DETAIL scores, and the exact leave-one-out oracle.
//! - [`tasks`]: noisy-demonstration detection, reordering, curation, perturbation sweeps.
//! - [`synth`]: seeded synthetic instances for desk-scale experiments.
//! - [`data_io`]: embedding dumps, manifests, prediction files, result artifacts.

pub mod data_io;
pub mod error;
pub mod influence;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod synth;
pub mod tasks;

pub use error::{Error, ErrorKind, Result};
pub use influence::{
    detail_scores, exact_loo_oracle, fit_ridge, grad_loss, influence_reg, Attributor, IclInstance, RidgeFit, ScoreMode,
    ScoreVector,
};
pub use linalg::{gram, make_projection, project, solve_spd, GramMode, Matrix, Projection};

/// Default λ for test-influence tasks (scoring, curation, perturbation).
pub const DEFAULT_LAMBDA_TEST: f64 = 1.0;
/// Default λ for self-influence noisy-demonstration detection.
pub const DEFAULT_LAMBDA_DETECT: f64 = 1e-9;
/// Default projection width.
pub const DEFAULT_PROJ_DIM: usize = 1000;
