//! Natural-gradient optimization that preconditions matrix-shaped parameters
//! with Gram matrices of their own gradients.
//!
//! For a weight matrix the curvature proxy is either the left Gram
//! `(1/N) sum G_i G_i^T` or the right Gram `(1/N) sum G_i^T G_i` of per-sample
//! gradients, whichever side is smaller. Directions are damped solves
//! `-(lambda I + L)^-1 G` with several interchangeable solver paths: a dense
//! Cholesky route, a low-rank Woodbury route, a sketched least-squares route,
//! and a block-diagonal route. On top of that sit a small training loop with
//! step-size and damping schedules, baseline optimizers for comparison, an
//! online variant with logarithmic-regret instrumentation, and a batch
//! experiment harness used by the `ngplus` command-line binary.

pub mod curvature;
pub mod direction;
pub mod error;
pub mod gradients;
pub mod harness;
pub mod linalg;
pub mod online;
pub mod optimizer;
pub mod schedule;

pub use error::{Error, Result};
pub use linalg::Mat;
