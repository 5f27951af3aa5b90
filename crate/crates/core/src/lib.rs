//! Switchable and dynamic proposal counts for small proposal-based detectors.
//!
//! One parameter set serves several proposal budgets `{N/θ, 2N/θ, .., N}`;
//! an object-count estimator picks the budget per image. The crate carries
//! everything needed to train and measure that at desk scale: a tape
//! autodiff engine, box geometry, Hungarian matching, toy query-based and
//! two-stage detectors, the training losses, a synthetic scene generator,
//! and AP/latency evaluation.

pub mod autodiff;
pub mod data;
pub mod detector;
pub mod eval;
pub mod exec;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod matcher;
pub mod proposals;
pub mod rng;
pub mod tensor;
pub mod train;

pub mod cli;

pub use autodiff::{Graph, Var};
pub use geometry::BBox;
pub use tensor::{Tensor, TensorError};
