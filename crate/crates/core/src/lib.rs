//! Operator inference for reduced-order models.
//!
//! The crate covers the full offline/online pipeline:
//!
//! * [`fom`]: full-order simulators (periodic Burgers, 2D nonlinear heat) that
//!   record states together with their exact right-hand sides.
//! * [`reduction`]: POD bases, projection, derivative estimation, max-abs
//!   scaling and train/validation splits.
//! * [`polyopinf`]: polynomial operator inference (`c`, `A`, `H` blocks) fit by
//!   Tikhonov-regularized least squares, plus regularization search and
//!   lattice interpolation.
//! * [`neural`]: a small dense ReLU network with hand-written reverse mode
//!   (parameters, inputs, and directional derivatives).
//! * [`operators`]: structured operator blocks (standard, matrix, SPSD, skew,
//!   vector, SPSD potential) composed additively into a reduced model.
//! * [`training`]: loss, ADAM, L-BFGS with a strong-Wolfe line search, the
//!   interleaved hybrid schedule and ensembles.
//! * [`romeval`]: reduced time integration, Galerkin baseline, error metric
//!   and energy diagnostics.
//! * [`costmodel`]: analytical evaluation and training FLOP estimates.

pub mod binio;
pub mod costmodel;
pub mod error;
pub mod fom;
pub mod neural;
pub mod operators;
pub mod polyopinf;
pub mod reduction;
pub mod romeval;
pub mod training;

pub use error::{Error, Result};
