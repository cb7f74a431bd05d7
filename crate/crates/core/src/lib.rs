//! Numerical laboratory for two-layer linear convolutional networks.
//!
//! The crate simulates per-sample gradient descent on a linear CNN
//! `ŷ = W·dbc(K)·x` and a linear fully connected baseline, tracks how the
//! network picks up the SVD modes of the input-output correlation, and
//! compares the result against closed-form sigmoid predictions and the
//! reduced winner-takes-all equations for the kernel spectrum.
//!
//! Module overview:
//!
//! - [`spectral`]: vec-2D DFT, frequency indexing, conjugate symmetry.
//! - [`convops`]: circular convolution, correlation and dbc matrices.
//! - [`datasets`]: generators, correlation statistics, SVD structure, file IO.
//! - [`models`]: CNN and FCNN state, gradients, trainers, checkpoints.
//! - [`dynamics`]: analytic trajectories, WTA integration, diagnostics.
//! - [`harness`]: experiment configs, multi-trial runs, CSV/JSON/SVG output.

pub mod convops;
pub mod datasets;
pub mod dynamics;
mod error;
pub mod harness;
pub mod models;
pub mod spectral;

pub use error::{LabError, Result};
