//! Calibration-optimal basis selection for computer models with
//! high-dimensional output.
//!
//! The crate provides weighted-norm basis linear algebra, the optimal
//! rotation algorithm, Gaussian-process emulation of basis coefficients,
//! history matching with iterative refocussing, and an idealised spatial
//! test model for end-to-end verification.

pub mod basis;
pub mod calibration;
pub mod emulator;
pub mod ensemble;
pub mod error;
pub mod io;
pub mod rotation;
pub mod toy;
pub mod weight;
pub mod wsvd;

pub use basis::Basis;
pub use ensemble::Ensemble;
pub use error::{CalError, Result};
pub use weight::WeightMatrix;
