//! Calibration of a discrete-time diffusion to vanilla option prices by
//! entropic (specific relative entropy) optimal transport, solved with
//! block-coordinate Sinkhorn sweeps on a truncated lattice.

pub mod accel;
pub mod diagnostics;
pub mod discretization;
pub mod dual;
pub mod error;
pub mod market;
pub mod numerics;
#[cfg(feature = "oracle")]
pub mod oracle;
pub mod solver;

pub use error::{Result, SmotError};
