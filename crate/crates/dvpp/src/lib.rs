//! Design and verification toolkit for dynamic virtual power plants (DVPPs).
//!
//! The crate disaggregates a desired aggregate frequency/voltage behavior into
//! per-device dynamic participation factors, synthesizes per-device LPV H-infinity
//! matching controllers from vertex linear matrix inequalities, adapts
//! participation gains to time-varying device capacities, and simulates the
//! resulting closed loops on linearized device models.

pub mod adpf;
pub mod alloc;
pub mod cli;
pub mod config;
pub mod error;
pub mod lintf;
pub mod lpv;
pub mod plant;
pub mod fleet;
pub mod sdp;
pub mod sim;
pub mod strategy;
pub mod synth;

use openblas_src as _; // links the system BLAS/LAPACK used by the SDP solver

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
