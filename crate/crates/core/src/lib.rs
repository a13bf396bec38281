//! Tomographic imaging of shelf-front obstructions from monostatic RFID tag reads.
//!
//! The crate is organised as a pipeline:
//!
//! - [`geometry`]: tag mesh, antennas, image planes, category columns, Fresnel geometry.
//! - [`channel_sim`]: seeded synthetic read streams standing in for reader hardware.
//! - [`preprocess`]: calibration, monitoring buffer, phase and frequency-diversity filters.
//! - [`analytic`]: Fresnel-ellipsoid weight model and the regularised least-squares imager.
//! - [`dnn`]: the fixed six-layer regression network, training, ensembles, checkpoints.
//! - [`multiperson`]: moving-window expansion and merging for several people at once.
//! - [`tracking`]: blob analysis, category popularity and TPR/FPR/MR reports.
//! - [`pipeline`] and [`scenario`]: end-to-end sessions and the synthetic evaluation suite.

// NaN-rejecting `!(x > 0.0)` checks are intentional.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod channel_sim;
pub mod dnn;
pub mod error;
pub mod geometry;
pub mod multiperson;
pub mod pipeline;
pub mod preprocess;
pub mod scenario;
pub mod stats;
pub mod tracking;

pub use error::{Error, Result};

/// Speed of light used throughout, m/s.
pub const SPEED_OF_LIGHT: f64 = 2.998e8;
