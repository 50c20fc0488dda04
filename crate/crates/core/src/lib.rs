//! Virtual power plant aggregation toolkit.
//!
//! DER flexibility is described by ensembles of daily (mean, variance) load
//! shapes. The crate reduces those ensembles to their convex-hull vertices,
//! sizes device partitions with a mean-variance quadratic program under
//! layered or centralized aggregation constraints, compares the resulting
//! hourly performance envelopes, and simulates day-by-day power tracking
//! with a low-pass adaptive model of the fleet response.

pub mod dispatch;
pub mod ensemble;
pub mod envelope;
pub mod error;
pub mod hull;
pub mod linalg;
pub mod lsq;
pub mod qp;
pub mod scenario;
pub mod tracking;

pub use error::{Error, Result};
