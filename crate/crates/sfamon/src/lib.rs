//! Two-level monitoring of large closed-loop processes built on slow feature
//! analysis.
//!
//! The pipeline, end to end:
//!
//! 1. [`data`] loads and standardizes a training matrix.
//! 2. [`ssfa`] extracts sparse slow loadings via an elastic-net regression
//!    form of SFA, solved by the LARS path solver in [`larsen`].
//! 3. [`partition`] groups variables into statically-and-dynamically related
//!    subsets using the first sparse loading plus a signed-rank slowness test.
//! 4. [`sfa`] fits a full slow feature model per subset and splits features
//!    into system (slow) and residual (fast) parts.
//! 5. [`ksfa`] fits a kernel SFA over the subset-level system features plus
//!    leftover variables, giving a plant-wide nonlinear model.
//! 6. [`limits`] estimates kernel-density control limits for the T2/D2
//!    statistics, and [`monitor`] runs the online verdict policy that tells
//!    faults apart from operating-condition changes.
//!
//! [`simgen`] generates closed-loop benchmark data and [`config`] holds the
//! run configuration shared by the CLI and the library.

pub mod config;
pub mod data;
pub mod error;
pub mod ksfa;
pub mod larsen;
pub mod limits;
mod linalg;
pub mod monitor;
pub mod partition;
pub mod sfa;
pub mod simgen;
pub mod ssfa;

pub use error::{Error, Result};
