//! Online density estimation for heterogeneous cell populations.
//!
//! Cells follow a single-cell ODE and only some coordinates are observed in
//! population snapshots. The crate reconstructs the full number density
//! function with two estimators:
//!
//! - [`charest`]: the characteristics-based estimator, which propagates
//!   sampled candidate cells with sigma points and combines them with the
//!   measured output density through Gaussian mixtures;
//! - [`gridpf`]: a bootstrap particle filter over a finite-volume
//!   discretization of the population balance equation, used as baseline.
//!
//! [`reference`] produces ground truth by the method of characteristics and
//! synthetic snapshot data, [`metrics`] scores estimates, and [`experiment`]
//! runs complete benchmarks and writes their result files.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod charest;
pub mod error;
pub mod experiment;
pub mod gmd;
pub mod gridpf;
pub mod metrics;
pub mod models;
pub mod ode;
pub mod plot;
pub mod reference;
pub mod rng;
mod serde_vecs;

pub use error::{Error, Result};
