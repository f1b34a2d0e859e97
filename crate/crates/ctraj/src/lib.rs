//! Continuous-time trajectory estimation on SE(2).
//!
//! The crate provides three interchangeable continuous-time state
//! representations — generalized linear interpolation, temporal B-splines on
//! Lie groups, and exactly-sparse temporal Gaussian processes — behind a
//! common factor-graph nonlinear least-squares solver, together with a seeded
//! 2D simulator and a CLI front end for localization experiments.

pub mod cli;
pub mod error;
pub mod estimator;
pub mod factors;
pub mod gp;
pub mod io;
pub mod manifold;
pub mod sim;
pub mod solver;
pub mod spline;

pub use error::{Error, Result};
