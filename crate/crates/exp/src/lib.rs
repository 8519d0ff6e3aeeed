//! Experiment runner for pinnx: TOML-configured reference generation,
//! multi-seed training, transfer learning, tables, plots and timings.

pub mod config;
pub mod error;
pub mod figures;
pub mod plot;
pub mod rundir;
pub mod runner;
pub mod table;
pub mod timing;

pub use error::{ExpError, Result};
