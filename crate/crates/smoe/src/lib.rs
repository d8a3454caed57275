//! File formats, configuration, exports and experiment runs around
//! [`smoe_core`]. The `smoe` binary is a thin command line over this crate.

pub mod checkpoint;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod export;
pub mod run;

pub use error::{Result, SmoeError};
