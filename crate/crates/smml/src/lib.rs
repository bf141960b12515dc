//! File formats, training driver, evaluation reports and the `smml` CLI on
//! top of [`smml_core`].

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod driver;
pub mod error;
pub mod priors;
pub mod report;

pub use error::{Error, Result};
