//! File formats, experiment pipelines and the `bootifol` command line on
//! top of `bootifol-core`.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod settings;

pub use error::{Error, Result};
