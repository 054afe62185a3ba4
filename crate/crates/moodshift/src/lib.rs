//! File formats, checkpoints, reports and the `moodshift` command line on
//! top of `moodshift-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod ingest;
pub mod manifest;
pub mod render;
pub mod report;
pub mod runs;

pub use error::{AppError, ErrorKind, Result};
