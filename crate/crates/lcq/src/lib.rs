//! File formats, reports and the command-line driver built on `lcq-core`.

pub mod cli;
pub mod error;
pub mod files;
pub mod lcqt;

pub use error::{Error, Result};
