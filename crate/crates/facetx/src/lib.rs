//! Std companion to `facetx-core`: file formats, dataset directories, the
//! training driver and the `facetx` command line.

pub mod cli;
pub mod commands;
pub mod dataset;
pub mod error;
pub mod io;
pub mod train;

pub use error::{exit, CliError, Result};
