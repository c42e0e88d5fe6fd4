//! Command-line driver, file formats and parallel emulation on top of
//! `hjb-core`.

pub mod cli;
pub mod config;
pub mod emulate;
pub mod error;
pub mod format;
pub mod manifest;

pub use error::{CliError, FormatError};
