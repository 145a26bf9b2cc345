//! File formats, threading, and the command-line front end for
//! `tabdiff-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod export;
pub mod parallel;
pub mod table;

pub use error::{CliError, Result};
