//! File formats, checkpoints and the command-line driver around
//! `csiqa-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pnm;

pub use error::{Error, Result};
