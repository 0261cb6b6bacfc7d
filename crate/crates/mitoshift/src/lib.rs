//! File formats, dataset IO and the command-line workflow around
//! [`mitoshift_core`]: PNG patches, manifests, embedding files, checkpoints,
//! stain reference files and the run configuration.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

pub use config::RunConfig;
pub use error::{Error, Result};
