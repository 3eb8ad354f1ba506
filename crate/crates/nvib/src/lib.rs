//! Desk-scale tooling around [`nvib_core`]: corpus loading, the training
//! loop, checkpoints, attention exports and heatmaps, and the `nvib` CLI.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod corpus;
mod error;
pub mod harness;
pub mod plot;
pub mod train;

pub use error::{Error, Result};
pub use nvib_core as core;
