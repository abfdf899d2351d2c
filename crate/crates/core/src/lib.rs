pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod process;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
