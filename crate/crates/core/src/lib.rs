pub mod au_pipeline;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod expr_ensemble;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod types;
pub mod va_pipeline;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
