//! Run configuration, artifact persistence, the pipeline stages, and the
//! experiment families built on top of them.

pub mod artifacts;
pub mod config;
pub mod experiments;
pub mod pipeline;

pub use config::RunConfig;
pub use experiments::{run_e0, run_e1, run_e2, run_e3};
