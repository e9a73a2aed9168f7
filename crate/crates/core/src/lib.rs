//! Token-entropy analytics, the cumulative-entropy-regulated reward and a
//! GRPO trainer for a tiny autoregressive policy on modular-arithmetic
//! chains.

pub mod checkpoint;
pub mod config;
pub mod entropy;
pub mod error;
pub mod grpo;
pub mod model;
pub mod optim;
pub mod report;
pub mod reward;
pub mod task;
pub mod telemetry;
pub mod traces;
pub mod warmstart;

pub use error::{Error, Result};
