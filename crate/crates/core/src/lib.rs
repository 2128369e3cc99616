pub mod anomaly;
pub mod detector;
pub mod embedder;
pub mod error;
pub mod graph_model;
pub mod harness;
pub mod numerics;
pub mod pipeline;
pub mod simulator;

pub use error::{GuardianError, Result};
