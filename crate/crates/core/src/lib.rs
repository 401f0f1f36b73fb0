//! Budget-aware compression of a trained network for an edge device, and
//! distillation of the compressed student with an early-halted trainee.

pub mod arch;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod par;
pub mod resource;
pub mod checkpoint;
pub mod metrics;
pub mod training;
pub mod dropout;
pub mod compress;
pub mod distill;
pub mod pipeline;
pub mod config;

pub use error::{Error, Result};
