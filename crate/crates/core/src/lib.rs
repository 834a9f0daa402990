//! Gated low-rank fine-tuning for patch-based time-series transformers.

pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod error;
pub mod experiment;
pub mod heads;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pruner;
pub mod rng;
pub mod shapley;
pub mod train;

pub use error::{Error, Result};
