//! Staged hip-fracture detection on synthetic pelvis phantoms.

pub mod augment;
pub mod config;
pub mod error;
pub mod labelloop;
pub mod metrics;
pub mod nnet;
pub mod phantom;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod tensor;
pub mod workflow;

pub use error::{Error, Result};
