//! Multimodal flow-matching channel estimation: scene and channel
//! simulation, classical estimators, the perception encoder, the
//! conditional flow-matching transformer and the evaluation harness.

pub mod config;
pub mod error;
pub mod estimators;
pub mod generator;
pub mod harness;
pub mod perception;
pub mod rng;
pub mod simulator;

pub use error::{Error, Result};
