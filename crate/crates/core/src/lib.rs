//! Timestep-dependent low-rank adaptation for diffusion fine-tuning.

pub mod adapters;
pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod gradnet;
pub mod linalg;
pub mod runner;

pub use error::{Error, Result};
