//! Perpendicular 2D diffusion priors for 3D inverse problems.
//!
//! Two slice-wise score models, one for each of two perpendicular slicing
//! directions, are combined during reverse diffusion to reconstruct or
//! generate volumes without ever training a 3D network.

pub mod container;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod operators;
pub mod pgm;
pub mod phantom;
pub mod rng;
pub mod sampler;
pub mod score;
pub mod sde;
pub mod volume;

pub use error::{Error, Result};
