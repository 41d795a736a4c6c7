//! Pseudo-CBCT simulation, latent diffusion correction and evaluation.

pub mod checkpoint;
pub mod codec;
pub mod degrade;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod seeding;
pub mod tomography;

pub use error::{Error, Result};
pub use image::{Image, Volume};
