//! Mask-free shadow removal: contrast priors, gated dual-branch attention,
//! a U-Net content restorer and a conditional diffusion detail refiner.

pub mod agba;
pub mod config;
pub mod content_restorer;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod evaluate;
pub mod image;
pub mod io;
pub mod losses;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod priors;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
pub use image::ImageTensor;
