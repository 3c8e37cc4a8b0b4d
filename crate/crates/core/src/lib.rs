//! Probabilistic degradation modelling for unpaired super-resolution.

mod macros;

pub mod adversarial;
pub mod apply;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod degrade;
pub mod error;
pub mod eval;
pub mod image;
pub mod kernel_gen;
pub mod metrics;
pub mod noise_gen;
pub mod rng;
pub mod sr;
pub mod trainer;
pub mod synth;

pub use error::{PdmError, Result};
pub use image::ImagePlane;
