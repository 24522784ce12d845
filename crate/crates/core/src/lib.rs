//! Solid texture synthesis from 2D exemplars.

pub mod container;
pub mod descriptor;
pub mod diagnostics;
pub mod error;
pub mod export;
pub mod generator;
pub mod image;
pub mod noise;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use generator::{
    build, generate_region, generate_tiled, GeneratorConfig, GeneratorModel, RegionRequest, SolidTexture,
};
pub use noise::{margin_table, noise_extents, shift_schedule, MarginTable, NoiseSpec, ShiftSchedule};
pub use tensor::{GradTape, Tensor4};
