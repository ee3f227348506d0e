//! Multi-stage high-resolution single-image synthesis.

pub mod autograd;
pub mod erf_probe;
pub mod error;
pub mod global_generator;
pub mod harness;
pub mod image_tensor;
pub mod kernels;
pub mod memory_planner;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod par;
pub mod pyramid;
pub mod resample;
pub mod srnet;
pub mod synthetic;
pub mod tensor;
pub mod tiler;

pub use error::{Error, Result};
pub use image_tensor::ImageTensor;
pub use tensor::{Shape, Tensor};
