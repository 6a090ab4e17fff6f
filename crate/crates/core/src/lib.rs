//! Deformable 3D image registration with a windowed-attention encoder, a
//! pixel-shuffle superresolution decoder and a from-scratch reverse-mode
//! differentiation engine.

pub mod battery;
pub mod blocks;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod volume;
pub mod warp;
pub mod windowing;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Tensor, TensorError, Var};
