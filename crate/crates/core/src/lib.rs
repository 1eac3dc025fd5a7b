//! Stereo image inpainting with geometry-aware attention and iterative
//! cross guidance, on a small reverse-mode autodiff core.

pub mod app;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod gaa;
pub mod gradcheck;
pub mod graph;
pub mod icg;
pub mod layers;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod network;
pub mod pnm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Gradients, ShiftDirection, Var};
pub use mask::BinaryMask;
pub use tensor::{ConvSpec, Tensor};
