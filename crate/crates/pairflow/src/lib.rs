//! Learn a semantic edit direction from paired examples on a frozen toy
//! rectified-flow denoiser, then apply, scale, fuse, and compose the edit at
//! inference.

pub mod datagen;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod net;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
