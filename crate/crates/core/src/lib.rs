//! Blind super-resolution with a kernel-guided diffusion sampler.

pub mod data;
pub mod degrade;
pub mod error;
pub mod harness;
pub mod imageio;
pub mod kernels;
pub mod mcformer;
pub mod metrics;
pub mod rng;
pub mod sample;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::RngHandle;
pub use tensor::{PaddingMode, Tape, Tensor, Var};
