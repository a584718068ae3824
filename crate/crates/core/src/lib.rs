pub mod bench;
pub mod checkpoint;
pub mod dsp;
pub mod error;
pub mod fft;
pub mod kernels;
pub mod model;
pub mod ptnsr;
pub mod rng;
pub mod ssd;
pub mod stem;
pub mod synth;
pub mod temporal;
pub mod tensor;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;
