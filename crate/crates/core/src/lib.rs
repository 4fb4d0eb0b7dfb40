//! Dual-path self-attention RNN speech enhancement: tensors, autograd,
//! layers, network, training and streaming inference.
//!
//! The crate is `no_std` and needs only `alloc`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod activation;
pub mod audio;
pub mod autograd;
pub mod dualpath;
pub mod error;
pub mod fft;
pub mod kernels;
pub mod nn;
pub mod sarnn;
pub mod stream;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autograd::{LstmCarry, Mode, Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
