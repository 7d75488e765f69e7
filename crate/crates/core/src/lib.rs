//! Tensors, reverse-mode autodiff and adapter lifts for parameter-efficient
//! fine-tuning, with weight updates applied additively or through the
//! elementwise exponential map of the Hadamard group.
//!
//! The crate is `no_std` with `alloc`; file IO, configuration and the command
//! line live in `liera-lab`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod data;
pub mod error;
pub mod format;
pub mod liegroup;
pub mod nn;
pub mod optim;
pub mod peft;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{DType, Shape, Tensor};
