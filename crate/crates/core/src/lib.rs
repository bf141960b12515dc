//! Masked dual-branch mutual learning for incomplete multi-modal volumetric
//! segmentation.
//!
//! The crate is `no_std` + `alloc`; enabling the default `std` feature only
//! turns on runtime CPU dispatch in the GEMM kernels and `std::error::Error`
//! impls. Everything that touches the filesystem lives in the `smml` crate.
//!
//! Tensors are dense row-major `f64` buffers. Volumes are laid out as
//! `[channels, H, W, Z]` with `Z` varying fastest.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod autograd;
pub mod backbone;
pub mod error;
pub mod eval;
pub mod hcc;
pub mod masking;
pub mod objective;
pub mod phantom;
pub mod rng;
pub mod srn;
pub mod tensor;

mod conv;

pub use error::{Error, Result};
pub use masking::ModalityMask;
pub use tensor::{Dims3, LabelVolume, Tensor};
