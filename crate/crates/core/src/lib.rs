//! Wavelet-based feature enhancement network for face super-resolution.
//!
//! The crate is `no_std` (with `alloc`) and carries the whole numerical stack:
//!
//! * [`tensor`]: dense tensors and a tape-based reverse-mode differentiation graph
//! * [`wavelet`]: exact single-level Haar 2D-DWT / IDWT
//! * [`nn`]: parameter store, initialization, convolution / norm / residual / feed-forward layers
//! * [`fdt`]: regional (window) and global (channel) ReLU attention, and the full-domain block
//! * [`wfen`]: wavelet feature downsample / upgrade and the encoder-decoder model
//! * [`train`]: L1 loss, Adam, bicubic degradation, synthetic faces and the training loop
//! * [`metrics`]: PSNR and SSIM
//! * [`gradsuite`]: finite-difference gradient checks of every layer type
//!
//! File formats, the command line and anything touching the OS live in the
//! companion `wfen` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod fdt;
pub mod gradsuite;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod wavelet;
pub mod wfen;

pub use error::{Error, Result};
pub use image::ImageBuffer;
pub use tensor::{Graph, Real, Tensor, Var};
