//! Core algorithms for ultrasound-derived pseudo-CT synthesis.
//!
//! Everything in this crate is pure computation over in-memory buffers:
//! volume geometry and resampling, landmark similarity registration,
//! ROI/field-of-view preprocessing, a reverse-mode autodiff tensor engine,
//! the BT-ResUNet3D generator and PatchGAN discriminator, the adversarial
//! training loop, and PSNR/SSIM evaluation. File formats and the CLI live
//! in the companion `udpct` crate.
//!
//! The crate is `no_std`-compatible (`alloc` required); the default `std`
//! and `parallel` features enable rayon-backed convolution kernels.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod gan;
pub mod generator;
pub mod metrics;
pub mod register;
pub mod roi;
pub mod tensor;
pub mod vol;

pub use vol::{BinaryMask, Volume};
