//! Face anonymization by two-stage inpainting GANs.
//!
//! The crate is `no_std` (with `alloc`) so the numeric pieces can be embedded
//! anywhere; file formats, PNG handling and the command line live in the
//! `jagan` companion crate.
//!
//! Layout:
//!
//! - [`preprocess`]: face box squaring, context extraction, paste-back.
//! - [`tensor`], [`graph`], [`nn`], [`optim`]: a small reverse-mode autograd
//!   engine over NCHW `f64` tensors.
//! - [`nets`]: coarse U-Net, fine refinement network, multi-scale image and
//!   video discriminators.
//! - [`losses`]: LSGAN, feature matching, spatially discounted L1, R1.
//! - [`trainer`]: image (TTUR) and video (joint step) training loops.
//! - [`inference`]: single-image and burn-in video anonymization.
//! - [`metrics`]: Fréchet distance (FID/FVD) and the Identity Invariance score.
//! - [`curation`]: IoU tracking, dHash scene-cut filtering, sequence emission.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod curation;
pub mod error;
pub mod graph;
pub mod image;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod nn;
pub mod optim;
pub mod preprocess;
pub mod rng;
pub mod tensor;
pub mod trainer;

mod kernels;
mod math;

pub use error::{Error, Result};
pub use image::{Image, Mask};
pub use preprocess::{BoundingBox, FaceContext};
pub use tensor::Tensor;
