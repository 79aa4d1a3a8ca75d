//! Differentiable loss layers for image restoration networks.
//!
//! The crate bundles everything needed to train a small fully-convolutional
//! restoration network with perceptually motivated losses and to score the
//! result:
//!
//! - [`image`]: float image container, PGM/PPM/PFM I/O and patch extraction.
//! - [`filter`]: Gaussian kernels, separable filtering and local moments.
//! - [`loss`]: L1, L2, SSIM, MS-SSIM and Mix losses with analytic gradients,
//!   plus a central finite-difference oracle.
//! - [`metrics`]: full-reference quality indices (PSNR, SSIM, MS-SSIM, GMSD)
//!   and corpus reports.
//! - [`pipeline`]: noise, Bayer mosaicking, resampling and dataset assembly.
//! - [`gradcheck`]: finite-difference checks of loss and network gradients.
//! - [`network`]: conv + PReLU network with hand-written backpropagation and
//!   an SGD trainer.
//!
//! All arithmetic is done in `f64`.

pub mod error;
pub mod filter;
pub mod gradcheck;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod pipeline;

pub use error::{Error, Result};
pub use image::ImageBuffer;
