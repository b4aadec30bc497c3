//! FINO: joint image-and-noise modeling with an invertible flow network,
//! for image denoising.
//!
//! The flow maps an image to a latent code split into a clean part and a
//! noise part. Training swaps the noise parts of a clean/noisy pair so the
//! clean codes are forced to agree; denoising keeps the clean code of a
//! noisy image and decodes it together with a fresh Gaussian noise code.
//!
//! Module map:
//! - [`tensor`], [`tape`], [`kernels`], [`ops`], [`optim`], [`rng`]: dense
//!   f64 tensors, reverse-mode autodiff, the conv/wavelet/patch kernels,
//!   ADAM, and seeded randomness.
//! - [`flow`]: the invertible network (wavelet squeeze + affine coupling),
//!   latent splitting and swapping, checkpoints ([`ckpt`]).
//! - [`objective`]: the four training losses and their weighting.
//! - [`data`], [`metrics`], [`infer`]: images and noise synthesis,
//!   PSNR/SSIM, inference-time denoising.
//! - [`trainer`]: the training loop, config files, logs, resume.

pub mod ckpt;
pub mod data;
pub mod error;
pub mod flow;
pub mod infer;
pub mod kernels;
pub mod metrics;
pub mod objective;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{FinoError, Result};
pub use tensor::Tensor;
