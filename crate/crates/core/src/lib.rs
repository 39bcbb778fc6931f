//! Paired conditional diffusion for cross-modality 3D volume translation.
//!
//! Two conditional denoising diffusion models, one per modality, are trained
//! on co-registered volume pairs. During joint training and during sampling
//! they exchange reverse latent codes: the standardized residual between a
//! less-noisy volume and the model's predicted mean on one side is re-injected
//! as the sampling noise on the other side, which couples the two reverse
//! processes and pins down the anatomy of the synthesized volume.
//!
//! The crate is `no_std`-compatible (with `alloc`); everything in here is pure
//! compute. File formats, configuration, and the command-line front end live
//! in the companion `cyclediff` crate.
//!
//! Module map:
//! - [`tensor`], [`autodiff`], [`optim`], [`gradcheck`]: dense tensors,
//!   reverse-mode differentiation, and the decoupled-weight-decay optimizer.
//! - [`schedule`], [`diffusion`], [`loss`], [`sampler`]: noise schedules,
//!   forward/reverse process math, hybrid + cycle losses, and the three
//!   samplers (cycle-guided, ancestral, implicit).
//! - [`denoiser`]: the conditional 3D U-shaped network with windowed
//!   self-attention.
//! - [`volume`], [`phantom`]: volume type, normalization, and the paired
//!   phantom generator.
//! - [`window`]: sliding-window planning, Gaussian blending, stitching.
//! - [`metrics`]: MAE / PSNR / multi-scale SSIM and Monte-Carlo consistency.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod phantom;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod volume;
pub mod window;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
