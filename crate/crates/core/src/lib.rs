//! Desk-scale laboratory for zero-shot attribute editing with diffusion
//! models.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`]: tensors on a reverse-mode tape, parameters, optimisers.
//! * [`schedule`]: noise-schedule arithmetic and the shift-cancellation
//!   coefficients of a symmetric noise perturbation.
//! * [`diffusion`]: forward diffusion, DDIM/DDPM steps, the asymmetric
//!   injected step, inversion, trajectory sampling.
//! * [`unet`]: the small ε-predicting U-Net with a bottleneck tap.
//! * [`toyworld`]: procedural faces, detectors, frozen embedders, the
//!   conditional reference sampler and Gaussian-mixture substrates.
//! * [`zip`]: prompts, the directional loss, the attribute encoder and
//!   the end-to-end edit.
//! * [`metrics`]: Inception-score, Fréchet distance and CLIP-score analogues.

pub mod diffusion;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod toyworld;
pub mod unet;
pub mod zip;

pub use error::{Error, Result};
pub use tensor::Tensor;
