//! Training and diagnostics engine for differentially private conditional
//! diffusion models with bounded AdaLN conditioning.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`rng`], [`autodiff`]: dense tensors, counter-based random
//!   streams, and a reverse-mode tape with a finite-difference oracle.
//! - [`model`]: the conditional denoiser with DP-aware bounded modulation.
//! - [`diffusion`], [`data`]: DDPM schedule, loss and sampler, plus the
//!   windowed time-series datasets and observation masks.
//! - [`dp`], [`train`]: per-example clipping, noisy aggregation, and the
//!   matched-stream training loops.
//! - [`sensitivity`], [`diagnostics`], [`metrics`]: analytic sensitivity
//!   bounds, gradient-tail diagnostics, and evaluation metrics.

pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod diffusion;
pub mod dp;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sensitivity;
pub mod tensor;
pub mod train;

pub use error::{CoreError, Result};
