//! Bias correction for diffusion samplers by latent-space Gaussian mixture
//! localization.
//!
//! The crate works on a known, labeled Gaussian-mixture population so every
//! stage has closed-form ground truth:
//!
//! * [`population`] defines the labeled data distribution and its
//!   Bayes-optimal attribute classifier.
//! * [`diffusion`] holds the noise schedule, the exact mixture denoiser and
//!   the reverse sampler.
//! * [`gmm`] fits Gaussian mixtures with expectation-maximization.
//! * [`localization`] ranks fitted mixtures by KL separability and maps them
//!   onto attributes.
//! * [`corrector`] calibrates a mixture on reverse-process latents and
//!   resamples with equal per-component quotas.
//! * [`metrics`] measures class proportions, bias and Fréchet distances.
//! * [`harness`] wires the stages into config-driven experiment commands.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod corrector;
pub mod diffusion;
pub mod error;
pub mod gmm;
pub mod harness;
pub mod linalg;
pub mod localization;
pub mod metrics;
pub mod population;
pub mod rng;
pub mod selftest;

pub use error::{Error, Result};
