//! Perception-conditioned weather restoration with a terminal-consistent
//! residual rectified flow, built on a small reverse-mode autodiff core.
//!
//! The crate is organised bottom-up:
//!
//! - [`numcore`]: dense tensors, a recording tape with reverse-mode adjoints,
//!   parameter storage, Adam with cosine decay, and checkpoint files.
//! - [`perception`]: soft type/attribute priors from yes/no logit pairs and the
//!   difficulty-adaptive perturbation scale.
//! - [`degradations`]: procedural clean images, synthetic weather corruptions,
//!   a mock logit oracle, and dataset manifests.
//! - [`conditioning`]: attribute-modulated normalization and the
//!   weather-weighted adapter.
//! - [`posterior`]: the stage-1 restoration network producing the anchor.
//! - [`flow`]: residual rectified flow, its loss, sampler and the baseline.
//! - [`metrics`]: MSE, PSNR, SSIM and energy distance.
//! - [`config`] and [`experiments`]: run configuration and the end-to-end recipes.

pub mod conditioning;
pub mod config;
pub mod degradations;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod image;
pub mod metrics;
pub mod numcore;
pub mod perception;
pub mod posterior;
pub mod rng;

pub use error::{Error, Result};
