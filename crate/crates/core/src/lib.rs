//! Robustness benchmarking for stereo disparity estimation.
//!
//! The crate bundles everything needed to measure how a disparity estimator
//! degrades under synthetic image corruptions and white-box adversarial
//! attacks:
//!
//! * [`imgio`] reads and writes PFM, KITTI 16-bit disparity PNGs, 8/16-bit
//!   images and dataset manifests.
//! * [`corrupt`] implements fifteen common corruptions at five severities.
//! * [`diffcore`] is a small reverse-mode autodiff tape.
//! * [`stereoref`] is a differentiable correlation/soft-argmin matcher plus a
//!   block-matching baseline.
//! * [`attacks`] runs FGSM, BIM, PGD, APGD and CosPGD against any
//!   [`attacks::DisparityModel`].
//! * [`metrics`] holds EPE-family metrics and Pearson correlation.
//! * [`bench`] ties it together: threat configs, evaluation, the result
//!   cache and reports.

pub mod attacks;
pub mod bench;
pub mod corrupt;
pub mod diffcore;
mod error;
pub mod imgio;
pub mod metrics;
pub mod rng;
pub mod stereoref;
pub mod synth;

pub use error::{Error, Result};

/// Toolkit version recorded in every evaluation record and fingerprint.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
