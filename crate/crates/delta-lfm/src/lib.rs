//! Longitudinal disease-progression modelling on a synthetic brain-scan cohort.
//!
//! The crate trains a small variational autoencoder whose latent space is
//! regularized so that repeat scans of one patient line up along a common
//! direction with magnitudes ordered by visit age, then learns a
//! patient-conditioned velocity field over those latents. Integrating the
//! field forward from one real scan produces follow-up images at arbitrary
//! horizons, which are scored with change-aware image metrics.
//!
//! Entry points, roughly in pipeline order:
//!
//! * [`cohort`] renders and serializes the synthetic longitudinal cohort.
//! * [`gradcore`] is the tensor / reverse-mode autodiff / differentiable-SVD
//!   substrate everything trains on.
//! * [`latent`] holds the autoencoder and the alignment losses.
//! * [`flow`] holds the conditioned velocity network and its training loop.
//! * [`integrate`] rolls latents forward in time with an Euler scheme.
//! * [`metrics`] scores predictions (PSNR, SSIM, region MAE, change-aware
//!   relative MAE) and runs the metric noise-sensitivity harness.
//! * [`cli`] wires the above into the `delta-lfm` command-line pipeline; the
//!   same functions back the runnable examples in `examples/`.
//!
//! Each capability has a runnable walkthrough under `examples/`; start with
//! `cargo run --release --example generate_cohort`.

pub mod cli;
pub mod cohort;
pub mod error;
pub mod flow;
pub mod gradcore;
pub mod integrate;
pub mod latent;
pub mod metrics;
pub mod nn;
pub mod optim;

pub use error::{DlfmError, Result};
