//! Lesion-aware CycleGAN for virtual contrast enhancement.
//!
//! The crate translates low-energy (LE) mammography-like images into
//! dual-energy subtracted (DES) images with a CycleGAN whose cycle and
//! identity losses carry extra terms restricted to lesion masks. Around the
//! model it provides a synthetic phantom generator, the preprocessing and
//! augmentation pipeline, full-reference quality metrics, and a stratified
//! grouped k-fold harness that reports results as mean ± std over folds.
//!
//! Module map:
//!
//! - [`imgcore`]: images, masks, paired samples and their file formats.
//! - [`phantom`]: deterministic synthetic LE/DES pairs with known lesions.
//! - [`preprocess`]: padding, contrast stretch, resizing, paired augmentation.
//! - [`nn`]: a small CPU tensor engine with hand-written backward passes.
//! - [`model`]: ResNet generators, patch discriminators, checkpoints.
//! - [`objective`]: adversarial, cycle, identity and mask-localized losses.
//! - [`trainer`]: Adam training loop, replay buffer, early stopping.
//! - [`quality`]: MSE, PSNR, SSIM, pixel-domain VIF and ROI errors.
//! - [`harness`]: fold planning, per-fold evaluation, aggregation, heatmaps.
//! - [`config`] and [`cli`]: the `vce` command-line front end.

pub mod cli;
pub mod config;
pub mod error;
pub mod filter;
pub mod harness;
pub mod imgcore;
pub mod model;
pub mod nn;
pub mod objective;
pub mod parallel;
pub mod phantom;
pub mod preprocess;
pub mod quality;
pub mod trainer;

pub use error::{Error, Result};
pub use imgcore::{GrayImage, LesionMask, PairedSample, ValueRange};
