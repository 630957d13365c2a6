//! Synthetic-CT generation with a frozen ViT backbone fused into a trainable
//! UNet-style encoder/decoder.
//!
//! Module map:
//! - [`backbone`]: frozen multi-level ViT features.
//! - [`generator`]: CNN encoder, cross-fusion blocks, decoder, ablation variants.
//! - [`losses`]: pixel L1, multi-level feature-space perceptual loss, combined objective.
//! - [`data`]: volume I/O, intensity normalization, slicing, reassembly, splits.
//! - [`training`]: Adam training loop, checkpoints, logs.
//! - [`evaluation`]: MS-SSIM, PSNR, Dice/SegScore, paired t-test, reports.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod losses;
pub mod nn;
pub mod phantom;
pub mod training;

pub use error::{Error, Result};
