//! Retinal vessel segmentation toolkit.
//!
//! A desk-scale research toolkit for vessel segmentation on DRIVE-format
//! fundus images (or a built-in procedural substitute):
//!
//! - [`dataset`]: DRIVE/synthetic ingestion, preprocessing, augmentation
//! - [`model`]: an attention U-Net with DropBlock + batch-norm conv blocks
//! - [`training`]: Dice+BCE loss, Adam, the two-phase epoch loop
//! - [`pipeline`]: pseudo-labeling of synthetic images, retrain/fine-tune
//!   staging, model ensembling, and a toy image generator
//! - [`metrics`]: pixel-wise confusion metrics, exact ROC AUC, and the
//!   Fréchet distance between feature-space Gaussians
//! - [`config`] / [`cli`]: run configuration and command entry points

pub mod cli;
pub mod config;
pub mod dataset;
pub mod imgproc;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod training;
pub mod workers;
