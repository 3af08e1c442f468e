//! Semi-supervised multitask translation of ASL (and T1) MRI slices into PET-like slices.
//!
//! The crate bundles a synthetic phantom corpus, a dataset loader with a bounded batch queue,
//! a dense U-shaped encoder with a gated PET decoder and a skip-free ASL decoder, SSIM based
//! losses, an alternating coarse/fine trainer, and a cross-validated ablation harness.

pub mod datasets;
pub mod evaluator;
pub mod losses;
pub mod model;
pub mod nn;
pub mod phantoms;
pub mod trainer;
pub mod cli;
