//! Boundary-aware structured pruning laboratory.
//!
//! A desk-scale stack for studying dual-intervention (zero/reset) Fisher
//! pruning and level-set boundary leverage on a small prompt-conditioned
//! ViT segmentation model trained on synthetic data:
//!
//! - [`tensor`] — f64 tensors with tape-based reverse-mode autodiff
//! - [`model`] — the ViT segmentation model, structured groups, masking,
//!   physical removal, checkpoints
//! - [`data`] — deterministic synthetic segmentation tasks and morphology
//! - [`losses`] / [`metrics`] — segmentation losses and Dice/IoU/BF1/HD95
//! - [`fisher`] — boundary-aware Fisher, Cross-Fisher, intervention costs
//! - [`scoring`] — fused scores, block budgets, cascade plans, baselines
//! - [`leverage`] — level-set boundary geometry and the head/MLP sweep
//! - [`train`] — Adam training, adaptation and post-pruning recovery

pub mod data;
pub mod error;
pub mod fisher;
pub mod leverage;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scoring;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{MedError, Result};
pub use tensor::{GradMap, NodeId, Tape, Tensor};
