//! Multi-scale flow-matching image tokenizer.
//!
//! Images are encoded into a fixed number of latent tokens and decoded
//! coarse-to-fine: each stage integrates a learned velocity field at one
//! resolution, then the result is upsampled and partially re-noised to seed the
//! next stage. A distilled student replaces each stage's multi-step integration
//! with a single step.

// Range checks are written as `!(lo <= x && x <= hi)` so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod distill;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod noise;
pub mod optim;
pub mod pipeline;
pub mod resample;
pub mod sampler;
pub mod schedules;
pub mod stage1;

pub use error::{Error, Result};
