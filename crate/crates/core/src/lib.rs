//! Dose-aware 2.5D conditional diffusion denoising for 3D low-count emission
//! volumes.
//!
//! A direct regression network ([`prior`]) produces a quantitatively faithful
//! starting estimate. That estimate is re-noised and refined slice by slice
//! with a conditional diffusion model ([`denoiser`], [`sampler`]) whose
//! starting latents are shared across slices for z-axis consistency.

// Range checks are written as `!(x >= 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod prior;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{SliceWindow, StudyMeta, Volume3D};
