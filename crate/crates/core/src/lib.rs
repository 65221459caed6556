//! Desk-scale adversarial-robustness benchmark for 2D keypoint models.
//!
//! The crate bundles a tiny reverse-mode autodiff engine, a zoo of toy
//! pose networks (direct regression, stacked heatmap, chained heatmap),
//! a deterministic stick-figure dataset generator, keypoint metrics
//! (PCKh / OKS), the gradient-sign attack family (FGSM, iterated
//! variants, universal perturbations), and two image-space defenses.

pub mod attacks;
pub mod defenses;
pub mod diffnet;
pub mod metrics;
pub mod models;
pub mod synthpose;
pub mod train;
pub mod error;

pub use error::{Error, Result};
