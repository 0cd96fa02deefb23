//! Desk-scale laboratory for efficient promptable segmentation.
//!
//! The crate trains a small prompt-driven mask model on synthetic scenes and
//! implements three efficiency mechanisms around it: teacher-to-student
//! distillation with hard-example mining, post-training quantization with a
//! task-loss-guided scale search, and a two-round hierarchical everything
//! mode that skips redundant decoder calls.

pub mod config;
pub mod container;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod everything;
pub mod model;
pub mod quant;
pub mod reference;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
