//! Two-stage knowledge distillation with dual-tier margin-based sample selection.
//!
//! Stage one trains K fold teachers with stratified cross-validation, caches
//! their out-of-fold soft labels and distills them into students with a
//! weighted CE + KD + cosine objective. Stage two re-scores the training data,
//! keeps only Near-miss and Hard-hard samples, splits each group at the
//! median of a composite difficulty score and continues training with
//! per-category loss weights.
//!
//! The classifiers are deliberately small (affine or one tanh hidden layer)
//! so that every gradient is analytic and checkable.

pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod selection;

pub use error::{Error, Result};
