//! Fine-tuning classifiers against their own overconfident inputs.
//!
//! A trained classifier defines an energy over inputs through its logits.
//! Langevin chains on that energy find inputs the classifier is confident
//! about but which lie away from the training data; fine-tuning then raises
//! the entropy of the classifier's predictions on those inputs.

// `!(x > 0.0)` forms are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod checkpoint;
pub mod datasets;
pub mod detectors;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod finetune;
pub mod metrics;
pub mod plots;
pub mod sampler;
pub mod seeding;

pub use error::{Error, Result};
