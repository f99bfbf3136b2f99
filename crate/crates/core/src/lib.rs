//! Consistency-regularized adversarial training.
//!
//! PGD-family attacks under l∞/l2/l1 threat models, augmentation policies,
//! the AT/TRADES/MART objectives combined with a Jensen-Shannon consistency
//! regularizer over independently attacked augmentations, and a robustness
//! evaluation harness.

// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod augment;
pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod lp;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod registry;
pub mod rng;
pub mod scalar;
pub mod train;

pub use batch::{clip_to_image, ImageBatch, LabeledBatch};
pub use error::{Error, Result};
pub use lp::{project_lp, Norm, ThreatModel};
pub use model::{Classifier, ModelSpec};
pub use nn::Mode;
pub use rng::RngState;
pub use scalar::Real;
