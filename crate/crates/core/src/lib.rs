//! Conformal-in-the-loop training at desk scale.
//!
//! Split-conformal prediction sets are computed during training and each
//! example's loss is weighted by its set size: empty sets prune likely
//! mislabeled examples, large sets upweight uncertain ones. One run handles
//! class imbalance and label noise together, using only the softmax outputs
//! the loss already needs.
//!
//! Module map:
//! - [`conformal`]: scores (LAC/APS), quantile fitting, prediction sets.
//! - [`net`]: a small MLP with exact hand-derived gradients and ADAM.
//! - [`data`]: seeded synthetic datasets with imbalance and label noise.
//! - [`trainer`]: the weighted/pruned training loop and baselines.
//! - [`metrics`]: macro accuracy, mean IoU, and diagnostic rates.
//! - [`telemetry`]: per-step and per-epoch records as JSON lines.

pub mod conformal;
pub mod data;
pub mod error;
pub mod metrics;
pub mod net;
pub mod telemetry;
pub mod trainer;

pub use error::{Error, Result};
