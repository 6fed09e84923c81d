//! Maximum-margin losses for class-imbalanced classification.
//!
//! The crate bundles the loss kernels (hard positive / negative maximum
//! margins, LDAM, focal and plain cross-entropy, all with analytic gradients),
//! a cosine-normalized MLP classifier, imbalanced dataset construction, the
//! two-stage deferred re-weighting trainer, evaluation metrics, and the
//! finite-difference oracle used to check every gradient.

pub mod classifier;
pub mod drw_schedule;
pub mod error;
pub mod experiment;
pub mod imbalance_data;
pub mod margin_losses;
pub mod metrics;
pub mod oracle;
pub mod report;

pub use error::{Error, Result};
pub use margin_losses::{
    baseline_loss, hard_negative_margin, hard_positive_margin, ldam_gammas, mm_loss, mm_margin,
    BaselineKind, Branch, ClassCounts, GradMode, LossResult, MarginMode, MarginParams,
};
