//! Weakly-supervised video anomaly detection with cross-domain learning.
//!
//! Two prediction heads are trained on weakly-labeled videos with a MIL
//! ranking loss, then refined on the union of labeled and external unlabeled
//! videos: each head fits soft pseudo-labels on external data, reweighted by
//! a surrogate variance derived from the agreement of the heads'
//! penultimate representations.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod evalkit;
pub mod featstore;
pub mod losses;
pub mod nethead;
pub mod parallel;
pub mod synthgen;
pub mod trainer;

pub use config::{Profile, PseudoLabelMode, TrainConfig};
pub use error::{Error, Result};
