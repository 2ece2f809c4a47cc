//! Training hyperparameters and the named default profiles.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which pseudo-label set supervises each head on external data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoLabelMode {
    /// Each head fits its own previous predictions.
    #[default]
    #[serde(rename = "self")]
    SelfTraining,
    /// Each head fits the other head's predictions.
    Cross,
    /// Both heads fit the mean of the two prediction sets.
    Averaged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub n_s: usize,
    pub tau: f64,
    /// Temporal smoothness weight in the ranking loss.
    pub lambda1: f64,
    /// Sparsity weight in the ranking loss.
    pub lambda2: f64,
    /// Cosine-similarity weight inside the external loss.
    pub lambda3: f64,
    /// Weight of the external loss in the total objective.
    pub lambda4: f64,
    pub lr_encoder: f64,
    pub lr_fc: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs_step0: usize,
    pub cdl_steps: usize,
    pub epochs_per_step: usize,
    pub seed: u64,
    #[serde(default)]
    pub pseudo_label_mode: PseudoLabelMode,
    #[serde(default = "default_true")]
    pub positional_encoding: bool,
    /// Name of the stream feeding the main head (the one used at inference).
    #[serde(default = "default_main_stream")]
    pub main_stream: String,
    #[serde(default = "default_aux_stream")]
    pub aux_stream: String,
}

fn default_true() -> bool {
    true
}

fn default_main_stream() -> String {
    "main".into()
}

fn default_aux_stream() -> String {
    "aux".into()
}

/// The two hyperparameter regimes, plus the variant used when the
/// weakly-labeled source is the smaller-batch dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    OpenSet,
    CrossDomain,
    CrossDomainSmallBatch,
}

impl Profile {
    pub const ALL: [Profile; 3] = [
        Profile::OpenSet,
        Profile::CrossDomain,
        Profile::CrossDomainSmallBatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Profile::OpenSet => "open-set",
            Profile::CrossDomain => "cross-domain",
            Profile::CrossDomainSmallBatch => "cross-domain-small-batch",
        }
    }

    pub fn defaults(self) -> TrainConfig {
        let base = TrainConfig {
            n_s: 64,
            tau: 1.25,
            lambda1: 5e-4,
            lambda2: 5e-4,
            lambda3: 1e-3,
            lambda4: 700.0,
            lr_encoder: 3e-5,
            lr_fc: 5e-4,
            weight_decay: 1e-3,
            batch_size: 64,
            epochs_step0: 200,
            cdl_steps: 40,
            epochs_per_step: 4,
            seed: 0,
            pseudo_label_mode: PseudoLabelMode::SelfTraining,
            positional_encoding: true,
            main_stream: default_main_stream(),
            aux_stream: default_aux_stream(),
        };
        match self {
            Profile::OpenSet => base,
            Profile::CrossDomain => TrainConfig {
                lambda1: 5e-3,
                lambda2: 1e-3,
                lambda4: 2000.0,
                ..base
            },
            Profile::CrossDomainSmallBatch => TrainConfig {
                lambda1: 5e-3,
                lambda2: 1e-3,
                lambda4: 1250.0,
                lr_encoder: 5e-5,
                lr_fc: 1e-4,
                batch_size: 32,
                ..base
            },
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Profile::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown profile `{s}` (expected one of: open-set, cross-domain, cross-domain-small-batch)"
                ))
            })
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Profile::OpenSet.defaults()
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.n_s < 2 {
            return fail(format!("n_s must be at least 2, got {}", self.n_s));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be non-negative, got {v}"));
            }
        }
        for (name, v) in [("lr_encoder", self.lr_encoder), ("lr_fc", self.lr_fc)] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if self.batch_size == 0 || self.batch_size % 4 != 0 {
            return fail(format!(
                "batch_size must be a positive multiple of 4, got {}",
                self.batch_size
            ));
        }
        if self.main_stream == self.aux_stream {
            return fail("main and aux streams must differ".into());
        }
        Ok(())
    }

    /// Labeled (abnormal, normal) pairs in a joint mini-batch.
    pub fn pairs_per_batch(&self) -> usize {
        self.batch_size / 4
    }

    /// External videos in a joint mini-batch.
    pub fn external_per_batch(&self) -> usize {
        self.batch_size / 2
    }

    /// Short stable digest of the resolved configuration.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}
