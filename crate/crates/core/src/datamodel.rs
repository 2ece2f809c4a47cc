//! Domain types shared across the pipeline.
//!
//! Everything here is plain data plus validation. Types are immutable once
//! built and can be shared across worker threads.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Dense per-frame ground truth, one 0/1 entry per decoded frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameLabels(Vec<u8>);

impl FrameLabels {
    pub fn new(labels: Vec<u8>) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidRecord {
                video_id: String::new(),
                reason: format!("frame label {bad} is not binary"),
            });
        }
        Ok(Self(labels))
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Parses the compact text form: one `0`/`1` character per frame,
    /// surrounding whitespace ignored. At least one frame is required.
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err("no frame labels".into());
        }
        let mut out = Vec::with_capacity(trimmed.len());
        for (i, c) in trimmed.chars().enumerate() {
            match c {
                '0' => out.push(0),
                '1' => out.push(1),
                other => return Err(format!("unexpected character {other:?} at frame {i}")),
            }
        }
        Ok(Self(out))
    }

    pub fn any_positive(&self) -> bool {
        self.0.contains(&1)
    }
}

impl fmt::Display for FrameLabels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.0 {
            f.write_str(if *v == 1 { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl Serialize for FrameLabels {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for FrameLabels {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        FrameLabels::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// Which part of the pipeline a record is consumed by.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Weakly-labeled training data: video-level labels required.
    Labeled,
    /// External unlabeled training data.
    External,
    /// Held-out evaluation data.
    Test,
}

/// One video: identity, weak supervision and pointers to its feature streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub domain: String,
    pub n_frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weak_label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_labels: Option<FrameLabels>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly_class: Option<String>,
    /// Stream name to blob locator.
    pub stream_refs: BTreeMap<String, String>,
}

impl VideoRecord {
    pub fn is_abnormal(&self) -> bool {
        self.weak_label == Some(1)
    }
}

/// Checks the per-record invariants and hands the record back untouched.
pub fn validate_record(record: VideoRecord, role: Role) -> Result<VideoRecord> {
    if record.n_frames == 0 {
        return Err(Error::InvalidRecord {
            video_id: record.video_id,
            reason: "n_frames must be positive".into(),
        });
    }
    match record.weak_label {
        None if role == Role::Labeled => {
            return Err(Error::MissingLabel {
                video_id: record.video_id,
            })
        }
        Some(v) if v > 1 => {
            return Err(Error::InvalidRecord {
                video_id: record.video_id,
                reason: format!("weak label {v} is not binary"),
            })
        }
        _ => {}
    }
    if let Some(labels) = &record.frame_labels {
        if labels.len() != record.n_frames {
            return Err(Error::LengthMismatch {
                video_id: record.video_id.clone(),
                what: "frame_labels",
                expected: record.n_frames,
                got: labels.len(),
            });
        }
    }
    Ok(record)
}

/// Pooled per-video feature matrices, one `n_s x D` matrix per stream.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentBatch {
    streams: BTreeMap<String, Array2<f64>>,
    n_s: usize,
}

impl SegmentBatch {
    pub fn new(streams: BTreeMap<String, Array2<f64>>) -> Result<Self> {
        let mut n_s = None;
        for (name, m) in &streams {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::DimensionMismatch(format!(
                    "stream `{name}` contains non-finite entries"
                )));
            }
            match n_s {
                None => n_s = Some(m.nrows()),
                Some(n) if n != m.nrows() => {
                    return Err(Error::DimensionMismatch(format!(
                        "stream `{name}` has {} segments, expected {n}",
                        m.nrows()
                    )))
                }
                _ => {}
            }
        }
        let n_s = n_s
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::DimensionMismatch("segment batch needs a non-empty stream".into()))?;
        Ok(Self { streams, n_s })
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }

    pub fn stream(&self, name: &str) -> Option<&Array2<f64>> {
        self.streams.get(name)
    }

    pub fn stream_names(&self) -> impl Iterator<Item = &str> {
        self.streams.keys().map(String::as_str)
    }
}

/// Per-segment scores and the 32-wide penultimate activations of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub scores: Vec<f64>,
    pub penultimate: Array2<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadId {
    Main,
    Aux,
}

impl HeadId {
    pub const BOTH: [HeadId; 2] = [HeadId::Main, HeadId::Aux];

    pub fn other(self) -> HeadId {
        match self {
            HeadId::Main => HeadId::Aux,
            HeadId::Aux => HeadId::Main,
        }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadId::Main => "main",
            HeadId::Aux => "aux",
        })
    }
}

/// Soft segment-level pseudo-labels produced by one head at one CDL step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub head_id: HeadId,
    pub cdl_step: usize,
    pub labels: BTreeMap<String, Vec<f64>>,
}

impl PseudoLabelSet {
    pub fn get(&self, video_id: &str) -> Option<&[f64]> {
        self.labels.get(video_id).map(Vec::as_slice)
    }
}

/// Segment-level surrogate variances, each in `[exp(-2 tau), 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyScores(pub Vec<f64>);

impl UncertaintyScores {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn mean(&self) -> f64 {
        if self.0.is_empty() {
            return f64::NAN;
        }
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }
}
