//! Inference-time score extension, frame-level metrics, open-set splits and
//! the uncertainty diagnostics.

mod diagnostics;
mod metrics;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use diagnostics::{
    default_cdf_edges, mass_in_range, open_set_split, segment_ground_truth, uncertainty_cdf,
    uncertainty_error_correlation, CorrelationSample,
};
pub use metrics::{average_precision, average_ranks, roc_auc, spearman, spearman_test, Correlation};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nethead::HeadParameters;
use crate::parallel::par_map;
use crate::trainer::{LoadedCorpus, LoadedVideo};

/// Per-frame anomaly scores of one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScores {
    pub video_id: String,
    pub scores: Vec<f64>,
}

/// Segment index of every frame. Segments `0..n_s-1` cover
/// `floor(n_f / n_s)` frames each and the last one takes the remainder.
/// Videos shorter than `n_s` frames map frame `i` to segment
/// `floor(i * n_s / n_f)`.
pub fn frame_segment_index(n_f: usize, n_s: usize) -> Result<Vec<usize>> {
    if n_f == 0 {
        return Err(Error::EmptyVideo);
    }
    if n_s == 0 {
        return Err(Error::InvalidConfig("n_s must be positive".into()));
    }
    if n_f < n_s {
        return Ok((0..n_f).map(|i| i * n_s / n_f).collect());
    }
    let per = n_f / n_s;
    Ok((0..n_f).map(|i| (i / per).min(n_s - 1)).collect())
}

/// Extends segment scores to `n_f` frame scores.
pub fn segment_to_frame(seg_scores: &[f64], n_f: usize) -> Result<Vec<f64>> {
    if seg_scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(frame_segment_index(n_f, seg_scores.len())?
        .into_iter()
        .map(|j| seg_scores[j])
        .collect())
}

/// Main-head frame scores for every video, in corpus order.
pub fn score_videos(
    head: &HeadParameters,
    videos: &[LoadedVideo],
    stream: &str,
    positional: bool,
    workers: usize,
) -> Result<Vec<FrameScores>> {
    par_map(videos, workers, |v| {
        let out = head.forward(v.stream(stream)?, positional)?;
        Ok(FrameScores {
            video_id: v.record.video_id.clone(),
            scores: segment_to_frame(&out.scores, v.record.n_frames)?,
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub auc: f64,
    pub ap: f64,
    /// Abnormal videos of this class; every normal video is also included.
    pub videos: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub ap: f64,
    pub n_videos: usize,
    pub n_frames: usize,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub config_hash: String,
    pub checkpoint_id: String,
}

fn concat(videos: &[&LoadedVideo], scores: &BTreeMap<&str, &FrameScores>) -> Result<(Vec<f64>, Vec<u8>)> {
    let (mut s, mut l) = (Vec::new(), Vec::new());
    for v in videos {
        let gt = v.record.frame_labels.as_ref().ok_or(Error::MissingGroundTruth)?;
        s.extend_from_slice(&scores[v.record.video_id.as_str()].scores);
        l.extend_from_slice(gt.as_slice());
    }
    Ok((s, l))
}

/// Frame-level AUC and AP over the concatenated frames of the corpus, plus a
/// per-class breakdown (one class's videos against all normal videos).
/// Only the main head and the main stream are used.
pub fn evaluate(
    main_head: &HeadParameters,
    test: &LoadedCorpus,
    cfg: &TrainConfig,
    checkpoint_id: &str,
    workers: usize,
) -> Result<MetricsReport> {
    if test.is_empty() || test.videos.iter().any(|v| v.record.frame_labels.is_none()) {
        return Err(Error::MissingGroundTruth);
    }
    let frame_scores = score_videos(main_head, &test.videos, &cfg.main_stream, cfg.positional_encoding, workers)?;
    let by_id: BTreeMap<&str, &FrameScores> = frame_scores.iter().map(|f| (f.video_id.as_str(), f)).collect();
    let all: Vec<&LoadedVideo> = test.videos.iter().collect();
    let (scores, labels) = concat(&all, &by_id)?;
    let auc = roc_auc(&scores, &labels)?;
    let ap = average_precision(&scores, &labels)?;

    let normals: Vec<&LoadedVideo> = all.iter().copied().filter(|v| v.record.anomaly_class.is_none()).collect();
    let mut classes: BTreeMap<&str, Vec<&LoadedVideo>> = BTreeMap::new();
    for v in &all {
        if let Some(c) = &v.record.anomaly_class {
            classes.entry(c.as_str()).or_default().push(v);
        }
    }
    let mut per_class = BTreeMap::new();
    for (class, vids) in classes {
        let n = vids.len();
        let subset: Vec<&LoadedVideo> = vids.into_iter().chain(normals.iter().copied()).collect();
        let (s, l) = concat(&subset, &by_id)?;
        if let (Ok(auc), Ok(ap)) = (roc_auc(&s, &l), average_precision(&s, &l)) {
            per_class.insert(class.to_string(), ClassMetrics { auc, ap, videos: n });
        }
    }
    Ok(MetricsReport {
        auc,
        ap,
        n_videos: test.len(),
        n_frames: labels.len(),
        per_class,
        config_hash: cfg.hash(),
        checkpoint_id: checkpoint_id.to_string(),
    })
}
