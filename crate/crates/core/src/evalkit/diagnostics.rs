use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::frame_segment_index;
use super::metrics::{spearman_test, Correlation};
use crate::datamodel::FrameLabels;
use crate::error::{Error, Result};
use crate::featstore::CorpusManifest;
use crate::losses::{bce_loss, surrogate_variance};
use crate::parallel::par_map;
use crate::trainer::{LoadedCorpus, TrainState};

/// Edges 0.0, 0.1, ..., 1.0.
pub fn default_cdf_edges() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Fraction of values at or below each edge.
pub fn uncertainty_cdf(values: &[f64], edges: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() || edges.is_empty() {
        return Err(Error::EmptyInput);
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) || edges[0] > 0.0 || edges[edges.len() - 1] < 1.0 {
        return Err(Error::InvalidConfig(
            "CDF edges must be strictly increasing and span [0, 1]".into(),
        ));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidConfig(format!("uncertainty value {v} is outside [0, 1]")));
    }
    let n = values.len() as f64;
    Ok(edges
        .iter()
        .map(|e| values.iter().filter(|&&v| v <= *e).count() as f64 / n)
        .collect())
}

/// Fraction of values inside the closed interval `[lo, hi]`.
pub fn mass_in_range(values: &[f64], lo: f64, hi: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| lo <= v && v <= hi).count() as f64 / values.len() as f64
}

/// Soft segment labels: the mean frame label over each segment's frames.
/// Segments that own no frame (videos shorter than `n_s`) take the label of
/// the frame nearest their position.
pub fn segment_ground_truth(labels: &FrameLabels, n_s: usize) -> Result<Vec<f64>> {
    let n_f = labels.len();
    let index = frame_segment_index(n_f, n_s)?;
    let mut sum = vec![0.0; n_s];
    let mut count = vec![0usize; n_s];
    for (&j, &l) in index.iter().zip(labels.as_slice()) {
        sum[j] += f64::from(l);
        count[j] += 1;
    }
    Ok((0..n_s)
        .map(|j| {
            if count[j] > 0 {
                sum[j] / count[j] as f64
            } else {
                f64::from(labels.as_slice()[(j * n_f / n_s).min(n_f - 1)])
            }
        })
        .collect())
}

/// Per-segment uncertainty and error values behind a correlation estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSample {
    pub correlation: Correlation,
    pub uncertainty: Vec<f64>,
    pub bce: Vec<f64>,
}

/// Spearman correlation between each external segment's surrogate variance
/// and the main head's BCE against the segment ground truth.
pub fn uncertainty_error_correlation(state: &TrainState, external: &LoadedCorpus, workers: usize) -> Result<CorrelationSample> {
    if external.is_empty() || external.videos.iter().any(|v| v.record.frame_labels.is_none()) {
        return Err(Error::MissingGroundTruth);
    }
    let cfg = &state.config;
    let per_video = par_map(&external.videos, workers, |v| {
        let m = state.heads.main.forward(v.stream(&cfg.main_stream)?, cfg.positional_encoding)?;
        let a = state.heads.aux.forward(v.stream(&cfg.aux_stream)?, cfg.positional_encoding)?;
        let s = surrogate_variance(&m.penultimate, &a.penultimate, cfg.tau)?;
        let gt = segment_ground_truth(v.record.frame_labels.as_ref().expect("checked"), m.scores.len())?;
        Ok((s.0, bce_loss(&m.scores, &gt)?))
    })?;
    let (mut uncertainty, mut bce) = (Vec::new(), Vec::new());
    for (s, b) in per_video {
        uncertainty.extend(s);
        bce.extend(b);
    }
    Ok(CorrelationSample {
        correlation: spearman_test(&uncertainty, &bce)?,
        uncertainty,
        bce,
    })
}

/// Splits a class-annotated corpus for the open-set protocol. `c` classes,
/// drawn with the seed, go to the labeled side and the rest to the external
/// side; each side gets as many normal videos as it has abnormal ones.
pub fn open_set_split(corpus: &CorpusManifest, c: usize, seed: u64) -> Result<(CorpusManifest, CorpusManifest)> {
    let classes = match &corpus.classes {
        Some(cl) if !cl.is_empty() => cl.clone(),
        _ => return Err(Error::TooFewClasses("corpus declares no anomaly classes".into())),
    };
    if c == 0 || c > classes.len() {
        return Err(Error::TooFewClasses(format!(
            "asked for {c} labeled classes out of {}",
            classes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = classes;
    shuffled.shuffle(&mut rng);
    let chosen: Vec<String> = shuffled[..c].to_vec();
    let is_labeled_class = |cls: &String| chosen.contains(cls);

    let mut normals: Vec<&str> = corpus
        .records
        .iter()
        .filter(|r| !r.is_abnormal())
        .map(|r| r.video_id.as_str())
        .collect();
    normals.shuffle(&mut rng);
    let abnormal_in = |labeled: bool| {
        corpus
            .records
            .iter()
            .filter(|r| r.is_abnormal() && r.anomaly_class.as_ref().is_some_and(|c| is_labeled_class(c) == labeled))
            .count()
    };
    let (n_lab, n_ext) = (abnormal_in(true), abnormal_in(false));
    if normals.len() < n_lab + n_ext {
        return Err(Error::TooFewNormals(format!(
            "need {} normal videos, corpus has {}",
            n_lab + n_ext,
            normals.len()
        )));
    }
    let lab_normals = &normals[..n_lab];
    let ext_normals = &normals[n_lab..n_lab + n_ext];
    let labeled = corpus.filtered(|r| match &r.anomaly_class {
        Some(cls) if r.is_abnormal() => is_labeled_class(cls),
        _ => lab_normals.contains(&r.video_id.as_str()),
    });
    let external = corpus.filtered(|r| match &r.anomaly_class {
        Some(cls) if r.is_abnormal() => !is_labeled_class(cls),
        _ => ext_normals.contains(&r.video_id.as_str()),
    });
    Ok((labeled, external))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::VideoRecord;
    use std::collections::{BTreeMap, HashSet};
    use std::path::PathBuf;

    #[test]
    fn cdf_examples() {
        let edges = default_cdf_edges();
        let cdf = uncertainty_cdf(&[1.0; 4], &edges).unwrap();
        assert!(cdf[..10].iter().all(|&v| v == 0.0));
        assert_eq!(cdf[10], 1.0);
        let vals = [0.05, 0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95];
        let cdf = uncertainty_cdf(&vals, &edges).unwrap();
        for (i, v) in cdf.iter().enumerate() {
            assert!((v - i as f64 / 10.0).abs() < 1e-12);
        }
        assert!(uncertainty_cdf(&[], &edges).is_err());
        assert!(uncertainty_cdf(&[0.5], &[0.0, 0.5, 0.5, 1.0]).is_err());
        assert_eq!(mass_in_range(&[0.95, 0.2, 1.0, 0.9], 0.9, 1.0), 0.75);
    }

    #[test]
    fn segment_truth_is_frame_mean() {
        let l = FrameLabels::parse("0011100000").unwrap();
        // n_fs = 2 for 4 segments; last segment takes 4 frames
        assert_eq!(segment_ground_truth(&l, 4).unwrap(), vec![0.0, 1.0, 0.5, 0.0]);
        let short = FrameLabels::parse("01").unwrap();
        assert_eq!(segment_ground_truth(&short, 4).unwrap(), vec![0.0, 0.0, 1.0, 1.0]);
    }

    fn class_corpus() -> CorpusManifest {
        let mut records = Vec::new();
        for (i, cls) in ["a", "a", "b", "b", "c", "d"].iter().enumerate() {
            records.push(VideoRecord {
                video_id: format!("x{i}"),
                domain: "d".into(),
                n_frames: 4,
                weak_label: Some(1),
                frame_labels: None,
                anomaly_class: Some(cls.to_string()),
                stream_refs: BTreeMap::new(),
            });
        }
        for i in 0..8 {
            records.push(VideoRecord {
                video_id: format!("n{i}"),
                domain: "d".into(),
                n_frames: 4,
                weak_label: Some(0),
                frame_labels: None,
                anomaly_class: None,
                stream_refs: BTreeMap::new(),
            });
        }
        CorpusManifest {
            root: PathBuf::from("."),
            fps: 30.0,
            streams: BTreeMap::new(),
            classes: Some(["a", "b", "c", "d"].map(String::from).to_vec()),
            records,
        }
    }

    #[test]
    fn open_set_partitions_classes() {
        let corpus = class_corpus();
        for c in 1..=4 {
            let (lab, ext) = open_set_split(&corpus, c, 9).unwrap();
            let lab_classes: HashSet<_> = lab.records.iter().filter_map(|r| r.anomaly_class.clone()).collect();
            let ext_classes: HashSet<_> = ext.records.iter().filter_map(|r| r.anomaly_class.clone()).collect();
            assert_eq!(lab_classes.len(), c);
            assert!(lab_classes.is_disjoint(&ext_classes));
            for side in [&lab, &ext] {
                let abn = side.records.iter().filter(|r| r.is_abnormal()).count();
                assert_eq!(side.records.len(), 2 * abn);
            }
            assert_eq!(open_set_split(&corpus, c, 9).unwrap(), (lab, ext));
        }
        let (_, ext) = open_set_split(&corpus, 4, 1).unwrap();
        assert!(ext.records.iter().all(|r| !r.is_abnormal()));
        assert!(matches!(open_set_split(&corpus, 5, 1), Err(Error::TooFewClasses(_))));
        let few = corpus.filtered(|r| r.is_abnormal() || r.video_id == "n0");
        assert!(matches!(open_set_split(&few, 2, 1), Err(Error::TooFewNormals(_))));
    }
}
