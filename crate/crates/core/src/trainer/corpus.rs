use crate::datamodel::{SegmentBatch, VideoRecord};
use crate::error::{Error, Result};
use crate::featstore::{CorpusManifest, FeatureStore};

/// A video with its pooled segment features held in memory.
#[derive(Clone, Debug)]
pub struct LoadedVideo {
    pub record: VideoRecord,
    pub segments: SegmentBatch,
}

impl LoadedVideo {
    pub fn stream(&self, name: &str) -> Result<&ndarray::Array2<f64>> {
        self.segments.stream(name).ok_or_else(|| Error::MissingFeatures {
            video_id: self.record.video_id.clone(),
            stream: name.to_string(),
        })
    }
}

/// A corpus pooled to a fixed number of segments, in manifest order.
#[derive(Clone, Debug)]
pub struct LoadedCorpus {
    pub manifest: CorpusManifest,
    pub videos: Vec<LoadedVideo>,
}

impl LoadedCorpus {
    pub fn load(manifest: CorpusManifest, store: &FeatureStore, streams: &[&str], n_s: usize) -> Result<Self> {
        let videos = manifest
            .records
            .iter()
            .map(|r| {
                Ok(LoadedVideo {
                    record: r.clone(),
                    segments: store.segments(&manifest, r, streams, n_s)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, videos })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    /// Declared feature width of a stream.
    pub fn stream_dim(&self, stream: &str) -> Result<usize> {
        self.manifest.streams.get(stream).copied().ok_or_else(|| {
            Error::InvalidConfig(format!(
                "stream `{stream}` is not declared by {}",
                self.manifest.root.display()
            ))
        })
    }

    /// Indices of weakly-labeled abnormal and normal videos.
    pub fn split_by_label(&self) -> (Vec<usize>, Vec<usize>) {
        let (mut abnormal, mut normal) = (Vec::new(), Vec::new());
        for (i, v) in self.videos.iter().enumerate() {
            match v.record.weak_label {
                Some(1) => abnormal.push(i),
                Some(_) => normal.push(i),
                None => {}
            }
        }
        (abnormal, normal)
    }
}
