//! Feature ingestion: blob files, corpus manifests and segment pooling.

mod blob;
mod manifest;
mod pool;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use ndarray::Array2;
use sha2::{Digest, Sha256};

pub use blob::{decode_blob, encode_blob, read_blob, write_blob, FeatureBlob, BLOB_MAGIC, BLOB_VERSION};
pub use manifest::{CorpusManifest, ManifestEntry, ManifestFile, MANIFEST_VERSION};
pub use pool::pool_segments;

use crate::datamodel::{SegmentBatch, VideoRecord};
use crate::error::{Error, Result};

/// One blob read, as recorded in the store's access log.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlobAccess {
    pub video_id: String,
    pub stream: String,
    pub path: PathBuf,
}

type CacheKey = ([u8; 32], usize);

/// Reads blobs on demand and caches pooled matrices by (content hash, n_s).
///
/// Safe to share across threads. Concurrent inserts of the same key may race;
/// the pooled values are deterministic so the last writer wins harmlessly.
#[derive(Default)]
pub struct FeatureStore {
    cache: Mutex<HashMap<CacheKey, Arc<Array2<f64>>>>,
    access_log: Mutex<Vec<BlobAccess>>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Pooled `n_s x D` matrix for one stream of one record.
    pub fn pooled(
        &self,
        corpus: &CorpusManifest,
        record: &VideoRecord,
        stream: &str,
        n_s: usize,
    ) -> Result<Arc<Array2<f64>>> {
        let declared = *corpus.streams.get(stream).ok_or_else(|| Error::MissingFeatures {
            video_id: record.video_id.clone(),
            stream: stream.to_string(),
        })?;
        let path = corpus.blob_path(record, stream)?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.access_log.lock().expect("access log poisoned").push(BlobAccess {
            video_id: record.video_id.clone(),
            stream: stream.to_string(),
            path: path.clone(),
        });
        let key: CacheKey = (Sha256::digest(&bytes).into(), n_s);
        if let Some(hit) = self.cache.lock().expect("cache poisoned").get(&key) {
            return Ok(Arc::clone(hit));
        }
        let blob = decode_blob(&bytes, &path)?;
        if blob.dim() != declared {
            return Err(Error::ShapeMismatch {
                path,
                reason: format!(
                    "stream `{stream}` declares D = {declared} but blob has D = {}",
                    blob.dim()
                ),
            });
        }
        let pooled = Arc::new(pool_segments(&blob, n_s)?);
        self.cache
            .lock()
            .expect("cache poisoned")
            .insert(key, Arc::clone(&pooled));
        Ok(pooled)
    }

    /// Pooled matrices for the requested streams of one record.
    pub fn segments(
        &self,
        corpus: &CorpusManifest,
        record: &VideoRecord,
        streams: &[&str],
        n_s: usize,
    ) -> Result<SegmentBatch> {
        let mut map = BTreeMap::new();
        for &s in streams {
            map.insert(s.to_string(), (*self.pooled(corpus, record, s, n_s)?).clone());
        }
        SegmentBatch::new(map)
    }

    pub fn access_log(&self) -> Vec<BlobAccess> {
        self.access_log.lock().expect("access log poisoned").clone()
    }

    pub fn clear_access_log(&self) {
        self.access_log.lock().expect("access log poisoned").clear();
    }
}
