//! Corpus manifests: a JSON document listing videos, their labels and the
//! feature blobs backing each stream. Paths are relative to the manifest's
//! directory.
//!
//! ```json
//! {
//!   "version": 1,
//!   "fps": 30.0,
//!   "streams": { "main": 512, "aux": 1024 },
//!   "classes": ["arson", "fighting"],
//!   "records": [
//!     {
//!       "video_id": "v0001",
//!       "domain": "source",
//!       "n_frames": 900,
//!       "weak_label": 1,
//!       "anomaly_class": "arson",
//!       "frame_labels_path": "labels/v0001.txt",
//!       "streams": { "main": "features/v0001.main.cdlf", "aux": "features/v0001.aux.cdlf" }
//!     }
//!   ]
//! }
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::{validate_record, FrameLabels, Role, VideoRecord};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// On-disk manifest schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub version: u32,
    pub fps: f64,
    pub streams: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
    pub records: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub video_id: String,
    pub domain: String,
    pub n_frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weak_label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_labels_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly_class: Option<String>,
    pub streams: BTreeMap<String, String>,
}

impl ManifestFile {
    /// Parses and structurally checks a manifest without touching the
    /// filesystem: version, FPS, declared dimensions, unique ids and stream
    /// coverage.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let file: ManifestFile = serde_json::from_str(text).map_err(|e| Error::BadManifest {
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })?;
        file.check(origin)?;
        Ok(file)
    }

    fn check(&self, origin: &Path) -> Result<()> {
        let bad = |reason: String| Error::BadManifest {
            path: origin.to_path_buf(),
            reason,
        };
        if self.version != MANIFEST_VERSION {
            return Err(bad(format!("unsupported manifest version {}", self.version)));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(bad(format!("fps must be positive, got {}", self.fps)));
        }
        if self.streams.is_empty() {
            return Err(bad("no streams declared".into()));
        }
        if let Some((name, _)) = self.streams.iter().find(|(_, &d)| d == 0) {
            return Err(bad(format!("stream `{name}` declares zero dimension")));
        }
        let mut seen = BTreeSet::new();
        for entry in &self.records {
            if !seen.insert(entry.video_id.as_str()) {
                return Err(bad(format!("duplicate video_id `{}`", entry.video_id)));
            }
            for stream in self.streams.keys() {
                if !entry.streams.contains_key(stream) {
                    return Err(Error::MissingFeatures {
                        video_id: entry.video_id.clone(),
                        stream: stream.clone(),
                    });
                }
            }
            if let Some(unknown) = entry.streams.keys().find(|s| !self.streams.contains_key(*s)) {
                return Err(bad(format!(
                    "record `{}` references undeclared stream `{unknown}`",
                    entry.video_id
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// A manifest resolved against its directory, with frame labels loaded and
/// every record validated for its role.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub fps: f64,
    pub streams: BTreeMap<String, usize>,
    pub classes: Option<Vec<String>>,
    pub records: Vec<VideoRecord>,
}

impl CorpusManifest {
    pub fn load(path: &Path, role: Role) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file = ManifestFile::parse(&text, path)?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Self::resolve(file, root, role)
    }

    pub fn resolve(file: ManifestFile, root: PathBuf, role: Role) -> Result<Self> {
        let mut records = Vec::with_capacity(file.records.len());
        for entry in file.records {
            let frame_labels = match &entry.frame_labels_path {
                Some(rel) => {
                    let p = root.join(rel);
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    Some(FrameLabels::parse(&text).map_err(|reason| Error::BadFrameLabels {
                        path: p.clone(),
                        reason,
                    })?)
                }
                None => None,
            };
            let record = VideoRecord {
                video_id: entry.video_id,
                domain: entry.domain,
                n_frames: entry.n_frames,
                weak_label: entry.weak_label,
                frame_labels,
                anomaly_class: entry.anomaly_class,
                stream_refs: entry.streams,
            };
            let record = validate_record(record, role)?;
            if let Some(classes) = &file.classes {
                match &record.anomaly_class {
                    None if record.is_abnormal() => {
                        return Err(Error::MissingClass {
                            video_id: record.video_id,
                        })
                    }
                    Some(c) if !classes.contains(c) => {
                        return Err(Error::InvalidRecord {
                            video_id: record.video_id,
                            reason: format!("anomaly class `{c}` is not declared"),
                        })
                    }
                    _ => {}
                }
            }
            records.push(record);
        }
        Ok(Self {
            root,
            fps: file.fps,
            streams: file.streams,
            classes: file.classes,
            records,
        })
    }

    /// Absolute path of a record's blob for `stream`.
    pub fn blob_path(&self, record: &VideoRecord, stream: &str) -> Result<PathBuf> {
        record
            .stream_refs
            .get(stream)
            .map(|rel| self.root.join(rel))
            .ok_or_else(|| Error::MissingFeatures {
                video_id: record.video_id.clone(),
                stream: stream.to_string(),
            })
    }

    pub fn has_frame_labels(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.frame_labels.is_some())
    }

    /// Copy of this corpus restricted to records accepted by `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(&VideoRecord) -> bool) -> Self {
        Self {
            root: self.root.clone(),
            fps: self.fps,
            streams: self.streams.clone(),
            classes: self.classes.clone(),
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }
}
