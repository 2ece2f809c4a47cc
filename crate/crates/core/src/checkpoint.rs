//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "CDLC" | u32 version | u64 header length | JSON header
//!        | f64 payload (main: params, m, v; aux: params, m, v; pseudo-labels)
//!        | SHA-256 of everything above
//! ```
//!
//! Floats are stored as raw bits, so a save/load round trip is exact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Mat;
use crate::config::TrainConfig;
use crate::datamodel::{HeadId, PseudoLabelSet};
use crate::error::{Error, Result};
use crate::nethead::{tensor_shapes, HeadPair, HeadParameters, NORM_PLACEMENT};
use crate::trainer::{AdamState, OptimizerState, PseudoLabels, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CDLC";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    cdl_step: usize,
    epoch_in_step: usize,
    norm_placement: String,
    main_dim: usize,
    aux_dim: usize,
    adam_steps: [u64; 2],
    pseudo_labels: Option<LabelIndex>,
}

/// Video ids and label lengths; the values live in the payload.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelIndex {
    cdl_step: usize,
    videos: Vec<(String, usize)>,
}

/// `dir/step-NNN.ckpt`
pub fn checkpoint_path(dir: &Path, cdl_step: usize) -> PathBuf {
    dir.join(format!("step-{cdl_step:03}.ckpt"))
}

fn put_head(out: &mut Vec<u8>, h: &HeadParameters) {
    for t in h.tensors() {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let labels = state.pseudo_labels.as_ref().map(|pl| LabelIndex {
        cdl_step: pl.main.cdl_step,
        videos: pl.main.labels.iter().map(|(k, v)| (k.clone(), v.len())).collect(),
    });
    if let Some(pl) = &state.pseudo_labels {
        let same_ids = pl.main.labels.len() == pl.aux.labels.len()
            && pl
                .main
                .labels
                .iter()
                .zip(&pl.aux.labels)
                .all(|((ka, va), (kb, vb))| ka == kb && va.len() == vb.len());
        if !same_ids || pl.main.cdl_step != pl.aux.cdl_step {
            return Err(Error::InvalidConfig("pseudo-label sets of the two heads disagree".into()));
        }
    }
    let header = Header {
        config: state.config.clone(),
        cdl_step: state.cdl_step,
        epoch_in_step: state.epoch_in_step,
        norm_placement: NORM_PLACEMENT.to_string(),
        main_dim: state.heads.main.input_dim(),
        aux_dim: state.heads.aux.input_dim(),
        adam_steps: [state.optimizer.main.step, state.optimizer.aux.step],
        pseudo_labels: labels,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Json {
        context: "checkpoint header".into(),
        source: e,
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for head in HeadId::BOTH {
        let adam = state.optimizer.get(head);
        put_head(&mut out, state.heads.get(head));
        put_head(&mut out, &adam.first);
        put_head(&mut out, &adam.second);
    }
    if let Some(pl) = &state.pseudo_labels {
        for set in [&pl.main, &pl.aux] {
            for v in set.labels.values().flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.at.checked_add(n)?;
        let s = self.bytes.get(self.at..end)?;
        self.at = end;
        Some(s)
    }

    fn f64s(&mut self, n: usize) -> Vec<f64> {
        // callers have already checked the total payload length
        let raw = self.take(n * 8).expect("payload length checked");
        raw.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    }

    fn head(&mut self, d: usize) -> Result<HeadParameters> {
        let tensors: Vec<Mat> = tensor_shapes(d)
            .into_iter()
            .map(|(r, c)| Mat::from_shape_vec((r, c), self.f64s(r * c)).expect("shape"))
            .collect();
        HeadParameters::from_tensors(d, tensors)
    }
}

fn head_len(d: usize) -> Option<usize> {
    tensor_shapes(d)
        .into_iter()
        .try_fold(0usize, |acc, (r, c)| acc.checked_add(r.checked_mul(c)?))
}

/// Decodes a checkpoint. `origin` only labels errors.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<TrainState> {
    let bad = |reason: String| Error::BadCheckpoint {
        path: origin.to_path_buf(),
        reason,
    };
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: origin.to_path_buf(),
        });
    }
    if bytes.len() < 16 + DIGEST_LEN {
        return Err(bad("truncated".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: origin.to_path_buf(),
            version,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, at: 8 };
    let header_len = u64::from_le_bytes(r.take(8).expect("length checked").try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| bad("header length overflows".into()))?;
    let json = r.take(header_len).ok_or_else(|| bad("header runs past end of file".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
    if header.norm_placement != NORM_PLACEMENT {
        return Err(bad(format!(
            "checkpoint uses `{}` layer norm placement, this build implements `{NORM_PLACEMENT}`",
            header.norm_placement
        )));
    }
    header.config.validate().map_err(|e| bad(format!("config: {e}")))?;
    if header.cdl_step > header.config.cdl_steps {
        return Err(bad("CDL step exceeds the configured schedule".into()));
    }
    let label_len = match &header.pseudo_labels {
        Some(ix) => ix
            .videos
            .iter()
            .try_fold(0usize, |acc, (_, n)| acc.checked_add(*n))
            .and_then(|n| n.checked_mul(2)),
        None => Some(0),
    };
    let expected = head_len(header.main_dim)
        .and_then(|m| head_len(header.aux_dim).and_then(|a| m.checked_add(a)))
        .and_then(|n| n.checked_mul(3))
        .and_then(|n| n.checked_add(label_len?))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| bad("payload size overflows".into()))?;
    if body.len() - r.at != expected {
        return Err(bad(format!(
            "payload is {} bytes, header implies {expected}",
            body.len() - r.at
        )));
    }
    let mut heads = Vec::with_capacity(2);
    let mut moments = Vec::with_capacity(2);
    for (d, step) in [(header.main_dim, header.adam_steps[0]), (header.aux_dim, header.adam_steps[1])] {
        let params = r.head(d)?;
        let first = r.head(d)?;
        let second = r.head(d)?;
        if !(params.is_finite() && first.is_finite() && second.is_finite()) {
            return Err(bad("non-finite parameters".into()));
        }
        heads.push(params);
        moments.push(AdamState { step, first, second });
    }
    let n_label_videos = header.pseudo_labels.as_ref().map_or(0, |ix| ix.videos.len());
    let pseudo_labels = header.pseudo_labels.map(|ix| {
        let mut sets = HeadId::BOTH.map(|head_id| PseudoLabelSet {
            head_id,
            cdl_step: ix.cdl_step,
            labels: Default::default(),
        });
        for set in &mut sets {
            for (id, n) in &ix.videos {
                set.labels.insert(id.clone(), r.f64s(*n));
            }
        }
        let [main, aux] = sets;
        PseudoLabels { main, aux }
    });
    if pseudo_labels.as_ref().is_some_and(|pl| pl.main.labels.len() != n_label_videos) {
        return Err(bad("duplicate video ids in pseudo-labels".into()));
    }
    let aux = heads.pop().expect("two heads");
    let main = heads.pop().expect("two heads");
    let aux_m = moments.pop().expect("two heads");
    let main_m = moments.pop().expect("two heads");
    Ok(TrainState {
        config: header.config,
        heads: HeadPair { main, aux },
        optimizer: OptimizerState { main: main_m, aux: aux_m },
        pseudo_labels,
        cdl_step: header.cdl_step,
        epoch_in_step: header.epoch_in_step,
    })
}

pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = encode(state)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
