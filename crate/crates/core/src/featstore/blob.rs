//! `CDLF` feature blobs: little-endian header followed by row-major `f32` data.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CDLF"
//! 4       4     format version (u32, currently 1)
//! 8       4     T, timestep count (u32)
//! 12      4     D, feature dimension (u32)
//! 16      4*T*D values, row-major f32
//! ```

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const BLOB_MAGIC: &[u8; 4] = b"CDLF";
pub const BLOB_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Raw backbone output for one stream of one video, `T x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBlob {
    data: Array2<f32>,
}

impl FeatureBlob {
    pub fn new(data: Array2<f32>) -> Self {
        Self { data }
    }

    pub fn timesteps(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f32> {
        self.data
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
}

/// Decodes a blob held in memory. `origin` only labels error messages.
pub fn decode_blob(bytes: &[u8], origin: &Path) -> Result<FeatureBlob> {
    if bytes.len() < 4 || &bytes[..4] != BLOB_MAGIC {
        return Err(Error::BadMagic {
            path: origin.to_path_buf(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::ShapeMismatch {
            path: origin.to_path_buf(),
            reason: format!("header truncated at {} bytes", bytes.len()),
        });
    }
    let version = read_u32(bytes, 4);
    if version != BLOB_VERSION {
        return Err(Error::UnsupportedVersion {
            path: origin.to_path_buf(),
            version,
        });
    }
    let t = read_u32(bytes, 8) as usize;
    let d = read_u32(bytes, 12) as usize;
    if d == 0 {
        return Err(Error::ShapeMismatch {
            path: origin.to_path_buf(),
            reason: "feature dimension is zero".into(),
        });
    }
    if t == 0 {
        return Err(Error::EmptyBlob);
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::ShapeMismatch {
            path: origin.to_path_buf(),
            reason: format!("header shape {t}x{d} overflows"),
        })?;
    if payload.len() != expected {
        return Err(Error::ShapeMismatch {
            path: origin.to_path_buf(),
            reason: format!(
                "header declares {t}x{d} ({expected} bytes) but payload has {} bytes",
                payload.len()
            ),
        });
    }
    let mut values = Vec::with_capacity(t * d);
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        if !v.is_finite() {
            return Err(Error::NonFiniteData {
                path: origin.to_path_buf(),
                row: k / d,
                col: k % d,
            });
        }
        values.push(v);
    }
    let data = Array2::from_shape_vec((t, d), values).expect("length checked above");
    Ok(FeatureBlob { data })
}

pub fn encode_blob(blob: &FeatureBlob) -> Vec<u8> {
    let (t, d) = blob.data.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * d);
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in blob.data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_blob(path: &Path) -> Result<FeatureBlob> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_blob(&bytes, path)
}

pub fn write_blob(path: &Path, blob: &FeatureBlob) -> Result<()> {
    std::fs::write(path, encode_blob(blob)).map_err(|e| Error::io(path, e))
}
