use ndarray::Array2;

use super::blob::FeatureBlob;
use crate::error::{Error, Result};

/// Resamples a `T x D` blob to `n_s` rows by linear interpolation along time.
///
/// Sample positions are endpoint-aligned: row `j` is taken at
/// `t_j = j * (T - 1) / (n_s - 1)`, so the first and last input rows are
/// reproduced exactly. A single-row blob is broadcast to every segment.
pub fn pool_segments(blob: &FeatureBlob, n_s: usize) -> Result<Array2<f64>> {
    let data = blob.data();
    let (t, d) = data.dim();
    if t == 0 {
        return Err(Error::EmptyBlob);
    }
    if n_s < 2 {
        return Err(Error::InvalidConfig(format!(
            "segment count must be at least 2, got {n_s}"
        )));
    }
    let mut out = Array2::<f64>::zeros((n_s, d));
    for j in 0..n_s {
        let (lo, frac) = if t == 1 {
            (0, 0.0)
        } else {
            let num = j * (t - 1);
            let den = n_s - 1;
            let lo = num / den;
            (lo, (num % den) as f64 / den as f64)
        };
        let hi = (lo + 1).min(t - 1);
        for c in 0..d {
            let a = f64::from(data[[lo, c]]);
            let b = f64::from(data[[hi, c]]);
            let v = a + frac * (b - a);
            out[[j, c]] = v.clamp(a.min(b), a.max(b));
        }
    }
    Ok(out)
}
