//! Scalar objectives: MIL ranking loss, per-segment BCE against soft
//! pseudo-labels, the cosine-based surrogate variance, the uncertainty
//! weighted external loss and the total objective.
//!
//! Each objective exists twice: a plain evaluation over slices and a
//! tape-recording builder used for training gradients. Tests check that the
//! two routes agree.

use ndarray::{ArrayView1, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var, COSINE_NORM_FLOOR};
use crate::datamodel::UncertaintyScores;
use crate::error::{Error, Result};

/// Probability clamp used inside the BCE logarithms.
pub const BCE_EPS: f64 = 1e-7;

/// One optimization step's objective, term by term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rank: f64,
    pub hinge: f64,
    pub temporal_smoothness: f64,
    pub sparsity: f64,
    pub ext: f64,
    pub bce_weighted: f64,
    pub cosine_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Ranking-only breakdown (no external data).
    pub fn from_rank(rank: RankTerms) -> Self {
        Self {
            rank: rank.rank,
            hinge: rank.hinge,
            temporal_smoothness: rank.temporal_smoothness,
            sparsity: rank.sparsity,
            total: rank.rank,
            ..Self::default()
        }
    }

    pub fn with_external(rank: RankTerms, ext: ExternalTerms, lambda4: f64) -> Self {
        Self {
            ext: ext.ext,
            bce_weighted: ext.bce_weighted,
            cosine_term: ext.cosine_term,
            total: total_loss(rank.rank, ext.ext, lambda4),
            ..Self::from_rank(rank)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankTerms {
    pub rank: f64,
    pub hinge: f64,
    pub temporal_smoothness: f64,
    pub sparsity: f64,
}

impl RankTerms {
    pub fn add(self, other: RankTerms) -> RankTerms {
        RankTerms {
            rank: self.rank + other.rank,
            hinge: self.hinge + other.hinge,
            temporal_smoothness: self.temporal_smoothness + other.temporal_smoothness,
            sparsity: self.sparsity + other.sparsity,
        }
    }

    pub fn scale(self, c: f64) -> RankTerms {
        RankTerms {
            rank: self.rank * c,
            hinge: self.hinge * c,
            temporal_smoothness: self.temporal_smoothness * c,
            sparsity: self.sparsity * c,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExternalTerms {
    pub ext: f64,
    pub bce_weighted: f64,
    pub cosine_term: f64,
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::VectorLengthMismatch { left: a, right: b });
    }
    Ok(())
}

/// Ranking loss for one (abnormal, normal) pair of bags.
///
/// Hinge on the two bag maxima, plus temporal smoothness and sparsity on the
/// abnormal bag only.
pub fn ranking_loss(abnormal: &[f64], normal: &[f64], lambda1: f64, lambda2: f64) -> Result<RankTerms> {
    same_len(abnormal.len(), normal.len())?;
    if abnormal.is_empty() {
        return Err(Error::EmptyInput);
    }
    let max_a = abnormal.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let max_n = normal.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let hinge = (1.0 - max_a + max_n).max(0.0);
    let temporal_smoothness = abnormal.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    let sparsity = abnormal.iter().sum();
    Ok(RankTerms {
        rank: hinge + lambda1 * temporal_smoothness + lambda2 * sparsity,
        hinge,
        temporal_smoothness,
        sparsity,
    })
}

/// Per-segment binary cross-entropy of predictions `p` against soft targets.
pub fn bce_loss(p: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    same_len(p.len(), target.len())?;
    Ok(p.iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
        })
        .collect())
}

/// Cosine similarity with the zero-norm convention (0 when either norm is
/// below [`COSINE_NORM_FLOOR`]), clamped to `[-1, 1]`.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na2 = a.dot(&a);
    let nb2 = b.dot(&b);
    if na2.sqrt() < COSINE_NORM_FLOOR || nb2.sqrt() < COSINE_NORM_FLOOR {
        return 0.0;
    }
    (a.dot(&b) / (na2 * nb2).sqrt()).clamp(-1.0, 1.0)
}

fn same_shape(a: &Mat, b: &Mat) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "penultimate shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Segment-wise surrogate variance `exp(tau * (cos(z_m, z_a) - 1))`.
pub fn surrogate_variance(z_main: &Mat, z_aux: &Mat, tau: f64) -> Result<UncertaintyScores> {
    same_shape(z_main, z_aux)?;
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    Ok(UncertaintyScores(
        z_main
            .rows()
            .into_iter()
            .zip(z_aux.rows())
            .map(|(a, b)| (tau * (cosine(a, b) - 1.0)).exp())
            .collect(),
    ))
}

/// Mean squared disagreement between the two heads' scores. Diagnostic only.
pub fn probability_variance(p_main: &[f64], p_aux: &[f64]) -> Result<f64> {
    same_len(p_main.len(), p_aux.len())?;
    if p_main.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(p_main
        .iter()
        .zip(p_aux)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / p_main.len() as f64)
}

/// One external video's contribution to the external loss.
pub struct ExternalVideo<'a> {
    pub uncertainty: &'a [f64],
    pub bce: &'a [f64],
    pub z_main: &'a Mat,
    pub z_aux: &'a Mat,
}

/// Uncertainty-weighted external loss averaged over all segments of all
/// videos in the batch: `mean(S * bce - lambda3 * cos(z_m, z_a))`.
pub fn external_loss(videos: &[ExternalVideo<'_>], lambda3: f64) -> Result<ExternalTerms> {
    if videos.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut weighted = 0.0;
    let mut cos_sum = 0.0;
    let mut count = 0usize;
    for v in videos {
        same_len(v.uncertainty.len(), v.bce.len())?;
        same_shape(v.z_main, v.z_aux)?;
        same_len(v.bce.len(), v.z_main.nrows())?;
        for (j, (&s, &b)) in v.uncertainty.iter().zip(v.bce).enumerate() {
            weighted += s * b;
            cos_sum += cosine(v.z_main.row(j), v.z_aux.row(j));
            count += 1;
        }
    }
    let n = count as f64;
    let bce_weighted = weighted / n;
    let cosine_term = cos_sum / n;
    Ok(ExternalTerms {
        ext: bce_weighted - lambda3 * cosine_term,
        bce_weighted,
        cosine_term,
    })
}

pub fn total_loss(rank: f64, ext: f64, lambda4: f64) -> f64 {
    rank + lambda4 * ext
}

/// Tape handles for the ranking terms.
#[derive(Clone, Copy, Debug)]
pub struct RankVars {
    pub rank: Var,
    pub hinge: Var,
    pub temporal_smoothness: Var,
    pub sparsity: Var,
}

impl RankVars {
    pub fn values(&self, tape: &Tape) -> RankTerms {
        RankTerms {
            rank: tape.scalar(self.rank),
            hinge: tape.scalar(self.hinge),
            temporal_smoothness: tape.scalar(self.temporal_smoothness),
            sparsity: tape.scalar(self.sparsity),
        }
    }
}

/// Records the ranking loss of one pair; `abnormal` and `normal` are `n_s x 1`.
pub fn ranking_loss_tape(tape: &mut Tape, abnormal: Var, normal: Var, lambda1: f64, lambda2: f64) -> Result<RankVars> {
    let (na, nn) = (tape.value(abnormal).len(), tape.value(normal).len());
    same_len(na, nn)?;
    let max_a = tape.max(abnormal);
    let max_n = tape.max(normal);
    let gap = tape.sub(max_n, max_a);
    let margin = tape.offset(gap, 1.0);
    let hinge = tape.relu(margin);
    let temporal_smoothness = if na > 1 {
        let later = tape.slice_rows(abnormal, 1, na);
        let earlier = tape.slice_rows(abnormal, 0, na - 1);
        let diff = tape.sub(later, earlier);
        let sq = tape.square(diff);
        tape.sum(sq)
    } else {
        tape.scalar_constant(0.0)
    };
    let sparsity = tape.sum(abnormal);
    let ts = tape.scale(temporal_smoothness, lambda1);
    let sp = tape.scale(sparsity, lambda2);
    let rank = tape.add(hinge, ts);
    let rank = tape.add(rank, sp);
    Ok(RankVars {
        rank,
        hinge,
        temporal_smoothness,
        sparsity,
    })
}

/// Records per-segment BCE of an `n x 1` prediction column against constant
/// soft targets.
pub fn bce_loss_tape(tape: &mut Tape, p: Var, target: &[f64]) -> Result<Var> {
    same_len(tape.value(p).len(), target.len())?;
    let y = tape.column(target);
    let one_minus_y = tape.column(&target.iter().map(|y| 1.0 - y).collect::<Vec<_>>());
    let pc = tape.clamp(p, BCE_EPS, 1.0 - BCE_EPS);
    let log_p = tape.ln(pc);
    let q = tape.scale(pc, -1.0);
    let q = tape.offset(q, 1.0);
    let log_q = tape.ln(q);
    let a = tape.mul(y, log_p);
    let b = tape.mul(one_minus_y, log_q);
    let s = tape.add(a, b);
    Ok(tape.scale(s, -1.0))
}

/// Tape handles for the external loss terms.
#[derive(Clone, Copy, Debug)]
pub struct ExternalVars {
    pub ext: Var,
    pub bce_weighted: Var,
    pub cosine_term: Var,
}

impl ExternalVars {
    pub fn values(&self, tape: &Tape) -> ExternalTerms {
        ExternalTerms {
            ext: tape.scalar(self.ext),
            bce_weighted: tape.scalar(self.bce_weighted),
            cosine_term: tape.scalar(self.cosine_term),
        }
    }
}

/// One external video on the tape: per-segment BCE column, both heads'
/// penultimate activations, and the (non-differentiated) uncertainty weights.
pub struct ExternalVideoVars<'a> {
    pub uncertainty: &'a [f64],
    pub bce: Var,
    pub z_main: Var,
    pub z_aux: Var,
}

/// Records the external loss. The uncertainty weights enter as constants so
/// only the BCE and cosine terms carry gradients.
pub fn external_loss_tape(tape: &mut Tape, videos: &[ExternalVideoVars<'_>], lambda3: f64) -> Result<ExternalVars> {
    if videos.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut weighted = Vec::with_capacity(videos.len());
    let mut cosines = Vec::with_capacity(videos.len());
    for v in videos {
        same_len(v.uncertainty.len(), tape.value(v.bce).len())?;
        if tape.value(v.z_main).dim() != tape.value(v.z_aux).dim() {
            return Err(Error::DimensionMismatch("penultimate shapes differ".into()));
        }
        let s = tape.column(v.uncertainty);
        weighted.push(tape.mul(s, v.bce));
        cosines.push(tape.row_cosine(v.z_main, v.z_aux));
    }
    let weighted = tape.concat_rows(&weighted);
    let cosines = tape.concat_rows(&cosines);
    let bce_weighted = tape.mean(weighted);
    let cosine_term = tape.mean(cosines);
    let cos_scaled = tape.scale(cosine_term, lambda3);
    let ext = tape.sub(bce_weighted, cos_scaled);
    Ok(ExternalVars {
        ext,
        bce_weighted,
        cosine_term,
    })
}

pub fn total_loss_tape(tape: &mut Tape, rank: Var, ext: Var, lambda4: f64) -> Var {
    let e = tape.scale(ext, lambda4);
    tape.add(rank, e)
}

/// Surrogate variance computed from tape values (no gradient).
pub fn surrogate_variance_of(tape: &Tape, z_main: Var, z_aux: Var, tau: f64) -> Result<UncertaintyScores> {
    surrogate_variance(tape.value(z_main), tape.value(z_aux), tau)
}

/// Column helper for tests and callers holding plain score vectors.
pub fn as_column(values: &[f64]) -> Mat {
    Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn ranking_examples() {
        let r = ranking_loss(&[0.2, 1.0], &[0.0, 0.0], 0.0, 0.0).unwrap();
        assert_eq!(r.rank, 0.0);
        let r = ranking_loss(&[0.3, 0.7], &[0.7, 0.1], 0.0, 0.0).unwrap();
        assert_eq!(r.rank, 1.0);
        let r = ranking_loss(&[0.5, 0.5], &[0.0, 0.0], 0.0, 1.0).unwrap();
        assert!((r.hinge - 0.5).abs() < 1e-12);
        assert!((r.sparsity - 1.0).abs() < 1e-12);
        assert!((r.rank - 1.5).abs() < 1e-12);
        assert_eq!(r.temporal_smoothness, 0.0);
        assert!(ranking_loss(&[0.1], &[0.1, 0.2], 0.0, 0.0).is_err());
    }

    #[test]
    fn bce_examples() {
        assert!(bce_loss(&[1.0], &[1.0]).unwrap()[0] <= 1e-6);
        let ln2 = std::f64::consts::LN_2;
        assert!((bce_loss(&[0.5], &[0.5]).unwrap()[0] - ln2).abs() < 1e-12);
        assert!((bce_loss(&[0.5], &[1.0]).unwrap()[0] - ln2).abs() < 1e-12);
        assert!((bce_loss(&[0.5], &[1.0]).unwrap()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(&[0.5, 0.1], &[1.0]).is_err());
    }

    #[test]
    fn surrogate_variance_examples() {
        let same = array![[1.0, 2.0, 0.0]];
        assert_eq!(surrogate_variance(&same, &same, 1.25).unwrap().values(), &[1.0]);
        let orth = surrogate_variance(&array![[1.0, 0.0]], &array![[0.0, 3.0]], 1.25).unwrap();
        assert!((orth.values()[0] - (-1.25f64).exp()).abs() < 1e-15);
        assert!((orth.values()[0] - 0.286505).abs() < 1e-6);
        let anti = surrogate_variance(&array![[1.0, -2.0]], &array![[-2.0, 4.0]], 1.25).unwrap();
        assert!((anti.values()[0] - (-2.5f64).exp()).abs() < 1e-15);
        assert!((anti.values()[0] - 0.082085).abs() < 1e-6);
        let zero = surrogate_variance(&array![[0.0, 0.0]], &array![[1.0, 1.0]], 1.25).unwrap();
        assert!((zero.values()[0] - (-1.25f64).exp()).abs() < 1e-15);
        assert!(surrogate_variance(&array![[1.0]], &array![[1.0, 2.0]], 1.0).is_err());
    }

    #[test]
    fn probability_variance_examples() {
        assert_eq!(probability_variance(&[0.3, 0.9], &[0.3, 0.9]).unwrap(), 0.0);
        assert!((probability_variance(&[0.8], &[0.6]).unwrap() - 0.04).abs() < 1e-12);
        assert_eq!(probability_variance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(probability_variance(&[1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn external_loss_examples() {
        let z = array![[1.0, 2.0], [0.5, 0.1]];
        let bce = [0.2, 0.9];
        let ones = [1.0, 1.0];
        let e = external_loss(
            &[ExternalVideo { uncertainty: &ones, bce: &bce, z_main: &z, z_aux: &z }],
            0.0,
        )
        .unwrap();
        assert!((e.ext - 0.55).abs() < 1e-12);

        let zeros = [0.0, 0.0];
        let e = external_loss(
            &[ExternalVideo { uncertainty: &ones, bce: &zeros, z_main: &z, z_aux: &z }],
            1e-3,
        )
        .unwrap();
        assert!((e.ext + 1e-3).abs() < 1e-12);

        let zm = array![[1.0, 0.0]];
        let za = array![[0.0, 1.0]];
        let e = external_loss(
            &[ExternalVideo { uncertainty: &[0.5], bce: &[0.4], z_main: &zm, z_aux: &za }],
            1e-3,
        )
        .unwrap();
        assert!((e.ext - 0.2).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(1.3, 5.0, 0.0), 1.3);
        assert_eq!(total_loss(1.3, 0.0, 700.0), 1.3);
        assert_eq!(total_loss(1.0, 0.5, 700.0), 351.0);
    }

    #[test]
    fn tape_routes_match_plain_routes() {
        let a = [0.1, 0.7, 0.4, 0.3];
        let n = [0.2, 0.5, 0.05, 0.6];
        let mut tape = Tape::new();
        let av = tape.constant(as_column(&a));
        let nv = tape.constant(as_column(&n));
        let r = ranking_loss_tape(&mut tape, av, nv, 0.3, 0.2).unwrap().values(&tape);
        let plain = ranking_loss(&a, &n, 0.3, 0.2).unwrap();
        assert!((r.rank - plain.rank).abs() < 1e-14);
        assert!((r.temporal_smoothness - plain.temporal_smoothness).abs() < 1e-14);

        let y = [0.9, 0.1, 0.5, 0.0];
        let b = bce_loss_tape(&mut tape, av, &y).unwrap();
        for (x, e) in tape.value(b).iter().zip(bce_loss(&a, &y).unwrap()) {
            assert!((x - e).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn surrogate_bounds_and_scale_invariance(
            a in proptest::collection::vec(-3.0f64..3.0, 8),
            b in proptest::collection::vec(-3.0f64..3.0, 8),
            ka in 0.01f64..50.0, kb in 0.01f64..50.0, tau in 0.1f64..4.0,
        ) {
            let zm = Array2::from_shape_vec((2, 4), a).unwrap();
            let za = Array2::from_shape_vec((2, 4), b).unwrap();
            let s = surrogate_variance(&zm, &za, tau).unwrap();
            for &v in s.values() {
                prop_assert!(v <= 1.0 && v >= (-2.0 * tau).exp());
            }
            let scaled = surrogate_variance(&(&zm * ka), &(&za * kb), tau).unwrap();
            for (x, y) in s.values().iter().zip(scaled.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn ranking_is_non_negative(
            a in proptest::collection::vec(0.0f64..=1.0, 1..10),
            l1 in 0.0f64..1.0, l2 in 0.0f64..1.0,
        ) {
            let n: Vec<f64> = a.iter().rev().cloned().collect();
            let r = ranking_loss(&a, &n, l1, l2).unwrap();
            prop_assert!(r.rank >= 0.0 && r.hinge >= 0.0);
        }

        #[test]
        fn bce_non_negative(p in 0.0f64..=1.0, y in 0.0f64..=1.0) {
            prop_assert!(bce_loss(&[p], &[y]).unwrap()[0] >= 0.0);
        }

        #[test]
        fn external_loss_lower_bound(
            s in proptest::collection::vec(0.0f64..=1.0, 3),
            bce in proptest::collection::vec(0.0f64..5.0, 3),
            z in proptest::collection::vec(-1.0f64..1.0, 12),
            lambda3 in 0.0f64..1.0,
        ) {
            let zm = Array2::from_shape_vec((3, 2), z[..6].to_vec()).unwrap();
            let za = Array2::from_shape_vec((3, 2), z[6..].to_vec()).unwrap();
            let e = external_loss(
                &[ExternalVideo { uncertainty: &s, bce: &bce, z_main: &zm, z_aux: &za }],
                lambda3,
            ).unwrap();
            prop_assert!(e.ext >= -lambda3 - 1e-12);
        }

        #[test]
        fn breakdown_total_reconstructs(rank in 0.0f64..10.0, ext in -1.0f64..5.0, l4 in 0.0f64..3000.0) {
            let b = LossBreakdown::with_external(
                RankTerms { rank, ..RankTerms::default() },
                ExternalTerms { ext, ..ExternalTerms::default() },
                l4,
            );
            let expect = b.rank + l4 * b.ext;
            prop_assert!((b.total - expect).abs() <= 1e-9 * expect.abs().max(1.0));
        }
    }
}
