//! Mini-batch composition. Within an epoch every labeled and external video
//! is drawn at most once.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Indices of an (abnormal, normal) labeled pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabeledPair {
    pub abnormal: usize,
    pub normal: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Batch {
    pub pairs: Vec<LabeledPair>,
    pub external: Vec<usize>,
}

fn shuffled_pairs<R: Rng + ?Sized>(abnormal: &[usize], normal: &[usize], rng: &mut R) -> Vec<LabeledPair> {
    let mut a = abnormal.to_vec();
    let mut n = normal.to_vec();
    a.shuffle(rng);
    n.shuffle(rng);
    a.into_iter()
        .zip(n)
        .map(|(abnormal, normal)| LabeledPair { abnormal, normal })
        .collect()
}

/// Labeled-only epoch: `pairs_per_batch` pairs per batch, the last batch may
/// be short. Pairs are formed after shuffling each class, so the larger class
/// contributes only as many videos as the smaller one per epoch.
pub fn plan_labeled_epoch<R: Rng + ?Sized>(
    abnormal: &[usize],
    normal: &[usize],
    pairs_per_batch: usize,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    if abnormal.is_empty() || normal.is_empty() {
        return Err(Error::DegenerateCorpus);
    }
    if pairs_per_batch == 0 {
        return Err(Error::InvalidConfig("pairs per batch must be positive".into()));
    }
    Ok(shuffled_pairs(abnormal, normal, rng)
        .chunks(pairs_per_batch)
        .map(|c| Batch {
            pairs: c.to_vec(),
            external: Vec::new(),
        })
        .collect())
}

fn check_batch_size(batch_size: usize) -> Result<()> {
    if batch_size == 0 || batch_size % 4 != 0 {
        return Err(Error::InvalidConfig(format!(
            "batch size {batch_size} is not a positive multiple of 4"
        )));
    }
    Ok(())
}

/// Joint epoch over labeled pairs and external videos: every batch holds
/// `B/4` pairs and `B/2` external videos. The epoch ends when either pool
/// cannot fill another full batch.
pub fn plan_joint_epoch<R: Rng + ?Sized>(
    abnormal: &[usize],
    normal: &[usize],
    n_external: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    check_batch_size(batch_size)?;
    let (per_pairs, per_ext) = (batch_size / 4, batch_size / 2);
    if abnormal.len() < per_pairs || normal.len() < per_pairs {
        return Err(Error::InsufficientVideos(format!(
            "a batch of {batch_size} needs {per_pairs} abnormal and {per_pairs} normal labeled videos, have {} and {}",
            abnormal.len(),
            normal.len()
        )));
    }
    if n_external < per_ext {
        return Err(Error::InsufficientVideos(format!(
            "a batch of {batch_size} needs {per_ext} external videos, have {n_external}"
        )));
    }
    let pairs = shuffled_pairs(abnormal, normal, rng);
    let mut ext: Vec<usize> = (0..n_external).collect();
    ext.shuffle(rng);
    let n_batches = (pairs.len() / per_pairs).min(n_external / per_ext);
    Ok((0..n_batches)
        .map(|b| Batch {
            pairs: pairs[b * per_pairs..(b + 1) * per_pairs].to_vec(),
            external: ext[b * per_ext..(b + 1) * per_ext].to_vec(),
        })
        .collect())
}

/// Draws a single joint batch: `B/4` labeled pairs and `B/2` external videos.
pub fn compose_batch<R: Rng + ?Sized>(
    abnormal: &[usize],
    normal: &[usize],
    n_external: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Batch> {
    plan_joint_epoch(abnormal, normal, n_external, batch_size, rng)
        .map(|mut plan| plan.swap_remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn batch_of_64_holds_16_pairs_and_32_external() {
        let abn: Vec<usize> = (0..20).collect();
        let nor: Vec<usize> = (20..40).collect();
        let b = compose_batch(&abn, &nor, 50, 64, &mut rng()).unwrap();
        assert_eq!((b.pairs.len(), b.external.len()), (16, 32));
    }

    #[test]
    fn smallest_legal_batch() {
        let b = compose_batch(&[0], &[1], 2, 4, &mut rng()).unwrap();
        assert_eq!(b.pairs, vec![LabeledPair { abnormal: 0, normal: 1 }]);
        assert_eq!(b.external.len(), 2);
    }

    #[test]
    fn batch_of_6_is_rejected() {
        assert!(matches!(
            compose_batch(&[0, 1], &[2, 3], 10, 6, &mut rng()),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            compose_batch(&[0], &[2, 3], 10, 8, &mut rng()),
            Err(Error::InsufficientVideos(_))
        ));
        assert!(matches!(
            compose_batch(&[0, 1], &[2, 3], 3, 8, &mut rng()),
            Err(Error::InsufficientVideos(_))
        ));
    }

    #[test]
    fn no_video_repeats_within_an_epoch() {
        let abn: Vec<usize> = (0..13).collect();
        let nor: Vec<usize> = (13..30).collect();
        let plan = plan_joint_epoch(&abn, &nor, 40, 8, &mut rng()).unwrap();
        assert_eq!(plan.len(), 6);
        let mut labeled = HashSet::new();
        let mut external = HashSet::new();
        for b in &plan {
            for p in &b.pairs {
                assert!(labeled.insert(p.abnormal) && labeled.insert(p.normal));
                assert!(p.abnormal < 13 && p.normal >= 13);
            }
            for e in &b.external {
                assert!(external.insert(*e));
            }
        }
    }

    #[test]
    fn labeled_epoch_with_one_pair_is_one_batch() {
        let plan = plan_labeled_epoch(&[0], &[1], 32, &mut rng()).unwrap();
        assert_eq!(plan.len(), 1);
        assert!(matches!(
            plan_labeled_epoch(&[], &[1], 32, &mut rng()),
            Err(Error::DegenerateCorpus)
        ));
    }
}
