//! Identity-balanced batch construction.
//!
//! One anchor identity contributes `P` images; `N` further identities
//! contribute one image each. An anchor identity with only `k < P` images
//! yields a `k / (batch_size − k)` split instead.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::RankingBatch;

/// Portable seeded generator used everywhere randomness is needed.
///
/// ChaCha with 8 rounds, seeded through `SeedableRng::seed_from_u64`; its
/// output stream is fixed by the ChaCha specification and does not depend
/// on platform or word size.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Records grouped by identity. Identities are held in ascending label order.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    labels: Vec<String>,
    members: Vec<Vec<usize>>,
    record_identity: Vec<usize>,
    record_camera: Vec<String>,
}

impl DatasetIndex {
    pub fn new<S: AsRef<str>, C: AsRef<str>>(identities: &[S], cameras: &[C]) -> Result<Self> {
        if identities.len() != cameras.len() {
            return Err(Error::Shape(format!(
                "{} identity labels but {} camera labels",
                identities.len(),
                cameras.len()
            )));
        }
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (r, id) in identities.iter().enumerate() {
            groups.entry(id.as_ref()).or_default().push(r);
        }
        let mut record_identity = vec![0; identities.len()];
        let mut labels = Vec::with_capacity(groups.len());
        let mut members = Vec::with_capacity(groups.len());
        for (i, (label, rows)) in groups.into_iter().enumerate() {
            for &r in &rows {
                record_identity[r] = i;
            }
            labels.push(label.to_string());
            members.push(rows);
        }
        Ok(DatasetIndex {
            labels,
            members,
            record_identity,
            record_camera: cameras.iter().map(|c| c.as_ref().to_string()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.record_identity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record_identity.is_empty()
    }

    pub fn identity_count(&self) -> usize {
        self.labels.len()
    }

    pub fn label(&self, identity: usize) -> &str {
        &self.labels[identity]
    }

    pub fn members(&self, identity: usize) -> &[usize] {
        &self.members[identity]
    }

    pub fn record_identity(&self, record: usize) -> usize {
        self.record_identity[record]
    }

    pub fn record_camera(&self, record: usize) -> &str {
        &self.record_camera[record]
    }
}

/// Identities with at least two images, ascending.
pub fn eligible_identities(index: &DatasetIndex) -> Vec<usize> {
    (0..index.identity_count())
        .filter(|&i| index.members(i).len() >= 2)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub positives: usize,
    pub negatives: usize,
}

impl BatchSpec {
    pub fn new(positives: usize, negatives: usize) -> Result<Self> {
        let spec = BatchSpec {
            positives,
            negatives,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.positives < 2 || self.negatives < 1 {
            return Err(Error::Config(format!(
                "batch needs P >= 2 and N >= 1, got {}/{}",
                self.positives, self.negatives
            )));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.positives + self.negatives
    }

    /// Effective `(P', N')` for an anchor identity with `k` images.
    pub fn split_for(&self, k: usize) -> (usize, usize) {
        let p = self.positives.min(k);
        (p, self.batch_size() - p)
    }

    /// Checks that every eligible anchor identity can be completed into a
    /// full batch.
    pub fn check_feasible(&self, index: &DatasetIndex) -> Result<()> {
        let eligible = eligible_identities(index);
        if eligible.is_empty() {
            return Err(Error::InsufficientData {
                what: "identities with at least 2 images",
                needed: 1,
                available: 0,
            });
        }
        let others = index.identity_count() - 1;
        for &id in &eligible {
            let (_, n) = self.split_for(index.members(id).len());
            if others < n {
                return Err(Error::InsufficientData {
                    what: "negative identities",
                    needed: n,
                    available: others,
                });
            }
        }
        Ok(())
    }
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            positives: 10,
            negatives: 54,
        }
    }
}

/// One sampled batch: positives of the anchor identity first, then one
/// record from each negative identity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampledBatch {
    pub records: Vec<usize>,
    pub identities: Vec<usize>,
    pub anchor_identity: usize,
    pub positive_count: usize,
}

impl SampledBatch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn negative_count(&self) -> usize {
        self.records.len() - self.positive_count
    }

    /// Ranking structure with the first positive row as anchor.
    pub fn ranking(&self) -> RankingBatch {
        RankingBatch::from_labels(&self.identities, 0)
    }
}

pub fn sample_batch<R: Rng + ?Sized>(
    index: &DatasetIndex,
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<SampledBatch> {
    let eligible = eligible_identities(index);
    if eligible.is_empty() {
        return Err(Error::InsufficientData {
            what: "identities with at least 2 images",
            needed: 1,
            available: 0,
        });
    }
    let anchor = eligible[rng.random_range(0..eligible.len())];
    let pool = index.members(anchor);
    let (p, n) = spec.split_for(pool.len());
    let others = index.identity_count() - 1;
    if others < n {
        return Err(Error::InsufficientData {
            what: "negative identities",
            needed: n,
            available: others,
        });
    }

    let mut records = Vec::with_capacity(p + n);
    let mut identities = Vec::with_capacity(p + n);
    for i in index::sample(rng, pool.len(), p) {
        records.push(pool[i]);
        identities.push(anchor);
    }
    for j in index::sample(rng, others, n) {
        let id = if j >= anchor { j + 1 } else { j };
        let imgs = index.members(id);
        records.push(imgs[rng.random_range(0..imgs.len())]);
        identities.push(id);
    }
    Ok(SampledBatch {
        records,
        identities,
        anchor_identity: anchor,
        positive_count: p,
    })
}

/// A batch source that owns its generator.
#[derive(Clone, Debug)]
pub struct Sampler {
    spec: BatchSpec,
    rng: SeededRng,
}

impl Sampler {
    pub fn new(spec: BatchSpec, seed: u64) -> Self {
        Sampler {
            spec,
            rng: seeded_rng(seed),
        }
    }

    pub fn spec(&self) -> &BatchSpec {
        &self.spec
    }

    pub fn next_batch(&mut self, index: &DatasetIndex) -> Result<SampledBatch> {
        sample_batch(index, &self.spec, &mut self.rng)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn index_from_counts(counts: &[usize]) -> DatasetIndex {
        let mut ids = Vec::new();
        for (i, &c) in counts.iter().enumerate() {
            ids.extend(std::iter::repeat_n(format!("id{i:04}"), c));
        }
        let cams: Vec<String> = (0..ids.len()).map(|r| format!("c{}", r % 2)).collect();
        DatasetIndex::new(&ids, &cams).unwrap()
    }

    #[test]
    fn eligible_filters_singletons() {
        let idx = DatasetIndex::new(
            &["A", "A", "A", "B", "C", "C"],
            &["0", "1", "0", "1", "0", "1"],
        )
        .unwrap();
        let e: Vec<&str> = eligible_identities(&idx)
            .iter()
            .map(|&i| idx.label(i))
            .collect();
        assert_eq!(e, ["A", "C"]);
        let empty = DatasetIndex::new::<&str, &str>(&[], &[]).unwrap();
        assert!(eligible_identities(&empty).is_empty());
    }

    #[test]
    fn default_split_is_ten_fifty_four() {
        let mut counts = vec![12];
        counts.extend(std::iter::repeat_n(3, 70));
        let idx = index_from_counts(&counts);
        let mut rng = seeded_rng(1);
        for _ in 0..50 {
            let b = sample_batch(&idx, &BatchSpec::default(), &mut rng).unwrap();
            assert_eq!(b.len(), 64);
            let anchor_k = idx.members(b.anchor_identity).len();
            let expected_p = anchor_k.min(10);
            assert_eq!(b.positive_count, expected_p);
            let negs: HashSet<usize> = b.identities[b.positive_count..].iter().copied().collect();
            assert_eq!(negs.len(), 64 - expected_p);
            assert!(!negs.contains(&b.anchor_identity));
        }
    }

    #[test]
    fn small_identity_uses_k_split() {
        let mut counts = vec![4];
        counts.extend(std::iter::repeat_n(1, 60));
        let idx = index_from_counts(&counts);
        let b = sample_batch(&idx, &BatchSpec::default(), &mut seeded_rng(3)).unwrap();
        assert_eq!((b.positive_count, b.negative_count()), (4, 60));
    }

    #[test]
    fn negative_pool_boundary() {
        let mut counts = vec![10];
        counts.extend(std::iter::repeat_n(1, 54));
        let idx = index_from_counts(&counts);
        assert_eq!(idx.identity_count(), 55);
        assert!(sample_batch(&idx, &BatchSpec::default(), &mut seeded_rng(0)).is_ok());

        counts.pop();
        let idx = index_from_counts(&counts);
        let err = sample_batch(&idx, &BatchSpec::default(), &mut seeded_rng(0)).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientData {
                needed: 54,
                available: 53,
                ..
            }
        ));
        assert!(BatchSpec::default().check_feasible(&idx).is_err());
    }

    #[test]
    fn same_seed_same_batches() {
        let idx = index_from_counts(&[8; 70]);
        let mut a = Sampler::new(BatchSpec::default(), 42);
        let mut b = Sampler::new(BatchSpec::default(), 42);
        for _ in 0..20 {
            assert_eq!(a.next_batch(&idx).unwrap(), b.next_batch(&idx).unwrap());
        }
    }

    #[test]
    fn ranking_view_uses_first_row() {
        let idx = index_from_counts(&[3, 1, 1]);
        let b = sample_batch(&idx, &BatchSpec::new(2, 2).unwrap(), &mut seeded_rng(9)).unwrap();
        let rb = b.ranking();
        assert_eq!(rb.anchor(), 0);
        assert_eq!(rb.positives(), &[1]);
        assert_eq!(rb.negatives(), &[2, 3]);
    }
}
