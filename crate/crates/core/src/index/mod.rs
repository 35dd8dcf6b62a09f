//! Exact flat nearest-neighbour search over unit-norm embeddings.
//!
//! Distances are squared L2. Results are ordered by ascending distance with
//! ties broken by insertion order, so a query always equals a sorted linear
//! scan of the stored rows.

mod persist;
mod shared;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use persist::INDEX_MAGIC;
pub use shared::SharedIndex;

/// Stored rows must be unit-norm within this tolerance.
pub const NORM_TOLERANCE: f64 = 1e-4;

/// Distance reported for hits that were sampled rather than ranked.
pub const RANDOM_HIT_DISTANCE: f32 = -1.0;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("vector for `{id}` is not unit-norm (norm {norm})")]
    NotNormalized { id: String, norm: f64 },
    #[error("index is empty")]
    EmptyIndex,
    #[error("invalid k = {k} (index holds {len})")]
    InvalidK { k: usize, len: usize },
    #[error("corrupt index file: {0}")]
    CorruptFile(String),
    #[error("unsupported index file version {0:?}")]
    VersionUnsupported(String),
    #[error("index I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub id: String,
    /// Squared L2 distance, or [`RANDOM_HIT_DISTANCE`] for random picks.
    pub distance: f32,
    /// 1-based.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    dim: usize,
    rows: Vec<f32>,
    ids: Vec<String>,
    positions: HashMap<String, usize>,
    version: u64,
}

/// Squared L2 accumulated in f64, in coordinate order.
pub(crate) fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt()
}

/// Max-heap entry: the worst candidate sits on top.
#[derive(PartialEq)]
struct Candidate {
    distance: f64,
    position: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.position.cmp(&other.position))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl FlatIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: Vec::new(),
            ids: Vec::new(),
            positions: HashMap::new(),
            version: 0,
        }
    }

    /// Builds an index holding `items` in the given order. The version of a
    /// freshly built index is 0.
    pub fn build<I, S, V>(dim: usize, items: I) -> Result<Self, IndexError>
    where
        I: IntoIterator<Item = (S, V)>,
        S: Into<String>,
        V: AsRef<[f32]>,
    {
        let mut index = Self::new(dim);
        for (id, v) in items {
            index.insert(id.into(), v.as_ref())?;
        }
        Ok(index)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    /// Returns a copy with the given version counter.
    pub fn with_version(mut self, version: u64) -> Self {
        self.version = version;
        self
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }

    pub fn row(&self, id: &str) -> Option<&[f32]> {
        self.positions.get(id).map(|&p| self.row_at(p))
    }

    fn row_at(&self, position: usize) -> &[f32] {
        &self.rows[position * self.dim..(position + 1) * self.dim]
    }

    pub(crate) fn raw_rows(&self) -> &[f32] {
        &self.rows
    }

    fn check_vector(&self, id: &str, vector: &[f32]) -> Result<(), IndexError> {
        if vector.len() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        let norm = l2_norm(vector);
        if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(IndexError::NotNormalized {
                id: id.to_string(),
                norm,
            });
        }
        Ok(())
    }

    fn insert(&mut self, id: String, vector: &[f32]) -> Result<(), IndexError> {
        self.check_vector(&id, vector)?;
        if self.positions.contains_key(&id) {
            return Err(IndexError::DuplicateId(id));
        }
        self.positions.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.rows.extend_from_slice(vector);
        Ok(())
    }

    /// Appends one row; on error the index is left unchanged. Returns the new
    /// version.
    pub fn add(&mut self, id: impl Into<String>, vector: &[f32]) -> Result<u64, IndexError> {
        self.insert(id.into(), vector)?;
        self.version += 1;
        Ok(self.version)
    }

    /// The `min(k, len)` nearest rows to `query`.
    pub fn query(&self, query: &[f32], k: usize) -> Result<Vec<RetrievalHit>, IndexError> {
        if self.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        if k == 0 {
            return Err(IndexError::InvalidK { k, len: self.len() });
        }
        self.check_vector("<query>", query)?;
        let keep = k.min(self.len());
        let mut heap = BinaryHeap::with_capacity(keep + 1);
        for (position, row) in self.rows.chunks_exact(self.dim).enumerate() {
            let candidate = Candidate {
                distance: squared_l2(query, row),
                position,
            };
            if heap.len() < keep {
                heap.push(candidate);
            } else if let Some(worst) = heap.peek() {
                if candidate < *worst {
                    heap.pop();
                    heap.push(candidate);
                }
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .enumerate()
            .map(|(i, c)| RetrievalHit {
                id: self.ids[c.position].clone(),
                distance: c.distance as f32,
                rank: i + 1,
            })
            .collect())
    }

    /// `k` distinct rows drawn uniformly without replacement, deterministic per
    /// seed. The random-retrieval baseline.
    pub fn random_sample(&self, k: usize, seed: u64) -> Result<Vec<RetrievalHit>, IndexError> {
        if k == 0 || k > self.len() {
            return Err(IndexError::InvalidK { k, len: self.len() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(rand::seq::index::sample(&mut rng, self.len(), k)
            .into_iter()
            .enumerate()
            .map(|(i, position)| RetrievalHit {
                id: self.ids[position].clone(),
                distance: RANDOM_HIT_DISTANCE,
                rank: i + 1,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(dim: usize, hot: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[hot] = 1.0;
        v
    }

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
        use rand_distr::{Distribution, StandardNormal};
        let v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = l2_norm(&v);
        v.iter().map(|&x| (f64::from(x) / n) as f32).collect()
    }

    #[test]
    fn self_distance_is_zero() {
        let idx = FlatIndex::build(4, [("e1", unit(4, 0)), ("e2", unit(4, 1))]).unwrap();
        let hits = idx.query(&unit(4, 0), 1).unwrap();
        assert_eq!(hits, vec![RetrievalHit { id: "e1".into(), distance: 0.0, rank: 1 }]);
    }

    #[test]
    fn ties_go_to_earlier_insertion() {
        let idx = FlatIndex::build(3, [("late", unit(3, 1)), ("early", unit(3, 2))]).unwrap();
        // Query is equidistant (distance 2) from both.
        let hits = idx.query(&unit(3, 0), 2).unwrap();
        assert_eq!(hits[0].id, "late");
        assert_eq!(hits[1].id, "early");
        assert_eq!(hits[0].distance, hits[1].distance);
    }

    #[test]
    fn empty_index_errors() {
        let idx = FlatIndex::build(3, Vec::<(String, Vec<f32>)>::new()).unwrap();
        assert!(idx.is_empty());
        assert!(matches!(idx.query(&unit(3, 0), 1), Err(IndexError::EmptyIndex)));
    }

    #[test]
    fn build_validation() {
        let bad = vec![0.0f32, 2.0, 0.0];
        assert!(matches!(
            FlatIndex::build(3, [("a", bad)]),
            Err(IndexError::NotNormalized { .. })
        ));
        assert!(matches!(
            FlatIndex::build(3, [("a", unit(3, 0)), ("a", unit(3, 1))]),
            Err(IndexError::DuplicateId(_))
        ));
        assert!(matches!(
            FlatIndex::build(3, [("a", unit(4, 0))]),
            Err(IndexError::DimMismatch { .. })
        ));
    }

    #[test]
    fn query_validation() {
        let idx = FlatIndex::build(3, [("a", unit(3, 0))]).unwrap();
        assert!(matches!(idx.query(&unit(3, 0), 0), Err(IndexError::InvalidK { .. })));
        assert!(matches!(idx.query(&unit(2, 0), 1), Err(IndexError::DimMismatch { .. })));
        // k > N clamps.
        assert_eq!(idx.query(&unit(3, 1), 5).unwrap().len(), 1);
    }

    #[test]
    fn add_then_query_and_duplicate_leaves_index_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let items: Vec<_> = (0..50).map(|i| (format!("s{i}"), random_unit(&mut rng, 16))).collect();
        let mut idx = FlatIndex::build(16, items).unwrap();
        let v = random_unit(&mut rng, 16);
        assert_eq!(idx.add("new", &v).unwrap(), 1);
        assert_eq!(idx.len(), 51);
        let hits = idx.query(&v, 1).unwrap();
        assert_eq!((hits[0].id.as_str(), hits[0].distance, hits[0].rank), ("new", 0.0, 1));

        let before = idx.clone();
        assert!(matches!(idx.add("new", &v), Err(IndexError::DuplicateId(_))));
        assert_eq!(idx, before);
    }

    #[test]
    fn random_sample_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let items: Vec<_> = (0..50).map(|i| (format!("s{i}"), random_unit(&mut rng, 8))).collect();
        let idx = FlatIndex::build(8, items).unwrap();

        let all = idx.random_sample(50, 1).unwrap();
        let mut ids: Vec<_> = all.iter().map(|h| h.id.clone()).collect();
        ids.sort();
        let mut expected = idx.ids().to_vec();
        expected.sort();
        assert_eq!(ids, expected);
        assert!(all.iter().all(|h| h.distance == RANDOM_HIT_DISTANCE));
        assert_eq!(all.iter().map(|h| h.rank).collect::<Vec<_>>(), (1..=50).collect::<Vec<_>>());

        assert_eq!(idx.random_sample(8, 77).unwrap(), idx.random_sample(8, 77).unwrap());
        assert!(matches!(idx.random_sample(51, 0), Err(IndexError::InvalidK { .. })));
    }

    #[test]
    fn random_sample_is_uniform() {
        // Each id is picked with probability p = 8/50 per draw; over 100 seeds
        // its count is Binomial(100, p).
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let items: Vec<_> = (0..50).map(|i| (format!("s{i}"), random_unit(&mut rng, 8))).collect();
        let idx = FlatIndex::build(8, items).unwrap();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for seed in 1..=100 {
            for hit in idx.random_sample(8, seed).unwrap() {
                *counts.entry(hit.id).or_default() += 1;
            }
        }
        let p: f64 = 8.0 / 50.0;
        let mean = 100.0 * p;
        let sigma = (100.0 * p * (1.0 - p)).sqrt();
        for id in idx.ids() {
            let c = counts.get(id).copied().unwrap_or(0) as f64;
            assert!((c - mean).abs() <= 3.0 * sigma, "{id}: {c} vs {mean}±{}", 3.0 * sigma);
        }
    }
}
