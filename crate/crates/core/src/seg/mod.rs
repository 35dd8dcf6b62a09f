//! Memory-conditioned segmentation.
//!
//! Retrieved exemplars are encoded into memories (image features fused with
//! a downsampled binary mask), the query's features attend to those memories,
//! and a decoder turns the conditioned features plus high-resolution skips
//! into a mask. No point, box or mask prompts are involved: an empty memory
//! bank is an error.
//!
//! Three engines share the [`SegEngine`] interface:
//!
//! * [`ToyEngine`]: seeded random miniature of the architecture, for
//!   structural tests without weights.
//! * [`TransferEngine`]: copies the rank-1 exemplar's mask; a trivially
//!   correct oracle for end-to-end tests.
//! * `PretrainedEngine`: runs exported SAM 2 components (feature `onnx`).

mod nn;
mod pipeline;
#[cfg(feature = "onnx")]
mod pretrained;
mod registry;
mod toy;
mod transfer;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{DataError, ImageSlice, PreprocessSpec};
use crate::embedding::EmbedError;
use crate::index::{IndexError, RetrievalHit};

pub use pipeline::{InMemoryStore, Pipeline, SampleStore, SegmentOptions};
#[cfg(feature = "onnx")]
pub use pretrained::PretrainedEngine;
pub use registry::{load_engine, EngineConfig, SAM2_CHECKPOINT_ENV};
pub use toy::ToyEngine;
pub use transfer::TransferEngine;

#[derive(Debug, thiserror::Error)]
pub enum SegError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask is not binary (found value {0})")]
    NonBinaryMask(u8),
    #[error("memory bank is empty; promptless decoding needs at least one memory")]
    EmptyMemoryBank,
    #[error("memory bank rejected entry: {0}")]
    BankRejected(String),
    #[error("checkpoint missing at {path}: {hint}")]
    CheckpointMissing { path: String, hint: String },
    #[error("retrieval index is empty")]
    EmptyIndex,
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("sample `{0}` is indexed but its payload is missing")]
    MissingSample(String),
    #[error("unknown engine `{0}`")]
    UnknownEngine(String),
    #[error("invalid k = {0}")]
    InvalidK(usize),
    #[error("slice {index}: {source}")]
    AtSlice {
        index: usize,
        #[source]
        source: Box<SegError>,
    },
    #[error("engine runtime: {0}")]
    Runtime(String),
    #[error(transparent)]
    Index(IndexError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl From<IndexError> for SegError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::EmptyIndex => SegError::EmptyIndex,
            other => SegError::Index(other),
        }
    }
}

/// Channel-first feature grid with optional positional encoding and the
/// higher-resolution encoder levels the decoder consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// `C × h × w`.
    pub grid: Array3<f32>,
    /// Input pixels per grid cell.
    pub stride: usize,
    pub pos: Option<Array3<f32>>,
    /// Skip levels, finest first.
    pub skips: Vec<Array3<f32>>,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.grid.dim().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.grid.dim();
        (h, w)
    }

    pub fn all_finite(&self) -> bool {
        self.grid.iter().all(|v| v.is_finite()) && self.skips.iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Which exemplar a memory came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemorySource {
    pub sample_id: String,
    pub rank: usize,
    pub class_label: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    /// `C_mem × h × w`.
    pub memory_grid: Array3<f32>,
    pub pos: Option<Array3<f32>>,
    pub source_sample_id: String,
    pub retrieval_rank: usize,
    pub class_label: u16,
}

impl MemoryEntry {
    /// Order-independent sort key: retrieval rank, then id, then content.
    pub(crate) fn canonical_key(&self) -> (usize, &str, u64) {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.memory_grid {
            h = (h ^ u64::from(v.to_bits())).wrapping_mul(0x0100_0000_01b3);
        }
        (self.retrieval_rank, &self.source_sample_id, h)
    }
}

/// Memories conditioning one binary segmentation. Entries share a class and
/// grid shape; the bank holds at most `capacity` (= k) entries.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    entries: Vec<MemoryEntry>,
    capacity: usize,
    class_label: u16,
}

impl MemoryBank {
    pub fn new(capacity: usize, class_label: u16) -> Result<Self, SegError> {
        if capacity == 0 {
            return Err(SegError::InvalidK(0));
        }
        Ok(Self {
            entries: Vec::with_capacity(capacity),
            capacity,
            class_label,
        })
    }

    pub fn push(&mut self, entry: MemoryEntry) -> Result<(), SegError> {
        if self.entries.len() == self.capacity {
            return Err(SegError::BankRejected(format!("capacity {} reached", self.capacity)));
        }
        if entry.class_label != self.class_label {
            return Err(SegError::BankRejected(format!(
                "class {} in a bank for class {}",
                entry.class_label, self.class_label
            )));
        }
        if let Some(first) = self.entries.first() {
            if first.memory_grid.dim() != entry.memory_grid.dim() && !self.allows_ragged() {
                return Err(SegError::BankRejected(format!(
                    "memory grid {:?} differs from {:?}",
                    entry.memory_grid.dim(),
                    first.memory_grid.dim()
                )));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Transfer-engine memories live at each exemplar's native size.
    fn allows_ragged(&self) -> bool {
        self.entries.first().is_some_and(|e| e.pos.is_none() && e.memory_grid.dim().0 == 1)
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn class_label(&self) -> u16 {
        self.class_label
    }

    /// Entries in canonical order, independent of insertion order.
    pub fn canonical_entries(&self) -> Vec<&MemoryEntry> {
        let mut v: Vec<&MemoryEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| a.canonical_key().cmp(&b.canonical_key()));
        v
    }

    /// Reorders the stored entries (for permutation tests).
    pub fn permute(&mut self, order: &[usize]) {
        assert_eq!(order.len(), self.entries.len());
        let old = std::mem::take(&mut self.entries);
        let mut slots: Vec<Option<MemoryEntry>> = old.into_iter().map(Some).collect();
        self.entries = order.iter().map(|&i| slots[i].take().expect("order is a permutation")).collect();
    }
}

/// Binary mask plus the logits it was thresholded from, at native size.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedMask {
    pub mask: Array2<u8>,
    pub logits: Array2<f32>,
    /// Mean foreground probability, 0 for an empty mask.
    pub score: f32,
}

impl DecodedMask {
    /// Thresholds logits at 0 (probability 0.5).
    pub fn from_logits(logits: Array2<f32>) -> Self {
        let mask = logits.mapv(|v| u8::from(v > 0.0));
        let (sum, n) = logits
            .iter()
            .filter(|&&v| v > 0.0)
            .fold((0.0f64, 0usize), |(s, n), &v| (s + 1.0 / (1.0 + (-f64::from(v)).exp()), n + 1));
        let score = if n == 0 { 0.0 } else { (sum / n as f64) as f32 };
        Self { mask, logits, score }
    }
}

pub trait SegEngine: Send + Sync {
    fn name(&self) -> String;

    fn checkpoint_loaded(&self) -> bool {
        false
    }

    /// Tensor fed to [`SegEngine::encode_image_features`].
    fn prepare_input(&self, image: &ImageSlice, spec: &PreprocessSpec) -> Result<Array3<f32>, SegError> {
        Ok(crate::data::preprocess_for_segmentation(image, spec)?)
    }

    fn encode_image_features(&self, input: ndarray::ArrayView3<f32>) -> Result<FeatureMap, SegError>;

    /// Fuses an exemplar's features with its binary mask (native resolution).
    fn encode_memory(
        &self,
        features: &FeatureMap,
        mask: ArrayView2<u8>,
        source: MemorySource,
    ) -> Result<MemoryEntry, SegError>;

    /// Conditions query features on the bank; output has the query's shape.
    fn memory_attention(&self, query: &FeatureMap, bank: &MemoryBank) -> Result<FeatureMap, SegError>;

    /// Decodes to a binary mask at `native` size.
    fn decode_mask(
        &self,
        conditioned: &FeatureMap,
        skips: &[Array3<f32>],
        native: (usize, usize),
    ) -> Result<DecodedMask, SegError>;
}

pub(crate) fn ensure_binary(mask: ArrayView2<u8>) -> Result<(), SegError> {
    match mask.iter().find(|&&v| v > 1) {
        Some(&v) => Err(SegError::NonBinaryMask(v)),
        None => Ok(()),
    }
}

/// How exemplars are chosen for a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RetrievalStrategy {
    /// Nearest neighbours of the query embedding.
    #[default]
    Embedding,
    /// Uniform sample without replacement.
    Random { seed: u64 },
}

impl fmt::Display for RetrievalStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Embedding => f.write_str("embedding"),
            Self::Random { seed } => write!(f, "random:{seed}"),
        }
    }
}

impl FromStr for RetrievalStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "embedding" | "dinov2" => Ok(Self::Embedding),
            "random" => Ok(Self::Random { seed: 0 }),
            other => other
                .strip_prefix("random:")
                .and_then(|seed| seed.parse().ok())
                .map(|seed| Self::Random { seed })
                .ok_or_else(|| format!("unknown retrieval strategy `{other}` (expected embedding or random:<seed>)")),
        }
    }
}

impl TryFrom<String> for RetrievalStrategy {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<RetrievalStrategy> for String {
    fn from(s: RetrievalStrategy) -> Self {
        s.to_string()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub embed_retrieve_ms: f64,
    pub memory_encode_ms: f64,
    pub attention_decode_ms: f64,
}

impl StageTimings {
    pub fn total_ms(&self) -> f64 {
        self.embed_retrieve_ms + self.memory_encode_ms + self.attention_decode_ms
    }
}

/// Per-class output of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub dims: (usize, usize),
    pub class_masks: BTreeMap<u16, Array2<u8>>,
    pub class_logits: BTreeMap<u16, Array2<f32>>,
    pub class_scores: BTreeMap<u16, f32>,
    /// Retrieved exemplar ids per class, in retrieval order.
    pub exemplar_ids: BTreeMap<u16, Vec<String>>,
    pub hits: Vec<RetrievalHit>,
    pub k_requested: usize,
    pub k_used: usize,
    pub strategy: RetrievalStrategy,
    pub timing: StageTimings,
    pub warnings: Vec<String>,
}

impl SegmentationResult {
    /// Equality ignoring wall-clock timings.
    pub fn same_prediction(&self, other: &Self) -> bool {
        let bits = |m: &BTreeMap<u16, Array2<f32>>| -> Vec<(u16, Vec<u32>)> {
            m.iter().map(|(k, v)| (*k, v.iter().map(|x| x.to_bits()).collect())).collect()
        };
        self.dims == other.dims
            && self.class_masks == other.class_masks
            && bits(&self.class_logits) == bits(&other.class_logits)
            && self.exemplar_ids == other.exemplar_ids
            && self.hits == other.hits
            && self.k_used == other.k_used
    }

    /// Merged label map. A pixel claimed by several classes goes to the one
    /// with the higher logit; exact ties go to the smaller label.
    pub fn label_map(&self) -> Array2<u16> {
        let mut out = Array2::<u16>::zeros(self.dims);
        let mut best = Array2::<f32>::from_elem(self.dims, f32::NEG_INFINITY);
        for (&label, mask) in &self.class_masks {
            let logits = &self.class_logits[&label];
            ndarray::Zip::from(&mut out)
                .and(&mut best)
                .and(mask)
                .and(logits)
                .for_each(|o, b, &m, &l| {
                    if m == 1 && l > *b {
                        *o = label;
                        *b = l;
                    }
                });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn entry(id: &str, rank: usize, class_label: u16, v: f32) -> MemoryEntry {
        MemoryEntry {
            memory_grid: Array3::from_elem((2, 2, 2), v),
            pos: Some(Array3::zeros((2, 2, 2))),
            source_sample_id: id.into(),
            retrieval_rank: rank,
            class_label,
        }
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("embedding".parse::<RetrievalStrategy>().unwrap(), RetrievalStrategy::Embedding);
        assert_eq!("random:7".parse::<RetrievalStrategy>().unwrap(), RetrievalStrategy::Random { seed: 7 });
        assert!("nearest".parse::<RetrievalStrategy>().is_err());
        let json = serde_json::to_string(&RetrievalStrategy::Random { seed: 3 }).unwrap();
        assert_eq!(json, "\"random:3\"");
    }

    #[test]
    fn bank_enforces_class_and_capacity() {
        let mut bank = MemoryBank::new(2, 1).unwrap();
        bank.push(entry("a", 1, 1, 0.0)).unwrap();
        assert!(bank.push(entry("b", 2, 2, 0.0)).is_err());
        bank.push(entry("b", 2, 1, 1.0)).unwrap();
        assert!(bank.push(entry("c", 3, 1, 1.0)).is_err());
        assert!(MemoryBank::new(0, 1).is_err());
    }

    #[test]
    fn canonical_order_ignores_insertion_order() {
        let mut bank = MemoryBank::new(3, 1).unwrap();
        for (id, r) in [("c", 3), ("a", 1), ("b", 2)] {
            bank.push(entry(id, r, 1, r as f32)).unwrap();
        }
        let ids: Vec<_> = bank.canonical_entries().iter().map(|e| e.source_sample_id.clone()).collect();
        bank.permute(&[2, 0, 1]);
        let again: Vec<_> = bank.canonical_entries().iter().map(|e| e.source_sample_id.clone()).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
        assert_eq!(ids, again);
    }

    #[test]
    fn logit_threshold_contract() {
        let neg = DecodedMask::from_logits(Array2::from_elem((3, 3), -1.0));
        assert!(neg.mask.iter().all(|&v| v == 0));
        assert_eq!(neg.score, 0.0);
        let pos = DecodedMask::from_logits(Array2::from_elem((3, 3), 1.0));
        assert!(pos.mask.iter().all(|&v| v == 1));
        assert!(pos.score > 0.7);
        // Exactly zero stays background.
        assert_eq!(DecodedMask::from_logits(array![[0.0f32]]).mask[[0, 0]], 0);
    }

    #[test]
    fn label_map_overlap_rules() {
        let mut r = SegmentationResult {
            dims: (1, 3),
            class_masks: BTreeMap::new(),
            class_logits: BTreeMap::new(),
            class_scores: BTreeMap::new(),
            exemplar_ids: BTreeMap::new(),
            hits: vec![],
            k_requested: 1,
            k_used: 1,
            strategy: RetrievalStrategy::Embedding,
            timing: StageTimings::default(),
            warnings: vec![],
        };
        r.class_masks.insert(1, array![[1u8, 1, 1]]);
        r.class_logits.insert(1, array![[2.0f32, 1.0, 0.5]]);
        r.class_masks.insert(3, array![[1u8, 1, 0]]);
        r.class_logits.insert(3, array![[1.0f32, 1.0, 9.0]]);
        // pixel 0: class 1 wins on logit; pixel 1: tie -> smaller label; pixel 2: only class 1 claims it.
        assert_eq!(r.label_map(), array![[1u16, 1, 1]]);
        r.class_logits.insert(3, array![[3.0f32, 1.0, 9.0]]);
        assert_eq!(r.label_map(), array![[3u16, 1, 1]]);
    }
}
