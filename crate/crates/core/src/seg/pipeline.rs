use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::Mutex;

use super::{MemoryBank, MemorySource, RetrievalStrategy, SegEngine, SegError, SegmentationResult, StageTimings};
use crate::data::{ClassMap, ImageSlice, PreprocessSpec, SampleRecord};
use crate::embedding::{embed_image, Embedding, EmbeddingBackbone};
use crate::index::{FlatIndex, RetrievalHit};

/// Payload lookup for indexed ids.
pub trait SampleStore: Send + Sync {
    fn get(&self, id: &str) -> Option<Arc<SampleRecord>>;
    fn class_map(&self) -> ClassMap;
}

#[derive(Debug, Default, Clone)]
pub struct InMemoryStore {
    records: HashMap<String, Arc<SampleRecord>>,
    class_map: ClassMap,
}

impl InMemoryStore {
    pub fn new(class_map: ClassMap) -> Self {
        Self {
            records: HashMap::new(),
            class_map,
        }
    }

    pub fn from_records(class_map: ClassMap, records: impl IntoIterator<Item = SampleRecord>) -> Self {
        let mut store = Self::new(class_map);
        for r in records {
            store.insert(r);
        }
        store
    }

    /// Returns false (and keeps the old record) if the id is taken.
    pub fn insert(&mut self, record: SampleRecord) -> bool {
        if self.records.contains_key(&record.id) {
            return false;
        }
        self.records.insert(record.id.clone(), Arc::new(record));
        true
    }

    pub fn contains(&self, id: &str) -> bool {
        self.records.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }
}

impl SampleStore for InMemoryStore {
    fn get(&self, id: &str) -> Option<Arc<SampleRecord>> {
        self.records.get(id).cloned()
    }

    fn class_map(&self) -> ClassMap {
        self.class_map.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentOptions {
    pub k: usize,
    /// Labels to segment; empty means every class in the store.
    pub classes: Vec<u16>,
    pub strategy: RetrievalStrategy,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self {
            k: 1,
            classes: Vec::new(),
            strategy: RetrievalStrategy::Embedding,
        }
    }
}

/// Retrieval plus memory-conditioned segmentation for one engine/backbone pair.
pub struct Pipeline {
    engine: Arc<dyn SegEngine>,
    backbone: Arc<dyn EmbeddingBackbone>,
    spec: PreprocessSpec,
    /// Serializes engine work: one inference lane per pipeline.
    lane: Mutex<()>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("engine", &self.engine.name())
            .field("backbone", &self.backbone.name())
            .field("spec", &self.spec)
            .finish()
    }
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

impl Pipeline {
    pub fn new(engine: Arc<dyn SegEngine>, backbone: Arc<dyn EmbeddingBackbone>, spec: PreprocessSpec) -> Self {
        Self {
            engine,
            backbone,
            spec,
            lane: Mutex::new(()),
        }
    }

    pub fn engine(&self) -> &Arc<dyn SegEngine> {
        &self.engine
    }

    pub fn backbone(&self) -> &Arc<dyn EmbeddingBackbone> {
        &self.backbone
    }

    pub fn spec(&self) -> &PreprocessSpec {
        &self.spec
    }

    pub fn embed(&self, image: &ImageSlice) -> Result<Embedding, SegError> {
        Ok(embed_image(self.backbone.as_ref(), image, &self.spec)?)
    }

    /// Resolves the exemplar list for `image`. `k` larger than the index is
    /// clamped, with a warning.
    pub fn retrieve(
        &self,
        index: &FlatIndex,
        image: &ImageSlice,
        k: usize,
        strategy: RetrievalStrategy,
    ) -> Result<(Vec<RetrievalHit>, Vec<String>), SegError> {
        if index.is_empty() {
            return Err(SegError::EmptyIndex);
        }
        if k == 0 {
            return Err(SegError::InvalidK(0));
        }
        let mut warnings = Vec::new();
        let k_used = if k > index.len() {
            warnings.push(format!("k = {k} exceeds index size {}; using {}", index.len(), index.len()));
            index.len()
        } else {
            k
        };
        let hits = match strategy {
            RetrievalStrategy::Embedding => {
                let q = self.embed(image)?;
                index.query(q.as_slice(), k_used)?
            }
            RetrievalStrategy::Random { seed } => index.random_sample(k_used, seed)?,
        };
        Ok((hits, warnings))
    }

    fn resolve_classes(&self, store: &dyn SampleStore, requested: &[u16]) -> Result<Vec<u16>, SegError> {
        let class_map = store.class_map();
        if requested.is_empty() {
            return Ok(class_map.keys().copied().collect());
        }
        let mut out = Vec::with_capacity(requested.len());
        for &c in requested {
            if !class_map.contains_key(&c) {
                return Err(SegError::UnknownClass(c.to_string()));
            }
            if !out.contains(&c) {
                out.push(c);
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Segments `image` with the given exemplars (already retrieved).
    pub fn segment_with_hits(
        &self,
        store: &dyn SampleStore,
        image: &ImageSlice,
        hits: Vec<RetrievalHit>,
        opts: &SegmentOptions,
    ) -> Result<SegmentationResult, SegError> {
        if hits.is_empty() {
            return Err(SegError::EmptyMemoryBank);
        }
        let classes = self.resolve_classes(store, &opts.classes)?;
        let exemplars = hits
            .iter()
            .map(|h| store.get(&h.id).ok_or_else(|| SegError::MissingSample(h.id.clone())))
            .collect::<Result<Vec<_>, _>>()?;

        let _lane = self.lane.lock();
        let mut timing = StageTimings::default();

        let t = Instant::now();
        let query_input = self.engine.prepare_input(image, &self.spec)?;
        let query = self.engine.encode_image_features(query_input.view())?;
        let exemplar_features = exemplars
            .iter()
            .map(|r| {
                let input = self.engine.prepare_input(&r.image, &self.spec)?;
                self.engine.encode_image_features(input.view())
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut banks = Vec::with_capacity(classes.len());
        for &class in &classes {
            let mut bank = MemoryBank::new(hits.len(), class)?;
            for ((hit, record), features) in hits.iter().zip(&exemplars).zip(&exemplar_features) {
                let mask = record.mask.binary(class);
                let source = MemorySource {
                    sample_id: hit.id.clone(),
                    rank: hit.rank,
                    class_label: class,
                };
                bank.push(self.engine.encode_memory(features, mask.view(), source)?)?;
            }
            banks.push(bank);
        }
        timing.memory_encode_ms = elapsed_ms(t);

        let t = Instant::now();
        let native = image.dims();
        let ids: Vec<String> = hits.iter().map(|h| h.id.clone()).collect();
        let mut result = SegmentationResult {
            dims: native,
            class_masks: BTreeMap::new(),
            class_logits: BTreeMap::new(),
            class_scores: BTreeMap::new(),
            exemplar_ids: BTreeMap::new(),
            hits: Vec::new(),
            k_requested: opts.k,
            k_used: hits.len(),
            strategy: opts.strategy,
            timing,
            warnings: Vec::new(),
        };
        for bank in &banks {
            let conditioned = self.engine.memory_attention(&query, bank)?;
            let decoded = self.engine.decode_mask(&conditioned, &query.skips, native)?;
            let class = bank.class_label();
            result.class_masks.insert(class, decoded.mask);
            result.class_logits.insert(class, decoded.logits);
            result.class_scores.insert(class, decoded.score);
            result.exemplar_ids.insert(class, ids.clone());
        }
        result.timing.attention_decode_ms = elapsed_ms(t);
        result.hits = hits;
        Ok(result)
    }

    pub fn segment_image(
        &self,
        index: &FlatIndex,
        store: &dyn SampleStore,
        image: &ImageSlice,
        opts: &SegmentOptions,
    ) -> Result<SegmentationResult, SegError> {
        let t = Instant::now();
        let (hits, warnings) = self.retrieve(index, image, opts.k, opts.strategy)?;
        let retrieve_ms = elapsed_ms(t);
        let mut result = self.segment_with_hits(store, image, hits, opts)?;
        result.timing.embed_retrieve_ms = retrieve_ms;
        result.warnings = warnings;
        Ok(result)
    }

    /// Slice-by-slice; errors carry the slice position.
    pub fn segment_volume(
        &self,
        index: &FlatIndex,
        store: &dyn SampleStore,
        slices: &[ImageSlice],
        opts: &SegmentOptions,
    ) -> Result<Vec<SegmentationResult>, SegError> {
        if index.is_empty() {
            return Err(SegError::EmptyIndex);
        }
        slices
            .iter()
            .enumerate()
            .map(|(i, s)| {
                self.segment_image(index, store, s, opts).map_err(|e| SegError::AtSlice {
                    index: i,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}
