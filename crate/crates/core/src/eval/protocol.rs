use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{dice, DiceRecord, EvalError, EvalReport, ReportConfig, TimingSummary, DEFAULT_STRATIFY_THRESHOLD};
use crate::data::{load_manifest, ClassMap, PreprocessSpec, SampleRecord};
use crate::embedding::{load_backbone, BackboneConfig, Embedding, DINO_VITS14_REG};
use crate::index::FlatIndex;
use crate::seg::{load_engine, EngineConfig, InMemoryStore, Pipeline, RetrievalStrategy, SegmentOptions};

/// One protocol run, as read from `eval.json`. Relative manifest and
/// checkpoint paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub engine: String,
    pub backbone: String,
    pub index_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub k: usize,
    pub strategy: RetrievalStrategy,
    /// Class names to evaluate; empty means all.
    pub classes: Vec<String>,
    pub seed: u64,
    pub preprocess: PreprocessSpec,
    pub stratify_threshold: usize,
    /// Score slices whose ground truth lacks the class (empty/empty counts as 1).
    pub include_empty_gt: bool,
    /// Permit shared subjects (self-inclusion oracle runs).
    pub allow_subject_overlap: bool,
    pub engine_config: EngineConfig,
    pub backbone_config: BackboneConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            engine: "pretrained".into(),
            backbone: DINO_VITS14_REG.into(),
            index_manifest: PathBuf::new(),
            test_manifest: PathBuf::new(),
            k: 16,
            strategy: RetrievalStrategy::Embedding,
            classes: Vec::new(),
            seed: 0,
            preprocess: PreprocessSpec::default(),
            stratify_threshold: DEFAULT_STRATIFY_THRESHOLD,
            include_empty_gt: false,
            allow_subject_overlap: false,
            engine_config: EngineConfig::default(),
            backbone_config: BackboneConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let bytes = std::fs::read(path).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: Self =
            serde_json::from_slice(&bytes).map_err(|e| EvalError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.index_manifest);
        fix(&mut self.test_manifest);
        if let Some(p) = self.engine_config.sam2_checkpoint.as_mut() {
            fix(p);
        }
        if let Some(p) = self.backbone_config.dino_checkpoint.as_mut() {
            fix(p);
        }
    }
}

/// splitmix64 over `(seed, salt)`: fixed, platform-independent seed streams.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x6a09_e667_f3bc_c909);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Loaded data, models and embeddings, reusable across `(k, strategy)` runs.
pub struct ProtocolContext {
    pipeline: Pipeline,
    index: FlatIndex,
    store: InMemoryStore,
    tests: Vec<SampleRecord>,
    /// Query embeddings, computed once.
    test_embeddings: Vec<Embedding>,
    classes: BTreeMap<u16, String>,
    seed: u64,
    include_empty_gt: bool,
    stratify_threshold: usize,
    warnings: Vec<String>,
}

impl std::fmt::Debug for ProtocolContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProtocolContext")
            .field("pipeline", &self.pipeline)
            .field("index_size", &self.index.len())
            .field("test_size", &self.tests.len())
            .field("classes", &self.classes)
            .finish()
    }
}

fn check_leakage(index: &[SampleRecord], tests: &[SampleRecord]) -> Result<(), EvalError> {
    let db: BTreeSet<&str> = index.iter().map(|r| r.image.subject_id.as_str()).collect();
    let shared: BTreeSet<&str> = tests
        .iter()
        .map(|r| r.image.subject_id.as_str())
        .filter(|s| db.contains(s))
        .collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(EvalError::SubjectLeakage(shared.into_iter().map(String::from).collect()))
    }
}

fn select_classes(class_map: &ClassMap, names: &[String]) -> Result<BTreeMap<u16, String>, EvalError> {
    if names.is_empty() {
        return Ok(class_map.clone());
    }
    names
        .iter()
        .map(|name| {
            class_map
                .iter()
                .find(|(_, n)| *n == name)
                .map(|(&l, n)| (l, n.clone()))
                .ok_or_else(|| EvalError::Config(format!("unknown class `{name}`")))
        })
        .collect()
}

impl ProtocolContext {
    /// Loads manifests and models named by `config` and embeds both sets.
    pub fn prepare(config: &EvalConfig) -> Result<Self, EvalError> {
        config.preprocess.validate()?;
        let index_manifest = load_manifest(&config.index_manifest)?;
        let test_manifest = load_manifest(&config.test_manifest)?;
        if index_manifest.class_map != test_manifest.class_map {
            return Err(EvalError::Config("index and test manifests have different class maps".into()));
        }
        let index_records = index_manifest.load_records()?;
        let tests = test_manifest.load_records()?;

        let (pipeline, diagnostic) = pipeline_from_config(config)?;
        let mut ctx = Self::from_parts(pipeline, index_manifest.class_map.clone(), index_records, tests, config)?;
        ctx.warnings.extend(diagnostic);
        Ok(ctx)
    }

    /// Same as [`ProtocolContext::prepare`] with in-memory data and models.
    pub fn from_parts(
        pipeline: Pipeline,
        class_map: ClassMap,
        index_records: Vec<SampleRecord>,
        tests: Vec<SampleRecord>,
        config: &EvalConfig,
    ) -> Result<Self, EvalError> {
        if !config.allow_subject_overlap {
            check_leakage(&index_records, &tests)?;
        }
        let classes = select_classes(&class_map, &config.classes)?;
        let dim = pipeline.backbone().dim();
        let mut index = FlatIndex::new(dim);
        for r in &index_records {
            let e = pipeline.embed(&r.image).map_err(|e| at(&r.id, e.into()))?;
            index.add(r.id.clone(), e.as_slice())?;
        }
        let test_embeddings = tests
            .iter()
            .map(|r| pipeline.embed(&r.image).map_err(|e| at(&r.id, e.into())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            pipeline,
            index,
            store: InMemoryStore::from_records(class_map, index_records),
            tests,
            test_embeddings,
            classes,
            seed: config.seed,
            include_empty_gt: config.include_empty_gt,
            stratify_threshold: config.stratify_threshold,
            warnings: Vec::new(),
        })
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn index(&self) -> &FlatIndex {
        &self.index
    }

    pub fn store(&self) -> &InMemoryStore {
        &self.store
    }

    pub fn tests(&self) -> &[SampleRecord] {
        &self.tests
    }

    pub fn classes(&self) -> &BTreeMap<u16, String> {
        &self.classes
    }

    /// Segments every test slice with `k` exemplars. Random retrieval draws
    /// query `i`'s exemplars with seed `derive(derive(derive(strategy seed, config seed), k), i)`.
    pub fn run(&self, k: usize, strategy: RetrievalStrategy) -> Result<EvalReport, EvalError> {
        if k == 0 {
            return Err(EvalError::Config("k must be at least 1".into()));
        }
        if self.index.is_empty() {
            return Err(crate::seg::SegError::EmptyIndex.into());
        }
        let k_used = k.min(self.index.len());
        let mut warnings = self.warnings.clone();
        if k_used < k {
            warnings.push(format!("k = {k} exceeds index size {}; using {k_used}", self.index.len()));
        }
        let opts = SegmentOptions {
            k,
            classes: self.classes.keys().copied().collect(),
            strategy,
        };
        let mut records = Vec::with_capacity(self.tests.len() * self.classes.len());
        let mut timing = TimingSummary::default();
        for (i, (test, embedding)) in self.tests.iter().zip(&self.test_embeddings).enumerate() {
            let start = std::time::Instant::now();
            let hits = match strategy {
                RetrievalStrategy::Embedding => self.index.query(embedding.as_slice(), k_used)?,
                RetrievalStrategy::Random { seed } => {
                    let cell = derive_seed(derive_seed(seed, self.seed), k as u64);
                    self.index.random_sample(k_used, derive_seed(cell, i as u64))?
                }
            };
            let retrieve_ms = start.elapsed().as_secs_f64() * 1e3;
            let result = self
                .pipeline
                .segment_with_hits(&self.store, &test.image, hits, &opts)
                .map_err(|e| at(&test.id, e.into()))?;
            timing.embed_retrieve_ms += retrieve_ms;
            timing.memory_encode_ms += result.timing.memory_encode_ms;
            timing.attention_decode_ms += result.timing.attention_decode_ms;
            timing.n += 1;
            for (&class, pred) in &result.class_masks {
                let gt = test.mask.binary(class);
                let gt_pixels = gt.iter().filter(|&&v| v == 1).count();
                if gt_pixels == 0 && !self.include_empty_gt {
                    continue;
                }
                records.push(DiceRecord {
                    sample_id: test.id.clone(),
                    subject_id: test.image.subject_id.clone(),
                    class_label: class,
                    dice: dice(pred.view(), gt.view()).map_err(|e| at(&test.id, e))?,
                    gt_pixels,
                    pred_pixels: pred.iter().filter(|&&v| v == 1).count(),
                });
            }
        }
        if timing.n > 0 {
            let n = timing.n as f64;
            timing.embed_retrieve_ms /= n;
            timing.memory_encode_ms /= n;
            timing.attention_decode_ms /= n;
            timing.total_ms = timing.embed_retrieve_ms + timing.memory_encode_ms + timing.attention_decode_ms;
        }
        let config = ReportConfig {
            engine: self.pipeline.engine().name(),
            backbone: self.pipeline.backbone().name().to_string(),
            k,
            strategy,
            seed: self.seed,
            index_size: self.index.len(),
            test_size: self.tests.len(),
            include_empty_gt: self.include_empty_gt,
            stratify_threshold: self.stratify_threshold,
        };
        Ok(EvalReport::new(config, &self.classes, records, timing, warnings))
    }
}

fn at(id: &str, e: EvalError) -> EvalError {
    EvalError::AtSample {
        id: id.to_string(),
        source: Box::new(e),
    }
}

pub fn run_protocol(config: &EvalConfig) -> Result<EvalReport, EvalError> {
    ProtocolContext::prepare(config)?.run(config.k, config.strategy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub strategy: RetrievalStrategy,
    pub k: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn cell(&self, strategy: RetrievalStrategy, k: usize) -> Option<&EvalReport> {
        self.cells
            .iter()
            .find(|c| c.strategy == strategy && c.k == k)
            .map(|c| &c.report)
    }
}

/// One report per `(strategy, k)`, strategies outermost. Random cells get
/// fixed per-cell seeds from the strategy seed, config seed and `k`, so each
/// cell equals the corresponding [`run_protocol`] call.
pub fn run_ablation(
    ctx: &ProtocolContext,
    strategies: &[RetrievalStrategy],
    k_values: &[usize],
) -> Result<AblationReport, EvalError> {
    let mut cells = Vec::with_capacity(strategies.len() * k_values.len());
    for &strategy in strategies {
        for &k in k_values {
            tracing::info!(%strategy, k, "ablation cell");
            cells.push(AblationCell {
                strategy,
                k,
                report: ctx.run(k, strategy)?,
            });
        }
    }
    Ok(AblationReport { cells })
}

/// Engine and backbone named by `config`, plus the backbone fallback diagnostic.
pub fn pipeline_from_config(config: &EvalConfig) -> Result<(Pipeline, Option<String>), EvalError> {
    let mut backbone_config = config.backbone_config.clone();
    backbone_config.embed_resolution = config.preprocess.embed_resolution;
    let loaded = load_backbone(&config.backbone, &backbone_config)?;
    let engine = load_engine(&config.engine, &config.engine_config)?;
    Ok((Pipeline::new(engine, loaded.backbone, config.preprocess), loaded.diagnostic))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use crate::data::{ImageSlice, IntensityMode, LabelMask, Provenance};
    use crate::embedding::TestBackbone;
    use crate::seg::{ToyEngine, TransferEngine};
    use ndarray::Array2;

    fn classes() -> ClassMap {
        [(1u16, "disc".to_string()), (2, "bar".to_string())].into_iter().collect()
    }

    fn shape(id: &str, subject: &str, i: usize) -> SampleRecord {
        let (h, w) = (24, 24);
        let (cy, cx, r) = (6 + i % 12, 6 + (i * 5) % 12, 2 + i % 4);
        let labels = Array2::from_shape_fn((h, w), |(y, x)| {
            let dy = y as i64 - cy as i64;
            let dx = x as i64 - cx as i64;
            if dy * dy + dx * dx <= (r * r) as i64 {
                1u16
            } else if y == 20 + i % 3 && x < 4 + i {
                2
            } else {
                0
            }
        });
        let px = labels.mapv(|l| f32::from(l) * 100.0) + Array2::from_shape_fn((h, w), |(y, x)| ((y + x + i) % 5) as f32);
        SampleRecord::new(
            id,
            ImageSlice::new(px, subject, 0, "MR").unwrap(),
            LabelMask::new(labels, classes()).unwrap(),
            Provenance::Dataset,
        )
        .unwrap()
    }

    fn pipeline(engine: Arc<dyn crate::seg::SegEngine>) -> Pipeline {
        Pipeline::new(
            engine,
            Arc::new(TestBackbone::new(0, 32).with_resolution(28)),
            PreprocessSpec::new(28, 64, IntensityMode::Minmax).unwrap(),
        )
    }

    fn data() -> (Vec<SampleRecord>, Vec<SampleRecord>) {
        let db: Vec<_> = (0..12).map(|i| shape(&format!("db{i}"), &format!("db_subj{}", i / 4), i)).collect();
        let tests: Vec<_> = (0..12).map(|i| shape(&format!("t{i}"), &format!("t_subj{}", i / 4), i)).collect();
        (db, tests)
    }

    #[test]
    fn transfer_on_duplicates_is_perfect() {
        let (db, tests) = data();
        let ctx = ProtocolContext::from_parts(pipeline(Arc::new(TransferEngine)), classes(), db, tests, &EvalConfig::default())
            .unwrap();
        let report = ctx.run(1, RetrievalStrategy::Embedding).unwrap();
        for c in &report.per_class {
            assert_eq!(c.mean_dice, Some(1.0), "{c:?}");
        }
        assert!(report.records.iter().all(|r| r.dice == 1.0));
    }

    #[test]
    fn leakage_guard() {
        let (db, _) = data();
        let tests = vec![shape("q", "db_subj0", 3)];
        let err = ProtocolContext::from_parts(pipeline(Arc::new(TransferEngine)), classes(), db.clone(), tests.clone(), &EvalConfig::default())
            .unwrap_err();
        assert!(matches!(err, EvalError::SubjectLeakage(ref s) if s == &["db_subj0".to_string()]));
        let cfg = EvalConfig {
            allow_subject_overlap: true,
            ..Default::default()
        };
        assert!(ProtocolContext::from_parts(pipeline(Arc::new(TransferEngine)), classes(), db, tests, &cfg).is_ok());
    }

    #[test]
    fn deterministic_and_single_cell_grid() {
        let (db, tests) = data();
        let ctx = ProtocolContext::from_parts(pipeline(Arc::new(ToyEngine::new(2))), classes(), db, tests, &EvalConfig::default())
            .unwrap();
        let strategy = RetrievalStrategy::Random { seed: 4 };
        let a = ctx.run(3, strategy).unwrap();
        let b = ctx.run(3, strategy).unwrap();
        assert!(a.same_results(&b));
        let grid = run_ablation(&ctx, &[strategy], &[3]).unwrap();
        assert!(grid.cells[0].report.same_results(&a));
        let other_k = ctx.run(4, strategy).unwrap();
        assert_ne!(other_k.records, a.records);
    }

    #[test]
    fn class_selection_by_name() {
        let (db, tests) = data();
        let cfg = EvalConfig {
            classes: vec!["bar".into()],
            ..Default::default()
        };
        let ctx = ProtocolContext::from_parts(pipeline(Arc::new(TransferEngine)), classes(), db.clone(), tests.clone(), &cfg)
            .unwrap();
        let report = ctx.run(1, RetrievalStrategy::Embedding).unwrap();
        assert_eq!(report.per_class.len(), 1);
        assert!(report.records.iter().all(|r| r.class_label == 2));
        let bad = EvalConfig {
            classes: vec!["nope".into()],
            ..Default::default()
        };
        assert!(matches!(
            ProtocolContext::from_parts(pipeline(Arc::new(TransferEngine)), classes(), db, tests, &bad),
            Err(EvalError::Config(_))
        ));
    }

    #[test]
    fn derive_seed_spreads() {
        let seeds: BTreeSet<u64> = (0..1000).map(|i| derive_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(derive_seed(0, 0), 0);
    }

    #[test]
    fn config_json_defaults_and_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.json");
        std::fs::write(&path, r#"{"engine": "transfer", "index_manifest": "db/manifest.json", "test_manifest": "/abs/t.json", "k": 4, "strategy": "random:3"}"#).unwrap();
        let cfg = EvalConfig::load(&path).unwrap();
        assert_eq!(cfg.index_manifest, dir.path().join("db/manifest.json"));
        assert_eq!(cfg.test_manifest, PathBuf::from("/abs/t.json"));
        assert_eq!(cfg.strategy, RetrievalStrategy::Random { seed: 3 });
        assert_eq!(cfg.stratify_threshold, 200);
        std::fs::write(&path, r#"{"engine": "transfer", "kk": 1}"#).unwrap();
        assert!(matches!(EvalConfig::load(&path), Err(EvalError::Config(_))));
    }
}
