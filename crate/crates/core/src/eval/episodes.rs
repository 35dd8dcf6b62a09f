//! 1-way 1-shot episodes: each episode's database is exactly its support
//! slices, and its queries are segmented for one target class.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{dice, pipeline_from_config, DiceRecord, EvalConfig, EvalError, EvalReport, ReportConfig, TimingSummary};
use crate::data::{load_manifest, DatasetManifest, SampleRecord};
use crate::index::FlatIndex;
use crate::seg::{InMemoryStore, Pipeline, RetrievalStrategy, SegmentOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    /// Target class name.
    pub class: String,
    pub support: Vec<String>,
    pub queries: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fold {
    pub name: String,
    pub episodes: Vec<Episode>,
}

/// Fold definitions plus the models to run them with. `manifest` lists every
/// slice the folds refer to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    pub manifest: PathBuf,
    pub folds: Vec<Fold>,
    #[serde(default)]
    pub models: EvalConfig,
}

impl EpisodeConfig {
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let bytes = std::fs::read(path).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: Self =
            serde_json::from_slice(&bytes).map_err(|e| EvalError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if config.manifest.is_relative() {
            config.manifest = base.join(&config.manifest);
        }
        config.models.resolve_paths(base);
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: String,
    pub report: EvalReport,
}

struct Corpus {
    manifest: DatasetManifest,
    records: BTreeMap<String, SampleRecord>,
}

impl Corpus {
    fn get(&self, id: &str) -> Result<&SampleRecord, EvalError> {
        self.records
            .get(id)
            .ok_or_else(|| EvalError::Config(format!("episode refers to unknown slice `{id}`")))
    }
}

fn run_fold(pipeline: &Pipeline, corpus: &Corpus, fold: &Fold, config: &EvalConfig) -> Result<EvalReport, EvalError> {
    let class_map = &corpus.manifest.class_map;
    let mut records = Vec::new();
    let mut timing = TimingSummary::default();
    let mut classes = BTreeMap::new();
    for episode in &fold.episodes {
        let (&label, name) = class_map
            .iter()
            .find(|(_, n)| **n == episode.class)
            .ok_or_else(|| EvalError::Config(format!("unknown class `{}`", episode.class)))?;
        classes.insert(label, name.clone());
        if episode.support.is_empty() {
            return Err(EvalError::Config(format!("fold `{}` has an episode without support", fold.name)));
        }
        let mut index = FlatIndex::new(pipeline.backbone().dim());
        let mut store = InMemoryStore::new(class_map.clone());
        for id in &episode.support {
            let r = corpus.get(id)?;
            index.add(id.clone(), pipeline.embed(&r.image)?.as_slice())?;
            store.insert(r.clone());
        }
        let opts = SegmentOptions {
            k: episode.support.len(),
            classes: vec![label],
            strategy: RetrievalStrategy::Embedding,
        };
        for id in &episode.queries {
            let q = corpus.get(id)?;
            let result = pipeline.segment_image(&index, &store, &q.image, &opts)?;
            timing.embed_retrieve_ms += result.timing.embed_retrieve_ms;
            timing.memory_encode_ms += result.timing.memory_encode_ms;
            timing.attention_decode_ms += result.timing.attention_decode_ms;
            timing.n += 1;
            let pred = &result.class_masks[&label];
            let gt = q.mask.binary(label);
            let gt_pixels = gt.iter().filter(|&&v| v == 1).count();
            if gt_pixels == 0 && !config.include_empty_gt {
                continue;
            }
            records.push(DiceRecord {
                sample_id: q.id.clone(),
                subject_id: q.image.subject_id.clone(),
                class_label: label,
                dice: dice(pred.view(), gt.view())?,
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
    let report_config = ReportConfig {
        engine: pipeline.engine().name(),
        backbone: pipeline.backbone().name().to_string(),
        k: 1,
        strategy: RetrievalStrategy::Embedding,
        seed: config.seed,
        index_size: 1,
        test_size: timing.n,
        include_empty_gt: config.include_empty_gt,
        stratify_threshold: config.stratify_threshold,
    };
    Ok(EvalReport::new(report_config, &classes, records, timing, Vec::new()))
}

/// One report per fold.
pub fn run_episodes(config: &EpisodeConfig) -> Result<Vec<FoldReport>, EvalError> {
    let manifest = load_manifest(&config.manifest)?;
    let records = manifest.load_records()?;
    let (pipeline, _) = pipeline_from_config(&config.models)?;
    run_episodes_with(&pipeline, &manifest, records, &config.folds, &config.models)
}

/// [`run_episodes`] with an already built pipeline and loaded slices.
pub fn run_episodes_with(
    pipeline: &Pipeline,
    manifest: &DatasetManifest,
    records: Vec<SampleRecord>,
    folds: &[Fold],
    config: &EvalConfig,
) -> Result<Vec<FoldReport>, EvalError> {
    let corpus = Corpus {
        manifest: manifest.clone(),
        records: records.into_iter().map(|r| (r.id.clone(), r)).collect(),
    };
    folds
        .iter()
        .map(|fold| {
            Ok(FoldReport {
                fold: fold.name.clone(),
                report: run_fold(pipeline, &corpus, fold, config)?,
            })
        })
        .collect()
}
