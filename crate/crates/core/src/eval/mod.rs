//! Dice metrics, protocol runs, ablation grids, size stratification and
//! timing.

mod bench;
mod episodes;
mod protocol;
mod report;

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::data::DataError;
use crate::embedding::EmbedError;
use crate::index::IndexError;
use crate::seg::{RetrievalStrategy, SegError};

pub use bench::{benchmark_pipeline, benchmark_retrieval, BenchReport, DEFAULT_WARMUP, BenchRow, RetrievalBench, StageStats};
pub use episodes::{run_episodes, run_episodes_with, Episode, EpisodeConfig, Fold, FoldReport};
pub use protocol::{derive_seed, pipeline_from_config, run_ablation, run_protocol, AblationCell, AblationReport, EvalConfig, ProtocolContext};
pub use report::{write_ablation, write_report, ReportFormat};

/// Default region-size threshold (ground-truth pixels) for stratification.
pub const DEFAULT_STRATIFY_THRESHOLD: usize = 200;

pub const ACDC_CONFIG_ENV: &str = "RAMSEG_ACDC_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("mask is not binary (found value {0})")]
    NonBinaryMask(u8),
    #[error("subjects appear in both the index and the test set: {0:?}")]
    SubjectLeakage(Vec<String>),
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("sample `{id}`: {source}")]
    AtSample {
        id: String,
        #[source]
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Seg(#[from] SegError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// `2|A∩B| / (|A|+|B|)`, with two empty masks scoring 1.
pub fn dice(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<f64, EvalError> {
    if pred.dim() != gt.dim() {
        return Err(EvalError::ShapeMismatch(pred.dim(), gt.dim()));
    }
    let (mut a, mut b, mut both) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if p > 1 {
            return Err(EvalError::NonBinaryMask(p));
        }
        if g > 1 {
            return Err(EvalError::NonBinaryMask(g));
        }
        a += u64::from(p);
        b += u64::from(g);
        both += u64::from(p & g);
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceRecord {
    pub sample_id: String,
    pub subject_id: String,
    pub class_label: u16,
    pub dice: f64,
    pub gt_pixels: usize,
    pub pred_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class_label: u16,
    pub class_name: String,
    /// Unweighted mean over slices; absent when the class has no records.
    pub mean_dice: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSummary {
    pub class_label: u16,
    pub threshold_px: usize,
    pub small_mean: Option<f64>,
    pub small_n: usize,
    pub large_mean: Option<f64>,
    pub large_n: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-class means over records with `gt_pixels < threshold` and `>= threshold`.
/// An empty stratum is `None`.
pub fn stratify_by_size(records: &[DiceRecord], threshold_px: usize) -> Vec<StratumSummary> {
    let mut by_class: BTreeMap<u16, Vec<&DiceRecord>> = BTreeMap::new();
    for r in records {
        by_class.entry(r.class_label).or_default().push(r);
    }
    by_class
        .into_iter()
        .map(|(class_label, rs)| {
            let small: Vec<f64> = rs.iter().filter(|r| r.gt_pixels < threshold_px).map(|r| r.dice).collect();
            let large: Vec<f64> = rs.iter().filter(|r| r.gt_pixels >= threshold_px).map(|r| r.dice).collect();
            StratumSummary {
                class_label,
                threshold_px,
                small_mean: mean(small.iter().copied()),
                small_n: small.len(),
                large_mean: mean(large.iter().copied()),
                large_n: large.len(),
            }
        })
        .collect()
}

/// Per-class summaries in label order, one per entry of `class_names`.
pub fn summarize(records: &[DiceRecord], class_names: &BTreeMap<u16, String>) -> Vec<ClassSummary> {
    class_names
        .iter()
        .map(|(&class_label, name)| {
            let values: Vec<f64> = records.iter().filter(|r| r.class_label == class_label).map(|r| r.dice).collect();
            ClassSummary {
                class_label,
                class_name: name.clone(),
                mean_dice: mean(values.iter().copied()),
                n: values.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub embed_retrieve_ms: f64,
    pub memory_encode_ms: f64,
    pub attention_decode_ms: f64,
    pub total_ms: f64,
    pub n: usize,
}

/// What produced a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub engine: String,
    pub backbone: String,
    pub k: usize,
    pub strategy: RetrievalStrategy,
    pub seed: u64,
    pub index_size: usize,
    pub test_size: usize,
    pub include_empty_gt: bool,
    pub stratify_threshold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ReportConfig,
    pub per_class: Vec<ClassSummary>,
    pub records: Vec<DiceRecord>,
    pub stratified: Vec<StratumSummary>,
    pub timing: TimingSummary,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn new(
        config: ReportConfig,
        class_names: &BTreeMap<u16, String>,
        records: Vec<DiceRecord>,
        timing: TimingSummary,
        warnings: Vec<String>,
    ) -> Self {
        let per_class = summarize(&records, class_names);
        let stratified = stratify_by_size(&records, config.stratify_threshold);
        Self {
            config,
            per_class,
            records,
            stratified,
            timing,
            warnings,
        }
    }

    pub fn class_mean(&self, class_label: u16) -> Option<f64> {
        self.per_class.iter().find(|c| c.class_label == class_label).and_then(|c| c.mean_dice)
    }

    pub fn class_mean_by_name(&self, name: &str) -> Option<f64> {
        self.per_class.iter().find(|c| c.class_name == name).and_then(|c| c.mean_dice)
    }

    /// Equality of everything except wall-clock timings.
    pub fn same_results(&self, other: &Self) -> bool {
        self.config == other.config
            && self.per_class == other.per_class
            && self.records == other.records
            && self.stratified == other.stratified
            && self.warnings == other.warnings
    }
}

/// Which external assets are present for the asset-gated evaluations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AssetStatus {
    pub sam2_checkpoint: Option<PathBuf>,
    pub dino_checkpoint: Option<PathBuf>,
    pub acdc_config: Option<PathBuf>,
}

impl AssetStatus {
    pub fn detect() -> Self {
        let existing = |var: &str, dir: bool| {
            std::env::var_os(var)
                .map(PathBuf::from)
                .filter(|p| if dir { p.is_dir() } else { p.is_file() })
        };
        Self {
            sam2_checkpoint: existing(crate::seg::SAM2_CHECKPOINT_ENV, true),
            dino_checkpoint: existing(crate::embedding::DINO_CHECKPOINT_ENV, false),
            acdc_config: existing(ACDC_CONFIG_ENV, false),
        }
    }

    /// Everything the full-scale evaluations need.
    pub fn complete(&self) -> bool {
        self.sam2_checkpoint.is_some() && self.dino_checkpoint.is_some() && self.acdc_config.is_some()
    }

    pub fn missing(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.sam2_checkpoint.is_none() {
            out.push(crate::seg::SAM2_CHECKPOINT_ENV);
        }
        if self.dino_checkpoint.is_none() {
            out.push(crate::embedding::DINO_CHECKPOINT_ENV);
        }
        if self.acdc_config.is_none() {
            out.push(ACDC_CONFIG_ENV);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn rec(class_label: u16, dice: f64, gt_pixels: usize) -> DiceRecord {
        DiceRecord {
            sample_id: format!("s{gt_pixels}"),
            subject_id: "p".into(),
            class_label,
            dice,
            gt_pixels,
            pred_pixels: 0,
        }
    }

    #[test]
    fn dice_hand_cases() {
        let a = array![[1u8, 1, 0], [0, 0, 0]];
        let b = array![[0u8, 0, 0], [0, 1, 1]];
        assert_eq!(dice(a.view(), a.view()).unwrap(), 1.0);
        assert_eq!(dice(a.view(), b.view()).unwrap(), 0.0);
        let z = Array2::<u8>::zeros((2, 3));
        assert_eq!(dice(z.view(), z.view()).unwrap(), 1.0);
        assert_eq!(dice(z.view(), a.view()).unwrap(), 0.0);
        // |A| = |B| = 100, overlap 50.
        let p = Array2::from_shape_fn((10, 20), |(y, x)| u8::from(x < 10 && y < 10));
        let g = Array2::from_shape_fn((10, 20), |(y, x)| u8::from((5..15).contains(&x) && y < 10));
        assert_eq!(dice(p.view(), g.view()).unwrap(), 0.5);
    }

    #[test]
    fn dice_errors() {
        let a = Array2::<u8>::zeros((2, 2));
        assert!(matches!(dice(a.view(), Array2::zeros((2, 3)).view()), Err(EvalError::ShapeMismatch(..))));
        assert!(matches!(dice(array![[2u8]].view(), array![[1u8]].view()), Err(EvalError::NonBinaryMask(2))));
    }

    #[test]
    fn strata_boundaries() {
        let records = vec![rec(1, 0.2, 10), rec(1, 0.9, 500)];
        let s = stratify_by_size(&records, 0);
        assert_eq!((s[0].small_mean, s[0].large_n), (None, 2));
        let s = stratify_by_size(&records, 1000);
        assert_eq!((s[0].large_mean, s[0].small_n), (None, 2));
        let s = stratify_by_size(&records, DEFAULT_STRATIFY_THRESHOLD);
        assert_eq!((s[0].small_mean, s[0].large_mean), (Some(0.2), Some(0.9)));
    }

    fn mask_pair() -> impl Strategy<Value = (Array2<u8>, Array2<u8>)> {
        (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            (
                proptest::collection::vec(0u8..2, h * w),
                proptest::collection::vec(0u8..2, h * w),
            )
                .prop_map(move |(a, b)| {
                    (
                        Array2::from_shape_vec((h, w), a).unwrap(),
                        Array2::from_shape_vec((h, w), b).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn dice_symmetric_and_bounded((a, b) in mask_pair()) {
            let ab = dice(a.view(), b.view()).unwrap();
            prop_assert_eq!(ab, dice(b.view(), a.view()).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            if a.iter().any(|&v| v == 1) {
                prop_assert_eq!(dice(a.view(), a.view()).unwrap(), 1.0);
            }
        }

        #[test]
        fn strata_recombine(values in proptest::collection::vec((0.0f64..=1.0, 0usize..400), 1..40), t in 0usize..400) {
            let records: Vec<_> = values.iter().map(|&(d, px)| rec(1, d, px)).collect();
            let s = &stratify_by_size(&records, t)[0];
            let overall = records.iter().map(|r| r.dice).sum::<f64>() / records.len() as f64;
            let combined = (s.small_mean.unwrap_or(0.0) * s.small_n as f64
                + s.large_mean.unwrap_or(0.0) * s.large_n as f64)
                / (s.small_n + s.large_n) as f64;
            prop_assert!((overall - combined).abs() < 1e-12);
        }
    }
}
