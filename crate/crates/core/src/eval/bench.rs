use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::data::ImageSlice;
use crate::embedding::Embedding;
use crate::index::FlatIndex;
use crate::seg::{Pipeline, SampleStore, SegmentOptions, StageTimings};

pub const DEFAULT_WARMUP: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub mean_ms: f64,
    /// Sample standard deviation; absent for a single repetition.
    pub std_ms: Option<f64>,
}

impl StageStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        let mean_ms = if n == 0 { 0.0 } else { samples.iter().sum::<f64>() / n as f64 };
        let std_ms = (n > 1).then(|| {
            let var = samples.iter().map(|v| (v - mean_ms).powi(2)).sum::<f64>() / (n - 1) as f64;
            var.sqrt()
        });
        Self { mean_ms, std_ms }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub k: usize,
    pub repetitions: usize,
    pub embed_retrieve: StageStats,
    pub memory_encode: StageStats,
    pub attention_decode: StageStats,
    pub total: StageStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub engine: String,
    pub backbone: String,
    pub index_size: usize,
    pub warmup: usize,
    pub rows: Vec<BenchRow>,
    pub retrieval: Option<RetrievalBench>,
}

impl BenchReport {
    /// Mean total time never decreases as k grows (rows in ascending k).
    pub fn totals_non_decreasing(&self) -> bool {
        let mut rows: Vec<&BenchRow> = self.rows.iter().collect();
        rows.sort_by_key(|r| r.k);
        rows.windows(2).all(|w| w[0].total.mean_ms <= w[1].total.mean_ms)
    }
}

/// Times full per-slice segmentation for each `k`. `warmup` untimed runs
/// precede the `repetitions` timed ones; queries are cycled.
pub fn benchmark_pipeline(
    pipeline: &Pipeline,
    index: &FlatIndex,
    store: &dyn SampleStore,
    queries: &[ImageSlice],
    k_values: &[usize],
    repetitions: usize,
    warmup: usize,
) -> Result<BenchReport, EvalError> {
    if queries.is_empty() || repetitions == 0 {
        return Err(EvalError::Config("benchmark needs at least one query and one repetition".into()));
    }
    let mut rows = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let opts = SegmentOptions {
            k,
            ..SegmentOptions::default()
        };
        for i in 0..warmup {
            pipeline.segment_image(index, store, &queries[i % queries.len()], &opts)?;
        }
        let mut timings: Vec<StageTimings> = Vec::with_capacity(repetitions);
        for i in 0..repetitions {
            let r = pipeline.segment_image(index, store, &queries[i % queries.len()], &opts)?;
            timings.push(r.timing);
        }
        let stage = |f: fn(&StageTimings) -> f64| StageStats::from_samples(&timings.iter().map(f).collect::<Vec<_>>());
        rows.push(BenchRow {
            k,
            repetitions,
            embed_retrieve: stage(|t| t.embed_retrieve_ms),
            memory_encode: stage(|t| t.memory_encode_ms),
            attention_decode: stage(|t| t.attention_decode_ms),
            total: stage(StageTimings::total_ms),
        });
    }
    Ok(BenchReport {
        engine: pipeline.engine().name(),
        backbone: pipeline.backbone().name().to_string(),
        index_size: index.len(),
        warmup,
        rows,
        retrieval: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalBench {
    pub n: usize,
    pub dim: usize,
    pub k: usize,
    pub repetitions: usize,
    pub query: StageStats,
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Embedding {
    let raw: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    Embedding::from_raw(&raw).expect("gaussian vector has non-zero norm")
}

/// Top-k query latency over a synthetic index of `n` random unit vectors.
pub fn benchmark_retrieval(n: usize, dim: usize, k: usize, repetitions: usize, seed: u64) -> Result<RetrievalBench, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = FlatIndex::build(dim, (0..n).map(|i| (format!("v{i}"), random_unit(&mut rng, dim).into_vec())))?;
    let queries: Vec<Embedding> = (0..repetitions.max(1)).map(|_| random_unit(&mut rng, dim)).collect();
    index.query(queries[0].as_slice(), k)?;
    let mut samples = Vec::with_capacity(repetitions);
    for q in queries.iter().take(repetitions) {
        let t = Instant::now();
        let hits = index.query(q.as_slice(), k)?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(hits);
    }
    Ok(RetrievalBench {
        n,
        dim,
        k,
        repetitions,
        query: StageStats::from_samples(&samples),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_repetition_has_no_sigma() {
        let s = StageStats::from_samples(&[4.0]);
        assert_eq!((s.mean_ms, s.std_ms), (4.0, None));
        let s = StageStats::from_samples(&[1.0, 3.0]);
        assert_eq!(s.mean_ms, 2.0);
        assert!((s.std_ms.unwrap() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn retrieval_bench_runs() {
        let b = benchmark_retrieval(500, 8, 5, 3, 1).unwrap();
        assert_eq!(b.repetitions, 3);
        assert!(b.query.mean_ms >= 0.0);
        assert!(b.query.std_ms.is_some());
    }
}
