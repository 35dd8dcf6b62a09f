use ndarray::{concatenate, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::nn::{
    area_average, gelu, grid_to_tokens, layer_norm, patchify, sinusoidal_2d, tokens_to_grid, upsample_nearest,
    Attention, Linear,
};
use super::{ensure_binary, DecodedMask, FeatureMap, MemoryBank, MemoryEntry, MemorySource, SegEngine, SegError};
use crate::data::resize_bilinear;

const PATCH: usize = 4;
const STRIDE: usize = PATCH * PATCH;
const SKIP_CHANNELS: usize = 16;
const FEATURE_CHANNELS: usize = 32;
const MEMORY_CHANNELS: usize = 16;
const ATTN_DIM: usize = 32;
const BLOCKS: usize = 2;

#[derive(Debug, Clone)]
struct AttentionBlock {
    self_attn: Attention,
    cross_attn: Attention,
    mlp_in: Linear,
    mlp_out: Linear,
}

/// Seeded, randomly initialized miniature of the memory-conditioned
/// architecture: a two-level patch-conv encoder (strides 4 and 16), a memory
/// encoder fusing features with the area-averaged mask, two attention blocks
/// (self-attention then cross-attention to memories, then an MLP), and a
/// decoder with one skip connection from the stride-4 level.
///
/// Retrieved memories carry spatial but no temporal encodings and are
/// consumed in canonical order, so bank order never affects the output.
#[derive(Debug, Clone)]
pub struct ToyEngine {
    seed: u64,
    stem: Linear,
    stage: Linear,
    mem_feature: Linear,
    mem_mask: Array1<f32>,
    mem_mix: Linear,
    blocks: Vec<AttentionBlock>,
    dec_in: Linear,
    dec_skip: Linear,
    dec_out: Linear,
}

impl ToyEngine {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Linear::init(&mut rng, 3 * PATCH * PATCH, SKIP_CHANNELS);
        let stage = Linear::init(&mut rng, SKIP_CHANNELS * PATCH * PATCH, FEATURE_CHANNELS);
        let mem_feature = Linear::init(&mut rng, FEATURE_CHANNELS, MEMORY_CHANNELS);
        let mem_mask = Array1::from_shape_simple_fn(MEMORY_CHANNELS, || {
            let z: f32 = StandardNormal.sample(&mut rng);
            z
        });
        let mem_mix = Linear::init(&mut rng, MEMORY_CHANNELS, MEMORY_CHANNELS);
        let blocks = (0..BLOCKS)
            .map(|_| AttentionBlock {
                self_attn: Attention::init(&mut rng, FEATURE_CHANNELS, FEATURE_CHANNELS, ATTN_DIM),
                cross_attn: Attention::init(&mut rng, FEATURE_CHANNELS, MEMORY_CHANNELS, ATTN_DIM),
                mlp_in: Linear::init(&mut rng, FEATURE_CHANNELS, 2 * FEATURE_CHANNELS),
                mlp_out: Linear::init(&mut rng, 2 * FEATURE_CHANNELS, FEATURE_CHANNELS),
            })
            .collect();
        let dec_in = Linear::init(&mut rng, FEATURE_CHANNELS, SKIP_CHANNELS);
        let dec_skip = Linear::init(&mut rng, SKIP_CHANNELS, SKIP_CHANNELS);
        let dec_out = Linear::init(&mut rng, SKIP_CHANNELS, 1);
        Self {
            seed,
            stem,
            stage,
            mem_feature,
            mem_mask,
            mem_mix,
            blocks,
            dec_in,
            dec_skip,
            dec_out,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Memory grid side for a square input of side `resolution`.
    pub fn memory_resolution(resolution: usize) -> usize {
        resolution / STRIDE
    }
}

impl SegEngine for ToyEngine {
    fn name(&self) -> String {
        format!("toy:{}", self.seed)
    }

    fn encode_image_features(&self, input: ArrayView3<f32>) -> Result<FeatureMap, SegError> {
        let (c, h, w) = input.dim();
        if c != 3 || h == 0 || w == 0 || h % STRIDE != 0 || w % STRIDE != 0 {
            return Err(SegError::ShapeMismatch(format!(
                "toy encoder needs 3×H×W with H, W multiples of {STRIDE}, got {c}×{h}×{w}"
            )));
        }
        let (tokens, sh, sw) = patchify(input, PATCH);
        let skip_tokens = self.stem.forward(tokens.view()).mapv(gelu);
        let skip = tokens_to_grid(skip_tokens.view(), sh, sw);
        let (tokens, gh, gw) = patchify(skip.view(), PATCH);
        let feat_tokens = self.stage.forward(tokens.view()).mapv(gelu);
        Ok(FeatureMap {
            grid: tokens_to_grid(feat_tokens.view(), gh, gw),
            stride: STRIDE,
            pos: Some(sinusoidal_2d(FEATURE_CHANNELS, gh, gw)),
            skips: vec![skip],
        })
    }

    fn encode_memory(
        &self,
        features: &FeatureMap,
        mask: ArrayView2<u8>,
        source: MemorySource,
    ) -> Result<MemoryEntry, SegError> {
        ensure_binary(mask)?;
        let (h, w) = features.spatial();
        if features.channels() != FEATURE_CHANNELS {
            return Err(SegError::ShapeMismatch(format!(
                "expected {FEATURE_CHANNELS} feature channels, got {}",
                features.channels()
            )));
        }
        let coverage = area_average(mask, h, w);
        let coverage_col = coverage
            .into_shape_with_order((h * w, 1))
            .expect("contiguous coverage map");
        let mask_term = coverage_col.dot(&self.mem_mask.view().insert_axis(Axis(0)));
        let fused = self.mem_feature.forward(grid_to_tokens(features.grid.view()).view()) + mask_term;
        let mixed = &fused + &self.mem_mix.forward(fused.mapv(gelu).view()).mapv(f32::tanh);
        Ok(MemoryEntry {
            memory_grid: tokens_to_grid(mixed.view(), h, w),
            pos: Some(sinusoidal_2d(MEMORY_CHANNELS, h, w)),
            source_sample_id: source.sample_id,
            retrieval_rank: source.rank,
            class_label: source.class_label,
        })
    }

    fn memory_attention(&self, query: &FeatureMap, bank: &MemoryBank) -> Result<FeatureMap, SegError> {
        if bank.is_empty() {
            return Err(SegError::EmptyMemoryBank);
        }
        let (h, w) = query.spatial();
        let entries = bank.canonical_entries();
        for e in &entries {
            if e.memory_grid.dim() != (MEMORY_CHANNELS, h, w) {
                return Err(SegError::ShapeMismatch(format!(
                    "memory {:?} incompatible with query grid {h}×{w}",
                    e.memory_grid.dim()
                )));
            }
        }
        let memory_tokens: Vec<Array2<f32>> = entries.iter().map(|e| grid_to_tokens(e.memory_grid.view())).collect();
        let memory_pos: Vec<Array2<f32>> = entries
            .iter()
            .map(|e| match &e.pos {
                Some(p) => grid_to_tokens(p.view()),
                None => Array2::zeros((h * w, MEMORY_CHANNELS)),
            })
            .collect();
        let views: Vec<_> = memory_tokens.iter().map(|m| m.view()).collect();
        let memory = concatenate(Axis(0), &views).expect("uniform memory token width");
        let pos_views: Vec<_> = memory_pos.iter().map(|m| m.view()).collect();
        let memory_keys = &memory + &concatenate(Axis(0), &pos_views).expect("uniform memory pos width");

        let pos = match &query.pos {
            Some(p) => grid_to_tokens(p.view()),
            None => Array2::zeros((h * w, FEATURE_CHANNELS)),
        };
        let mut x = grid_to_tokens(query.grid.view());
        for block in &self.blocks {
            let normed = layer_norm(x.view());
            let with_pos = &normed + &pos;
            x = x + block.self_attn.forward(with_pos.view(), with_pos.view(), normed.view());

            let normed = layer_norm(x.view());
            let with_pos = &normed + &pos;
            x = x + block.cross_attn.forward(with_pos.view(), memory_keys.view(), memory.view());

            let normed = layer_norm(x.view());
            let hidden = block.mlp_in.forward(normed.view()).mapv(gelu);
            x = x + block.mlp_out.forward(hidden.view());
        }
        Ok(FeatureMap {
            grid: tokens_to_grid(x.view(), h, w),
            stride: query.stride,
            pos: query.pos.clone(),
            skips: Vec::new(),
        })
    }

    fn decode_mask(
        &self,
        conditioned: &FeatureMap,
        skips: &[Array3<f32>],
        native: (usize, usize),
    ) -> Result<DecodedMask, SegError> {
        let (h, w) = conditioned.spatial();
        let skip = skips
            .first()
            .ok_or_else(|| SegError::ShapeMismatch("decoder needs the stride-4 skip level".into()))?;
        if skip.dim() != (SKIP_CHANNELS, h * PATCH, w * PATCH) || conditioned.channels() != FEATURE_CHANNELS {
            return Err(SegError::ShapeMismatch(format!(
                "skip {:?} / features {:?} inconsistent",
                skip.dim(),
                conditioned.grid.dim()
            )));
        }
        let coarse = self.dec_in.forward(grid_to_tokens(conditioned.grid.view()).view());
        let up = upsample_nearest(tokens_to_grid(coarse.view(), h, w).view(), PATCH);
        let skip_term = self.dec_skip.forward(grid_to_tokens(skip.view()).view());
        let hidden = (grid_to_tokens(up.view()) + skip_term).mapv(gelu);
        let logits = self
            .dec_out
            .forward(hidden.view())
            .into_shape_with_order((h * PATCH, w * PATCH))
            .expect("single logit channel");
        let native_logits = resize_bilinear(&logits, native.0, native.1);
        Ok(DecodedMask::from_logits(native_logits))
    }
}
