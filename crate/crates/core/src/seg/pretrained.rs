use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array3, Array4, ArrayD, ArrayView2, ArrayView3, Axis, Ix4};

use super::{ensure_binary, DecodedMask, FeatureMap, MemoryBank, MemoryEntry, MemorySource, SegEngine, SegError};
use crate::data::{resize_bilinear, resize_mask_nearest};
use crate::onnx::OnnxGraph;

pub const IMAGE_ENCODER_FILE: &str = "image_encoder.onnx";
pub const MEMORY_ENCODER_FILE: &str = "memory_encoder.onnx";
pub const MEMORY_ATTENTION_FILE: &str = "memory_attention.onnx";
pub const MASK_DECODER_FILE: &str = "mask_decoder.onnx";

/// SAM 2 (Hiera-L) components exported to ONNX, one graph per stage.
///
/// Graph contracts (S = input side, h = w = S/16):
///
/// * `image_encoder.onnx`: `image [1,3,S,S]` →
///   `features [1,C,h,w]`, `pos [1,C,h,w]`, `high_res_0 [1,C0,S/4,S/4]`, `high_res_1 [1,C1,S/8,S/8]`
/// * `memory_encoder.onnx`: `features [1,C,h,w]`, `mask [1,1,S,S]` (0/1) →
///   `memory [1,Cm,h,w]`, `memory_pos [1,Cm,h,w]` (conditioning-frame encodings)
/// * `memory_attention.onnx`: `current [1,C,h,w]`, `current_pos [1,C,h,w]`,
///   `memory [M,Cm,h,w]`, `memory_pos [M,Cm,h,w]` → `conditioned [1,C,h,w]`
/// * `mask_decoder.onnx`: `conditioned [1,C,h,w]`, `high_res_0`, `high_res_1` →
///   `logits [1,1,S/4,S/4]`
#[derive(Debug)]
pub struct PretrainedEngine {
    dir: PathBuf,
    image_encoder: OnnxGraph,
    memory_encoder: OnnxGraph,
    memory_attention: OnnxGraph,
    mask_decoder: OnnxGraph,
}

fn batch1(grid: &Array3<f32>) -> ArrayD<f32> {
    grid.view().insert_axis(Axis(0)).to_owned().into_dyn()
}

fn unbatch(a: ArrayD<f32>, what: &str) -> Result<Array3<f32>, SegError> {
    let a = a
        .into_dimensionality::<Ix4>()
        .map_err(|e| SegError::Runtime(format!("{what}: expected rank-4 output: {e}")))?;
    if a.dim().0 != 1 {
        return Err(SegError::Runtime(format!("{what}: expected batch 1, got {:?}", a.dim())));
    }
    Ok(a.index_axis_move(Axis(0), 0))
}

fn runtime(e: String) -> SegError {
    SegError::Runtime(e)
}

impl PretrainedEngine {
    pub fn load(dir: &Path) -> Result<Self, SegError> {
        let graph = |file: &str| -> Result<OnnxGraph, SegError> {
            let path = dir.join(file);
            if !path.is_file() {
                return Err(SegError::CheckpointMissing {
                    path: path.display().to_string(),
                    hint: format!(
                        "export the SAM 2 components ({IMAGE_ENCODER_FILE}, {MEMORY_ENCODER_FILE}, \
                         {MEMORY_ATTENTION_FILE}, {MASK_DECODER_FILE}) into this directory, or point \
                         {} at the directory that holds them",
                        super::SAM2_CHECKPOINT_ENV
                    ),
                });
            }
            OnnxGraph::load(&path).map_err(runtime)
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            image_encoder: graph(IMAGE_ENCODER_FILE)?,
            memory_encoder: graph(MEMORY_ENCODER_FILE)?,
            memory_attention: graph(MEMORY_ATTENTION_FILE)?,
            mask_decoder: graph(MASK_DECODER_FILE)?,
        })
    }

    pub fn checkpoint_dir(&self) -> &Path {
        &self.dir
    }
}

impl SegEngine for PretrainedEngine {
    fn name(&self) -> String {
        "pretrained".into()
    }

    fn checkpoint_loaded(&self) -> bool {
        true
    }

    fn encode_image_features(&self, input: ArrayView3<f32>) -> Result<FeatureMap, SegError> {
        let (c, h, w) = input.dim();
        if c != 3 || h != w || h % 16 != 0 {
            return Err(SegError::ShapeMismatch(format!("expected 3×S×S with S % 16 == 0, got {c}×{h}×{w}")));
        }
        let out = self
            .image_encoder
            .run(vec![input.insert_axis(Axis(0)).to_owned().into_dyn()])
            .map_err(runtime)?;
        if out.len() != 4 {
            return Err(SegError::Runtime(format!("image encoder returned {} outputs, expected 4", out.len())));
        }
        let mut out = out.into_iter();
        let mut next = |what: &str| unbatch(out.next().expect("length checked"), what);
        let grid = next("features")?;
        let pos = next("pos")?;
        let high_res_0 = next("high_res_0")?;
        let high_res_1 = next("high_res_1")?;
        let stride = h / grid.dim().1.max(1);
        Ok(FeatureMap {
            grid,
            stride,
            pos: Some(pos),
            skips: vec![high_res_0, high_res_1],
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
        let side = (h * features.stride, w * features.stride);
        let resized = resize_mask_nearest(&mask.to_owned(), side.0, side.1).mapv(f32::from);
        let mask_input = resized.insert_axis(Axis(0)).insert_axis(Axis(0)).into_dyn();
        let out = self
            .memory_encoder
            .run(vec![batch1(&features.grid), mask_input])
            .map_err(runtime)?;
        let mut out = out.into_iter();
        let memory = unbatch(out.next().ok_or_else(|| runtime("memory encoder: no outputs".into()))?, "memory")?;
        let pos = unbatch(out.next().ok_or_else(|| runtime("memory encoder: missing pos".into()))?, "memory_pos")?;
        Ok(MemoryEntry {
            memory_grid: memory,
            pos: Some(pos),
            source_sample_id: source.sample_id,
            retrieval_rank: source.rank,
            class_label: source.class_label,
        })
    }

    fn memory_attention(&self, query: &FeatureMap, bank: &MemoryBank) -> Result<FeatureMap, SegError> {
        if bank.is_empty() {
            return Err(SegError::EmptyMemoryBank);
        }
        let entries = bank.canonical_entries();
        let stack = |pick: &dyn Fn(&MemoryEntry) -> Option<&Array3<f32>>| -> Result<Array4<f32>, SegError> {
            let views = entries
                .iter()
                .map(|e| pick(e).map(|a| a.view().insert_axis(Axis(0))))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| runtime("memory entry without positional encoding".into()))?;
            concatenate(Axis(0), &views).map_err(|e| SegError::ShapeMismatch(e.to_string()))
        };
        let memory = stack(&|e| Some(&e.memory_grid))?;
        let memory_pos = stack(&|e| e.pos.as_ref())?;
        let pos = query
            .pos
            .as_ref()
            .ok_or_else(|| runtime("query features lack positional encoding".into()))?;
        let out = self
            .memory_attention
            .run(vec![batch1(&query.grid), batch1(pos), memory.into_dyn(), memory_pos.into_dyn()])
            .map_err(runtime)?;
        let grid = unbatch(out.into_iter().next().ok_or_else(|| runtime("memory attention: no outputs".into()))?, "conditioned")?;
        if grid.dim() != query.grid.dim() {
            return Err(SegError::ShapeMismatch(format!(
                "conditioned {:?} differs from query {:?}",
                grid.dim(),
                query.grid.dim()
            )));
        }
        Ok(FeatureMap {
            grid,
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
        if skips.len() != 2 {
            return Err(SegError::ShapeMismatch(format!("decoder needs 2 skip levels, got {}", skips.len())));
        }
        let out = self
            .mask_decoder
            .run(vec![batch1(&conditioned.grid), batch1(&skips[0]), batch1(&skips[1])])
            .map_err(runtime)?;
        let logits = unbatch(out.into_iter().next().ok_or_else(|| runtime("mask decoder: no outputs".into()))?, "logits")?;
        if logits.dim().0 != 1 {
            return Err(SegError::Runtime(format!("expected one logit channel, got {:?}", logits.dim())));
        }
        let plane = logits.index_axis_move(Axis(0), 0);
        Ok(DecodedMask::from_logits(resize_bilinear(&plane, native.0, native.1)))
    }
}
