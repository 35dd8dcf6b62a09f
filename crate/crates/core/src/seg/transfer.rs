use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

use super::{ensure_binary, DecodedMask, FeatureMap, MemoryBank, MemoryEntry, MemorySource, SegEngine, SegError};
use crate::data::{normalize_intensity, resize_mask_nearest, ImageSlice, PreprocessSpec};

/// Oracle engine: predicts the rank-1 exemplar's mask, nearest-resized to
/// the query's native size. Works at native resolution throughout, so a
/// query whose duplicate is in the database gets that mask back exactly.
#[derive(Debug, Clone, Copy, Default)]
pub struct TransferEngine;

impl TransferEngine {
    pub fn new() -> Self {
        Self
    }
}

fn single_plane(grid: &Array3<f32>) -> Result<Array2<f32>, SegError> {
    if grid.dim().0 != 1 {
        return Err(SegError::ShapeMismatch(format!(
            "transfer engine works on single-channel grids, got {:?}",
            grid.dim()
        )));
    }
    Ok(grid.index_axis(Axis(0), 0).to_owned())
}

impl SegEngine for TransferEngine {
    fn name(&self) -> String {
        "transfer".into()
    }

    fn prepare_input(&self, image: &ImageSlice, spec: &PreprocessSpec) -> Result<Array3<f32>, SegError> {
        let plane = normalize_intensity(image.pixels(), spec.intensity_mode)?;
        Ok(plane.insert_axis(Axis(0)))
    }

    fn encode_image_features(&self, input: ArrayView3<f32>) -> Result<FeatureMap, SegError> {
        if input.dim().0 != 1 || input.dim().1 == 0 || input.dim().2 == 0 {
            return Err(SegError::ShapeMismatch(format!(
                "transfer engine expects a 1×H×W plane, got {:?}",
                input.dim()
            )));
        }
        Ok(FeatureMap {
            grid: input.to_owned(),
            stride: 1,
            pos: None,
            skips: Vec::new(),
        })
    }

    fn encode_memory(
        &self,
        features: &FeatureMap,
        mask: ArrayView2<u8>,
        source: MemorySource,
    ) -> Result<MemoryEntry, SegError> {
        ensure_binary(mask)?;
        if mask.dim() != features.spatial() {
            return Err(SegError::ShapeMismatch(format!(
                "mask {:?} vs exemplar {:?}",
                mask.dim(),
                features.spatial()
            )));
        }
        // Mask stored as ±1 logits.
        let grid = mask.mapv(|m| if m == 1 { 1.0f32 } else { -1.0 }).insert_axis(Axis(0));
        Ok(MemoryEntry {
            memory_grid: grid,
            pos: None,
            source_sample_id: source.sample_id,
            retrieval_rank: source.rank,
            class_label: source.class_label,
        })
    }

    fn memory_attention(&self, query: &FeatureMap, bank: &MemoryBank) -> Result<FeatureMap, SegError> {
        let best = *bank.canonical_entries().first().ok_or(SegError::EmptyMemoryBank)?;
        let (h, w) = query.spatial();
        let plane = single_plane(&best.memory_grid)?;
        Ok(FeatureMap {
            grid: resize_mask_nearest(&plane, h, w).insert_axis(Axis(0)),
            stride: query.stride,
            pos: None,
            skips: Vec::new(),
        })
    }

    fn decode_mask(
        &self,
        conditioned: &FeatureMap,
        _skips: &[Array3<f32>],
        native: (usize, usize),
    ) -> Result<DecodedMask, SegError> {
        let plane = single_plane(&conditioned.grid)?;
        Ok(DecodedMask::from_logits(resize_mask_nearest(&plane, native.0, native.1)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn features(h: usize, w: usize) -> FeatureMap {
        TransferEngine.encode_image_features(Array3::zeros((1, h, w)).view()).unwrap()
    }

    fn src(id: &str, rank: usize) -> MemorySource {
        MemorySource {
            sample_id: id.into(),
            rank,
            class_label: 1,
        }
    }

    #[test]
    fn rank_one_mask_is_upsampled_to_query() {
        let e = TransferEngine;
        let m = Array2::from_shape_fn((64, 64), |(y, x)| u8::from(y < 32 && x >= 16));
        let mut bank = MemoryBank::new(2, 1).unwrap();
        bank.push(e.encode_memory(&features(64, 64), m.view(), src("top", 1)).unwrap()).unwrap();
        bank.push(e.encode_memory(&features(64, 64), Array2::zeros((64, 64)).view(), src("second", 2)).unwrap())
            .unwrap();
        let q = features(128, 128);
        let out = e.memory_attention(&q, &bank).unwrap();
        let d = e.decode_mask(&out, &[], (128, 128)).unwrap();
        assert_eq!(d.mask, resize_mask_nearest(&m, 128, 128));

        // Bank order is irrelevant: rank decides.
        bank.permute(&[1, 0]);
        let d2 = e.decode_mask(&e.memory_attention(&q, &bank).unwrap(), &[], (128, 128)).unwrap();
        assert_eq!(d.mask, d2.mask);
    }

    #[test]
    fn identical_size_copies_exactly() {
        let e = TransferEngine;
        let m = Array2::from_shape_fn((37, 41), |(y, x)| u8::from((y * x) % 7 == 0));
        let mut bank = MemoryBank::new(1, 1).unwrap();
        bank.push(e.encode_memory(&features(37, 41), m.view(), src("dup", 1)).unwrap()).unwrap();
        let out = e.memory_attention(&features(37, 41), &bank).unwrap();
        assert_eq!(e.decode_mask(&out, &[], (37, 41)).unwrap().mask, m);
    }

    #[test]
    fn empty_bank() {
        let bank = MemoryBank::new(1, 1).unwrap();
        assert!(matches!(
            TransferEngine.memory_attention(&features(4, 4), &bank),
            Err(SegError::EmptyMemoryBank)
        ));
    }
}
