use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::{DataError, ImageSlice};

/// ImageNet statistics used by both the DINOv2 and SAM 2 image encoders.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

const VIT_PATCH: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntensityMode {
    /// Per-slice min-max to `[0, 1]`; constant slices map to 0.
    #[default]
    Minmax,
    /// Per-slice zero mean, unit variance; constant slices map to 0.
    Zscore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessSpec {
    pub embed_resolution: usize,
    pub seg_resolution: usize,
    pub intensity_mode: IntensityMode,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            embed_resolution: 518,
            seg_resolution: 1024,
            intensity_mode: IntensityMode::Minmax,
        }
    }
}

impl PreprocessSpec {
    pub fn new(embed_resolution: usize, seg_resolution: usize, intensity_mode: IntensityMode) -> Result<Self, DataError> {
        let spec = Self {
            embed_resolution,
            seg_resolution,
            intensity_mode,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.embed_resolution == 0 || self.embed_resolution % VIT_PATCH != 0 {
            return Err(DataError::InvalidSpec(format!(
                "embed_resolution {} must be a positive multiple of {VIT_PATCH}",
                self.embed_resolution
            )));
        }
        if self.seg_resolution == 0 {
            return Err(DataError::InvalidSpec("seg_resolution must be positive".into()));
        }
        Ok(())
    }
}

/// Per-slice intensity normalization.
pub fn normalize_intensity(pixels: &Array2<f32>, mode: IntensityMode) -> Result<Array2<f32>, DataError> {
    if pixels.iter().any(|v| !v.is_finite()) {
        return Err(DataError::NonFiniteInput("image".into()));
    }
    Ok(match mode {
        IntensityMode::Minmax => {
            let (lo, hi) = pixels
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let span = hi - lo;
            if span > 0.0 {
                pixels.mapv(|v| (v - lo) / span)
            } else {
                Array2::zeros(pixels.dim())
            }
        }
        IntensityMode::Zscore => {
            let n = pixels.len() as f64;
            let mean = pixels.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
            let var = pixels.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if std > 0.0 {
                pixels.mapv(|v| ((f64::from(v) - mean) / std) as f32)
            } else {
                Array2::zeros(pixels.dim())
            }
        }
    })
}

/// Source taps and weights for half-pixel bilinear sampling along one axis.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize with half-pixel centers and edge clamping
/// (`align_corners = false`, no antialiasing).
pub fn resize_bilinear(src: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (in_h, in_w) = src.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return src.clone();
    }
    let rows = bilinear_taps(in_h, out_h);
    let cols = bilinear_taps(in_w, out_w);
    // Horizontal pass then vertical pass.
    let mut tmp = Array2::<f32>::zeros((in_h, out_w));
    for r in 0..in_h {
        for (c, &(c0, c1, t)) in cols.iter().enumerate() {
            tmp[[r, c]] = src[[r, c0]] * (1.0 - t) + src[[r, c1]] * t;
        }
    }
    let mut out = Array2::<f32>::zeros((out_h, out_w));
    for (r, &(r0, r1, t)) in rows.iter().enumerate() {
        for c in 0..out_w {
            out[[r, c]] = tmp[[r0, c]] * (1.0 - t) + tmp[[r1, c]] * t;
        }
    }
    out
}

/// Nearest-neighbour resize; never invents values absent from the input.
pub fn resize_mask_nearest<T: Copy + Default>(src: &Array2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (in_h, in_w) = src.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return src.clone();
    }
    let pick = |i: usize, in_len: usize, out_len: usize| {
        (((i as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
    };
    let rows: Vec<usize> = (0..out_h).map(|r| pick(r, in_h, out_h)).collect();
    let cols: Vec<usize> = (0..out_w).map(|c| pick(c, in_w, out_w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(r, c)| src[[rows[r], cols[c]]])
}

/// Brings a working-resolution mask back to the image's native size.
pub fn restore_native<T: Copy + Default>(mask: &Array2<T>, native: (usize, usize)) -> Array2<T> {
    resize_mask_nearest(mask, native.0, native.1)
}

/// Resizes a normalized plane to `resolution²` and replicates it to three
/// channels, channel-first. Values are not yet standardized.
pub fn to_backbone_tensor(plane: &Array2<f32>, resolution: usize) -> Array3<f32> {
    let resized = resize_bilinear(plane, resolution, resolution);
    let view = resized.view().insert_axis(Axis(0));
    ndarray::concatenate(Axis(0), &[view, view, view]).expect("identical channel shapes")
}

fn standardize(tensor: &mut Array3<f32>) {
    for (c, mut channel) in tensor.axis_iter_mut(Axis(0)).enumerate() {
        let (mean, std) = (IMAGENET_MEAN[c], IMAGENET_STD[c]);
        channel.mapv_inplace(|v| (v - mean) / std);
    }
}

fn preprocess_at(image: &ImageSlice, resolution: usize, mode: IntensityMode) -> Result<Array3<f32>, DataError> {
    let plane = normalize_intensity(image.pixels(), mode)?;
    let mut tensor = to_backbone_tensor(&plane, resolution);
    standardize(&mut tensor);
    Ok(tensor)
}

/// `3 × embed_resolution × embed_resolution` input for the embedding backbone.
pub fn preprocess_for_embedding(image: &ImageSlice, spec: &PreprocessSpec) -> Result<Array3<f32>, DataError> {
    spec.validate()?;
    preprocess_at(image, spec.embed_resolution, spec.intensity_mode)
}

/// `3 × seg_resolution × seg_resolution` input for the segmentation encoder.
pub fn preprocess_for_segmentation(image: &ImageSlice, spec: &PreprocessSpec) -> Result<Array3<f32>, DataError> {
    spec.validate()?;
    preprocess_at(image, spec.seg_resolution, spec.intensity_mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn slice(pixels: Array2<f32>) -> ImageSlice {
        ImageSlice::anonymous(pixels).unwrap()
    }

    #[test]
    fn minmax_hand_value() {
        let px = array![[10.0f32, 15.0], [20.0, 12.0]];
        let n = normalize_intensity(&px, IntensityMode::Minmax).unwrap();
        assert_eq!(n[[0, 1]], 0.5);
        assert_eq!(n[[0, 0]], 0.0);
        assert_eq!(n[[1, 0]], 1.0);
    }

    #[test]
    fn constant_image_maps_to_zero_on_all_channels() {
        let px = Array2::from_elem((5, 7), 3.25f32);
        let plane = normalize_intensity(&px, IntensityMode::Minmax).unwrap();
        let t = to_backbone_tensor(&plane, 14);
        assert!(t.iter().all(|&v| v == 0.0));
        assert_eq!(t.index_axis(Axis(0), 0), t.index_axis(Axis(0), 2));
        let z = normalize_intensity(&px, IntensityMode::Zscore).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_shape_contract() {
        let img = slice(Array2::from_shape_fn((224, 224), |(r, c)| (r + c) as f32));
        let t = preprocess_for_embedding(&img, &PreprocessSpec::default()).unwrap();
        assert_eq!(t.dim(), (3, 518, 518));
    }

    #[test]
    fn segmentation_shape_contract() {
        let img = slice(Array2::from_shape_fn((256, 256), |(r, c)| (r * c) as f32));
        let t = preprocess_for_segmentation(&img, &PreprocessSpec::default()).unwrap();
        assert_eq!(t.dim(), (3, 1024, 1024));
    }

    #[test]
    fn standardization_uses_imagenet_stats() {
        let img = slice(array![[0.0f32, 1.0], [1.0, 0.0]]);
        let spec = PreprocessSpec::new(14, 2, IntensityMode::Minmax).unwrap();
        let t = preprocess_for_segmentation(&img, &spec).unwrap();
        assert_eq!(t[[0, 0, 1]], (1.0 - IMAGENET_MEAN[0]) / IMAGENET_STD[0]);
        assert_eq!(t[[2, 0, 0]], (0.0 - IMAGENET_MEAN[2]) / IMAGENET_STD[2]);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(PreprocessSpec::new(500, 1024, IntensityMode::Minmax).is_err());
        assert!(PreprocessSpec::new(518, 0, IntensityMode::Minmax).is_err());
        assert!(PreprocessSpec::new(224, 256, IntensityMode::Zscore).is_ok());
    }

    #[test]
    fn identity_mask_resize_is_bitwise() {
        let m = Array2::from_shape_fn((1024, 1024), |(r, c)| ((r / 100 + c / 300) % 4) as u16);
        assert_eq!(resize_mask_nearest(&m, 1024, 1024), m);
    }

    #[test]
    fn bilinear_matches_hand_interpolation() {
        // 2 -> 4 upsampling: output centers map to -0.25, 0.25, 0.75, 1.25.
        let src = array![[0.0f32, 4.0]];
        let out = resize_bilinear(&src, 1, 4);
        assert_eq!(out, array![[0.0f32, 1.0, 3.0, 4.0]]);
    }

    #[test]
    fn preprocessing_is_deterministic() {
        let img = slice(Array2::from_shape_fn((37, 53), |(r, c)| ((r * 31 + c * 17) % 97) as f32 * 0.37));
        let spec = PreprocessSpec::new(28, 64, IntensityMode::Minmax).unwrap();
        let a = preprocess_for_embedding(&img, &spec).unwrap();
        let b = preprocess_for_embedding(&img, &spec).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    proptest! {
        #[test]
        fn nearest_resize_preserves_label_set(
            h in 1usize..40, w in 1usize..40, oh in 1usize..60, ow in 1usize..60, seed in any::<u64>()
        ) {
            let m = Array2::from_shape_fn((h, w), |(r, c)| {
                ((seed.wrapping_mul(6364136223846793005).wrapping_add((r * 131 + c) as u64) >> 33) % 3) as u16 * 2
            });
            let down = resize_mask_nearest(&m, oh, ow);
            let up = resize_mask_nearest(&down, h, w);
            let labels: std::collections::BTreeSet<u16> = m.iter().copied().collect();
            prop_assert!(down.iter().all(|l| labels.contains(l)));
            prop_assert!(up.iter().all(|l| labels.contains(l)));
            prop_assert_eq!(up.dim(), (h, w));
        }
    }
}
