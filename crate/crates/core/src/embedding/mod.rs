//! Unit-norm image embeddings from a pluggable backbone.
//!
//! Normalization happens here and only here, so vectors stored in the index
//! and vectors used as queries always go through the same path.

#[cfg(feature = "onnx")]
mod dino;
mod registry;
mod test_backbone;

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::data::{preprocess_for_embedding, DataError, ImageSlice, PreprocessSpec};

#[cfg(feature = "onnx")]
pub use dino::DinoBackbone;
pub use registry::{load_backbone, BackboneConfig, LoadedBackbone, DINO_CHECKPOINT_ENV, DINO_VITS14_REG};
pub use test_backbone::TestBackbone;

/// Reference embedding width (ViT-S/14 with registers).
pub const REFERENCE_DIM: usize = 384;

pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("input shape {actual:?} does not match backbone input {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },
    #[error("backbone produced non-finite or zero-norm output")]
    NonFiniteOutput,
    #[error("batch item {index}: {source}")]
    AtIndex {
        index: usize,
        #[source]
        source: Box<EmbedError>,
    },
    #[error(transparent)]
    Preprocess(#[from] DataError),
    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),
    #[error("backbone runtime: {0}")]
    Runtime(String),
}

/// Which token of a ViT output summarizes the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenMode {
    #[default]
    ClassToken,
    MeanPatch,
}

pub trait EmbeddingBackbone: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    /// Side length of the square 3-channel input.
    fn input_resolution(&self) -> usize;

    /// Raw (unnormalized) global feature for one preprocessed image.
    fn forward(&self, input: ArrayView3<f32>) -> Result<Vec<f32>, EmbedError>;

    /// Whether real pretrained weights back this instance.
    fn is_pretrained(&self) -> bool {
        false
    }
}

/// An L2-normalized embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    vector: Vec<f32>,
    pub source_id: Option<String>,
}

impl Embedding {
    /// Normalizes a raw feature to unit length.
    pub fn from_raw(raw: &[f32]) -> Result<Self, EmbedError> {
        if raw.is_empty() || raw.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFiniteOutput);
        }
        let norm = raw.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbedError::NonFiniteOutput);
        }
        let vector = raw.iter().map(|&v| (f64::from(v) / norm) as f32).collect();
        Ok(Self {
            vector,
            source_id: None,
        })
    }

    pub fn with_source(mut self, id: impl Into<String>) -> Self {
        self.source_id = Some(id.into());
        self
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.vector
            .iter()
            .zip(&other.vector)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum()
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.vector
    }
}

impl std::ops::Deref for Embedding {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.vector
    }
}

/// Embeds one preprocessed image tensor.
pub fn embed(backbone: &dyn EmbeddingBackbone, input: ArrayView3<f32>) -> Result<Embedding, EmbedError> {
    let r = backbone.input_resolution();
    if input.dim() != (3, r, r) {
        return Err(EmbedError::ShapeMismatch {
            expected: (3, r, r),
            actual: input.dim(),
        });
    }
    let raw = backbone.forward(input)?;
    debug_assert_eq!(raw.len(), backbone.dim());
    Embedding::from_raw(&raw)
}

/// Order-preserving batch embedding; item `i` equals `embed(images[i])`.
pub fn embed_batch(backbone: &dyn EmbeddingBackbone, images: &[Array3<f32>]) -> Result<Vec<Embedding>, EmbedError> {
    images
        .iter()
        .enumerate()
        .map(|(index, img)| {
            embed(backbone, img.view()).map_err(|e| EmbedError::AtIndex {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Preprocesses an image at the backbone's resolution and embeds it.
pub fn embed_image(
    backbone: &dyn EmbeddingBackbone,
    image: &ImageSlice,
    spec: &PreprocessSpec,
) -> Result<Embedding, EmbedError> {
    let spec = PreprocessSpec {
        embed_resolution: backbone.input_resolution(),
        ..*spec
    };
    let tensor = preprocess_for_embedding(image, &spec)?;
    embed(backbone, tensor.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::IntensityMode;
    use ndarray::Array2;

    fn test_image(seed: u32, offset: f32) -> ImageSlice {
        let px = Array2::from_shape_fn((40, 48), |(r, c)| {
            ((r as u32 * 37 + c as u32 * 11 + seed * 101) % 251) as f32 + offset
        });
        ImageSlice::anonymous(px).unwrap()
    }

    fn spec() -> PreprocessSpec {
        PreprocessSpec::new(56, 64, IntensityMode::Minmax).unwrap()
    }

    #[test]
    fn output_is_unit_norm() {
        let b = TestBackbone::new(42, 384).with_resolution(56);
        for s in 0..5 {
            let e = embed_image(&b, &test_image(s, 0.0), &spec()).unwrap();
            assert!((e.norm() - 1.0).abs() <= UNIT_NORM_TOLERANCE);
            assert_eq!(e.dim(), 384);
        }
    }

    #[test]
    fn identical_images_cosine_one() {
        let b = TestBackbone::new(42, 384).with_resolution(56);
        let a = embed_image(&b, &test_image(3, 0.0), &spec()).unwrap();
        let c = embed_image(&b, &test_image(3, 0.0), &spec()).unwrap();
        assert_eq!(a, c);
        assert!((a.cosine(&c) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let b = TestBackbone::new(1, 8).with_resolution(56);
        let wrong = Array3::<f32>::zeros((3, 28, 28));
        assert!(matches!(embed(&b, wrong.view()), Err(EmbedError::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_feature_rejected() {
        assert!(matches!(Embedding::from_raw(&[0.0, 0.0]), Err(EmbedError::NonFiniteOutput)));
        assert!(matches!(Embedding::from_raw(&[f32::NAN, 1.0]), Err(EmbedError::NonFiniteOutput)));
    }

    #[test]
    fn batch_matches_singles_and_reports_index() {
        let b = TestBackbone::new(7, 16).with_resolution(56);
        assert!(embed_batch(&b, &[]).unwrap().is_empty());
        let imgs: Vec<_> = (0..4)
            .map(|s| preprocess_for_embedding(&test_image(s, 0.0), &spec()).unwrap())
            .collect();
        let batch = embed_batch(&b, &imgs).unwrap();
        for (img, e) in imgs.iter().zip(&batch) {
            assert_eq!(&embed(&b, img.view()).unwrap(), e);
        }
        // Permuting the batch permutes outputs.
        let rev: Vec<_> = imgs.iter().rev().cloned().collect();
        let rev_out = embed_batch(&b, &rev).unwrap();
        assert!(rev_out.iter().rev().eq(batch.iter()));

        let mut bad = imgs.clone();
        bad.insert(2, Array3::zeros((3, 5, 5)));
        match embed_batch(&b, &bad) {
            Err(EmbedError::AtIndex { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn intensity_offset_is_invisible() {
        let b = TestBackbone::new(42, 384).with_resolution(56);
        for s in 0..4 {
            let a = embed_image(&b, &test_image(s, 0.0), &spec()).unwrap();
            let c = embed_image(&b, &test_image(s, 1000.0), &spec()).unwrap();
            assert_eq!(a, c);
        }
    }
}
