//! Dataset model: annotated slices, manifests, volume slicing and the
//! deterministic preprocessing both backbones consume.

mod manifest;
mod preprocess;
pub mod raster;
mod volume;
pub mod synth;

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use manifest::{load_manifest, DatasetManifest, ManifestEntry, MANIFEST_FORMAT_VERSION};
pub use preprocess::{
    normalize_intensity, preprocess_for_embedding, preprocess_for_segmentation, resize_bilinear,
    resize_mask_nearest, restore_native, to_backbone_tensor, IntensityMode, PreprocessSpec,
    IMAGENET_MEAN, IMAGENET_STD,
};
pub use volume::{slice_volume, stack_volume};

/// Label integer to class name. Label 0 is background and never appears here.
pub type ClassMap = BTreeMap<u16, String>;

pub const BACKGROUND: u16 = 0;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite pixel values in `{0}`")]
    NonFiniteInput(String),
    #[error("label {label} is not in the class map")]
    UnknownLabel { label: u16 },
    #[error("invalid preprocessing parameters: {0}")]
    InvalidSpec(String),
    #[error("unsupported raster: {0}")]
    UnsupportedRaster(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One 2D intensity image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSlice {
    pixels: Array2<f32>,
    pub subject_id: String,
    pub slice_index: u32,
    pub modality: String,
}

impl ImageSlice {
    pub fn new(
        pixels: Array2<f32>,
        subject_id: impl Into<String>,
        slice_index: u32,
        modality: impl Into<String>,
    ) -> Result<Self, DataError> {
        let subject_id = subject_id.into();
        if pixels.nrows() == 0 || pixels.ncols() == 0 {
            return Err(DataError::ShapeMismatch(format!(
                "image for subject `{subject_id}` is empty"
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFiniteInput(subject_id));
        }
        Ok(Self {
            pixels,
            subject_id,
            slice_index,
            modality: modality.into(),
        })
    }

    /// Bare image with no subject metadata, as uploaded to the service.
    pub fn anonymous(pixels: Array2<f32>) -> Result<Self, DataError> {
        Self::new(pixels, "", 0, "unknown")
    }

    pub fn pixels(&self) -> &Array2<f32> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dim()
    }
}

/// Integer label map paired with an [`ImageSlice`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMask {
    labels: Array2<u16>,
    pub class_map: ClassMap,
}

impl LabelMask {
    pub fn new(labels: Array2<u16>, class_map: ClassMap) -> Result<Self, DataError> {
        if class_map.contains_key(&BACKGROUND) {
            return Err(DataError::SchemaViolation(
                "label 0 is reserved for background".into(),
            ));
        }
        if let Some(&label) = labels
            .iter()
            .find(|&&l| l != BACKGROUND && !class_map.contains_key(&l))
        {
            return Err(DataError::UnknownLabel { label });
        }
        Ok(Self { labels, class_map })
    }

    pub fn labels(&self) -> &Array2<u16> {
        &self.labels
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dim()
    }

    /// 0/1 mask of the pixels carrying `class_label`.
    pub fn binary(&self, class_label: u16) -> Array2<u8> {
        self.labels.mapv(|l| u8::from(l == class_label))
    }

    pub fn pixel_count(&self, class_label: u16) -> usize {
        self.labels.iter().filter(|&&l| l == class_label).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Dataset,
    UserAccepted,
}

/// One annotated slice: the unit stored in the retrieval database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image: ImageSlice,
    pub mask: LabelMask,
    pub provenance: Provenance,
}

impl SampleRecord {
    pub fn new(
        id: impl Into<String>,
        image: ImageSlice,
        mask: LabelMask,
        provenance: Provenance,
    ) -> Result<Self, DataError> {
        let id = id.into();
        if image.dims() != mask.dims() {
            return Err(DataError::ShapeMismatch(format!(
                "sample `{id}`: image {:?} vs mask {:?}",
                image.dims(),
                mask.dims()
            )));
        }
        Ok(Self {
            id,
            image,
            mask,
            provenance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn acdc_classes() -> ClassMap {
        [(1, "RV"), (2, "Myo"), (3, "LV")]
            .into_iter()
            .map(|(k, v)| (k, v.to_string()))
            .collect()
    }

    #[test]
    fn image_rejects_non_finite() {
        let px = array![[0.0, f32::NAN]];
        assert!(matches!(
            ImageSlice::new(px, "s", 0, "mr"),
            Err(DataError::NonFiniteInput(_))
        ));
    }

    #[test]
    fn image_rejects_empty() {
        let px = Array2::<f32>::zeros((0, 4));
        assert!(ImageSlice::anonymous(px).is_err());
    }

    #[test]
    fn mask_rejects_unknown_label() {
        let labels = array![[0u16, 4]];
        assert!(matches!(
            LabelMask::new(labels, acdc_classes()),
            Err(DataError::UnknownLabel { label: 4 })
        ));
    }

    #[test]
    fn binary_mask_selects_one_class() {
        let mask = LabelMask::new(array![[0u16, 1, 2], [3, 2, 2]], acdc_classes()).unwrap();
        assert_eq!(mask.binary(2), array![[0u8, 0, 1], [0, 1, 1]]);
        assert_eq!(mask.pixel_count(2), 3);
    }

    #[test]
    fn record_requires_matching_dims() {
        let image = ImageSlice::anonymous(Array2::zeros((2, 3))).unwrap();
        let mask = LabelMask::new(Array2::zeros((3, 2)), acdc_classes()).unwrap();
        assert!(matches!(
            SampleRecord::new("a", image, mask, Provenance::Dataset),
            Err(DataError::ShapeMismatch(_))
        ));
    }
}
