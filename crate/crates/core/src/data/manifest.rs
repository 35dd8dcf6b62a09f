use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{raster, ClassMap, DataError, ImageSlice, LabelMask, Provenance, SampleRecord, BACKGROUND};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub subject_id: String,
    pub slice_index: u32,
    pub modality: String,
}

/// JSON list of annotated slices. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub class_map: ClassMap,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(class_map: ClassMap, entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self, DataError> {
        let manifest = Self {
            format_version: MANIFEST_FORMAT_VERSION,
            class_map,
            entries,
            base_dir: base_dir.into(),
        };
        manifest.validate_schema()?;
        Ok(manifest)
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.base_dir.join(relative)
    }

    pub fn subjects(&self) -> HashSet<&str> {
        self.entries.iter().map(|e| e.subject_id.as_str()).collect()
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    fn validate_schema(&self) -> Result<(), DataError> {
        if self.format_version != MANIFEST_FORMAT_VERSION {
            return Err(DataError::SchemaViolation(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        if self.class_map.contains_key(&BACKGROUND) {
            return Err(DataError::SchemaViolation(
                "class_map must not name label 0 (background)".into(),
            ));
        }
        let mut seen = HashSet::with_capacity(self.entries.len());
        for entry in &self.entries {
            if entry.id.is_empty() {
                return Err(DataError::SchemaViolation("entry with empty id".into()));
            }
            if !seen.insert(entry.id.as_str()) {
                return Err(DataError::DuplicateId(entry.id.clone()));
            }
        }
        Ok(())
    }

    fn validate_paths(&self) -> Result<(), DataError> {
        for entry in &self.entries {
            for rel in [&entry.image_path, &entry.mask_path] {
                let path = self.resolve(rel);
                if !path.is_file() {
                    return Err(DataError::MissingFile(path));
                }
            }
        }
        Ok(())
    }

    /// Loads the image and mask of one entry.
    pub fn load_record(&self, entry: &ManifestEntry) -> Result<SampleRecord, DataError> {
        let pixels = raster::read_image(&self.resolve(&entry.image_path))?;
        let labels = raster::read_mask(&self.resolve(&entry.mask_path))?;
        let image = ImageSlice::new(pixels, &entry.subject_id, entry.slice_index, &entry.modality)?;
        let mask = LabelMask::new(labels, self.class_map.clone())?;
        SampleRecord::new(&entry.id, image, mask, Provenance::Dataset)
    }

    /// Loads every entry, in manifest order.
    pub fn load_records(&self) -> Result<Vec<SampleRecord>, DataError> {
        self.entries.iter().map(|e| self.load_record(e)).collect()
    }

    /// Writes the manifest as pretty JSON. Entry paths are stored as given.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        std::fs::write(path, json).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Reads and validates a manifest: schema, unique ids, and that every
/// referenced raster exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let bytes = std::fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf())
        } else {
            DataError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    let mut manifest: DatasetManifest = serde_json::from_slice(&bytes)
        .map_err(|e| DataError::SchemaViolation(format!("{}: {e}", path.display())))?;
    manifest.base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    manifest.validate_schema()?;
    manifest.validate_paths()?;
    Ok(manifest)
}
