//! Seeded synthetic cardiac-like slices for tests and demos.
//!
//! Each slice has a bright disc (label 3), a darker ring around it (label 2)
//! and a crescent to one side (label 1) on a noisy background.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{raster, ClassMap, DataError, DatasetManifest, ImageSlice, LabelMask, ManifestEntry, Provenance, SampleRecord};

pub fn shapes_class_map() -> ClassMap {
    [(1u16, "RV"), (2, "Myo"), (3, "LV")]
        .into_iter()
        .map(|(k, v)| (k, v.to_string()))
        .collect()
}

/// Label and intensity planes of one slice.
pub fn shapes_slice(size: usize, seed: u64) -> (Array2<f32>, Array2<u16>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let r_in = rng.random_range(0.08..0.16) * s;
    let r_out = r_in + rng.random_range(0.04..0.08) * s;
    let cy = rng.random_range(0.35..0.65) * s;
    let cx = rng.random_range(0.4..0.6) * s;
    let rv_r = r_out * rng.random_range(1.1..1.5);
    let rv_dx = -(r_out + rv_r * 0.5);
    let labels = Array2::from_shape_fn((size, size), |(y, x)| {
        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
        let d = (dy * dy + dx * dx).sqrt();
        let drv = (dy * dy + (dx - rv_dx).powi(2)).sqrt();
        if d < r_in {
            3
        } else if d < r_out {
            2
        } else if drv < rv_r {
            1
        } else {
            0
        }
    });
    let noise = rng.random_range(2.0..8.0f32);
    let mut pixels = labels.mapv(|l| [20.0, 160.0, 90.0, 210.0][l as usize]);
    pixels.mapv_inplace(|v| (v + rng.random_range(-noise..noise)).round());
    (pixels, labels)
}

pub fn shapes_record(id: &str, size: usize, seed: u64) -> Result<SampleRecord, DataError> {
    let (pixels, labels) = shapes_slice(size, seed);
    SampleRecord::new(
        id,
        ImageSlice::anonymous(pixels)?,
        LabelMask::new(labels, shapes_class_map())?,
        Provenance::Dataset,
    )
}

/// Writes `n` PNG slices plus `manifest.json` into `dir` and returns the
/// manifest path. Slice `i` belongs to subject `subj{i % subjects}`.
pub fn write_shapes_corpus(
    dir: &Path,
    prefix: &str,
    n: usize,
    size: usize,
    seed: u64,
    subjects: usize,
) -> Result<PathBuf, DataError> {
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let subjects = subjects.max(1);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("{prefix}{i:04}");
        let (pixels, labels) = shapes_slice(size, seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        raster::write_image(&dir.join(format!("{id}.png")), &pixels)?;
        raster::write_mask(&dir.join(format!("{id}_mask.png")), &labels)?;
        entries.push(ManifestEntry {
            id: id.clone(),
            image_path: format!("{id}.png").into(),
            mask_path: format!("{id}_mask.png").into(),
            subject_id: format!("{prefix}subj{}", i % subjects),
            slice_index: (i / subjects) as u32,
            modality: "synthetic".into(),
        });
    }
    let manifest = DatasetManifest::new(shapes_class_map(), entries, dir)?;
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_are_seeded_and_contain_every_class() {
        let (a, la) = shapes_slice(48, 7);
        let (b, lb) = shapes_slice(48, 7);
        assert_eq!(a, b);
        assert_eq!(la, lb);
        for class in 0..=3u16 {
            assert!(la.iter().any(|&l| l == class), "class {class} missing");
        }
        assert_ne!(shapes_slice(48, 8).1, la);
    }

    #[test]
    fn corpus_round_trips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_shapes_corpus(dir.path(), "s", 5, 32, 1, 2).unwrap();
        let manifest = super::super::load_manifest(&path).unwrap();
        let records = manifest.load_records().unwrap();
        assert_eq!(records.len(), 5);
        assert_eq!(records[3].image.subject_id, "ssubj1");
        assert_eq!(records[0].mask.labels(), &shapes_slice(32, 1_000_003).1);
    }
}
