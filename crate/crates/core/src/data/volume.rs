use ndarray::{Array3, ArrayView3, Axis};

use super::{ClassMap, DataError, ImageSlice, LabelMask, Provenance, SampleRecord};

/// Splits a D×H×W volume into D axial slice records, `slice_index` = depth.
///
/// Record ids are `{subject_id}_{index:02}`.
pub fn slice_volume(
    volume: ArrayView3<f32>,
    masks: ArrayView3<u16>,
    subject_id: &str,
    modality: &str,
    class_map: &ClassMap,
) -> Result<Vec<SampleRecord>, DataError> {
    if volume.dim() != masks.dim() {
        return Err(DataError::ShapeMismatch(format!(
            "volume {:?} vs masks {:?}",
            volume.dim(),
            masks.dim()
        )));
    }
    volume
        .axis_iter(Axis(0))
        .zip(masks.axis_iter(Axis(0)))
        .enumerate()
        .map(|(i, (img, mask))| {
            let image = ImageSlice::new(img.to_owned(), subject_id, i as u32, modality)?;
            let mask = LabelMask::new(mask.to_owned(), class_map.clone())?;
            SampleRecord::new(format!("{subject_id}_{i:02}"), image, mask, Provenance::Dataset)
        })
        .collect()
}

/// Inverse of [`slice_volume`]: stacks records (in order) back into volumes.
pub fn stack_volume(records: &[SampleRecord]) -> Result<(Array3<f32>, Array3<u16>), DataError> {
    let first = records
        .first()
        .ok_or_else(|| DataError::ShapeMismatch("no slices to stack".into()))?;
    let dims = first.image.dims();
    if let Some(r) = records.iter().find(|r| r.image.dims() != dims) {
        return Err(DataError::ShapeMismatch(format!(
            "slice `{}` is {:?}, expected {dims:?}",
            r.id,
            r.image.dims()
        )));
    }
    let images: Vec<_> = records.iter().map(|r| r.image.pixels().view()).collect();
    let masks: Vec<_> = records.iter().map(|r| r.mask.labels().view()).collect();
    Ok((
        ndarray::stack(Axis(0), &images).expect("uniform slice shapes"),
        ndarray::stack(Axis(0), &masks).expect("uniform slice shapes"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn classes() -> ClassMap {
        [(1u16, "LV".to_string())].into()
    }

    fn volume(d: usize) -> (Array3<f32>, Array3<u16>) {
        let v = Array3::from_shape_fn((d, 128, 128), |(z, r, c)| (z * 7 + r + c) as f32);
        let m = Array3::from_shape_fn((d, 128, 128), |(z, r, c)| u16::from((z + r + c) % 5 == 0));
        (v, m)
    }

    #[test]
    fn ten_slices_in_order() {
        let (v, m) = volume(10);
        let recs = slice_volume(v.view(), m.view(), "p007", "cine-mr", &classes()).unwrap();
        assert_eq!(recs.len(), 10);
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(r.image.slice_index, i as u32);
            assert_eq!(r.id, format!("p007_{i:02}"));
        }
        let (v2, m2) = stack_volume(&recs).unwrap();
        assert_eq!(v2, v);
        assert_eq!(m2, m);
    }

    #[test]
    fn single_slice_volume_matches_2d_case() {
        let (v, m) = volume(1);
        let recs = slice_volume(v.view(), m.view(), "p", "mr", &classes()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].image.pixels(), &v.index_axis(Axis(0), 0).to_owned());
    }

    #[test]
    fn depth_mismatch_rejected() {
        let (v, _) = volume(10);
        let (_, m) = volume(9);
        assert!(matches!(
            slice_volume(v.view(), m.view(), "p", "mr", &classes()),
            Err(DataError::ShapeMismatch(_))
        ));
    }
}
