//! Lossless raster I/O: 8/16-bit grayscale PNG and `.npy` arrays.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};
use ndarray::{Array2, Array3};
use ndarray_npy::{ReadNpyExt, WriteNpyExt};

use super::DataError;

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";
const NPY_MAGIC: &[u8] = b"\x93NUMPY";

fn read_bytes(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf())
        } else {
            DataError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    std::fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn decode_png(bytes: &[u8]) -> Result<DynamicImage, DataError> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| DataError::UnsupportedRaster(format!("png decode: {e}")))
}

fn luma_to_array<T: Copy>(width: u32, height: u32, raw: Vec<T>) -> Array2<T> {
    Array2::from_shape_vec((height as usize, width as usize), raw)
        .expect("image buffer length matches its dimensions")
}

/// Decodes an intensity image from PNG or `.npy` bytes.
///
/// Colour PNGs are reduced to 16-bit luma. `.npy` accepts f32, f64, u8 and u16.
pub fn decode_image(bytes: &[u8]) -> Result<Array2<f32>, DataError> {
    if bytes.starts_with(PNG_MAGIC) {
        let img = decode_png(bytes)?;
        let (w, h) = (img.width(), img.height());
        return Ok(match img {
            DynamicImage::ImageLuma8(buf) => luma_to_array(w, h, buf.into_raw()).mapv(f32::from),
            DynamicImage::ImageLuma16(buf) => luma_to_array(w, h, buf.into_raw()).mapv(f32::from),
            other => luma_to_array(w, h, other.into_luma16().into_raw()).mapv(f32::from),
        });
    }
    if bytes.starts_with(NPY_MAGIC) {
        if let Ok(a) = Array2::<f32>::read_npy(Cursor::new(bytes)) {
            return Ok(a);
        }
        if let Ok(a) = Array2::<f64>::read_npy(Cursor::new(bytes)) {
            return Ok(a.mapv(|v| v as f32));
        }
        if let Ok(a) = Array2::<u16>::read_npy(Cursor::new(bytes)) {
            return Ok(a.mapv(f32::from));
        }
        if let Ok(a) = Array2::<u8>::read_npy(Cursor::new(bytes)) {
            return Ok(a.mapv(f32::from));
        }
        return Err(DataError::UnsupportedRaster(
            "npy image must be a 2D f32/f64/u8/u16 array".into(),
        ));
    }
    Err(DataError::UnsupportedRaster(
        "expected PNG or NPY content".into(),
    ))
}

/// Decodes an integer label map from 8/16-bit grayscale PNG or `.npy` bytes.
pub fn decode_mask(bytes: &[u8]) -> Result<Array2<u16>, DataError> {
    if bytes.starts_with(PNG_MAGIC) {
        let img = decode_png(bytes)?;
        let (w, h) = (img.width(), img.height());
        return match img {
            DynamicImage::ImageLuma8(buf) => Ok(luma_to_array(w, h, buf.into_raw()).mapv(u16::from)),
            DynamicImage::ImageLuma16(buf) => Ok(luma_to_array(w, h, buf.into_raw())),
            _ => Err(DataError::UnsupportedRaster(
                "label masks must be single-channel PNG".into(),
            )),
        };
    }
    if bytes.starts_with(NPY_MAGIC) {
        if let Ok(a) = Array2::<u16>::read_npy(Cursor::new(bytes)) {
            return Ok(a);
        }
        if let Ok(a) = Array2::<u8>::read_npy(Cursor::new(bytes)) {
            return Ok(a.mapv(u16::from));
        }
        if let Ok(a) = Array2::<i64>::read_npy(Cursor::new(bytes)) {
            return a
                .iter()
                .all(|&v| (0..=i64::from(u16::MAX)).contains(&v))
                .then(|| a.mapv(|v| v as u16))
                .ok_or_else(|| DataError::UnsupportedRaster("label out of u16 range".into()));
        }
        return Err(DataError::UnsupportedRaster(
            "npy mask must be a 2D u8/u16/i64 array".into(),
        ));
    }
    Err(DataError::UnsupportedRaster(
        "expected PNG or NPY content".into(),
    ))
}

pub fn read_image(path: &Path) -> Result<Array2<f32>, DataError> {
    decode_image(&read_bytes(path)?)
}

pub fn read_mask(path: &Path) -> Result<Array2<u16>, DataError> {
    decode_mask(&read_bytes(path)?)
}

/// Reads a D×H×W float volume stored as `.npy`.
pub fn read_volume(path: &Path) -> Result<Array3<f32>, DataError> {
    let bytes = read_bytes(path)?;
    Array3::<f32>::read_npy(Cursor::new(&bytes))
        .or_else(|_| Array3::<f64>::read_npy(Cursor::new(&bytes)).map(|a| a.mapv(|v| v as f32)))
        .map_err(|e| DataError::UnsupportedRaster(format!("volume npy: {e}")))
}

/// Reads a D×H×W label volume stored as `.npy`.
pub fn read_label_volume(path: &Path) -> Result<Array3<u16>, DataError> {
    let bytes = read_bytes(path)?;
    Array3::<u16>::read_npy(Cursor::new(&bytes))
        .or_else(|_| Array3::<u8>::read_npy(Cursor::new(&bytes)).map(|a| a.mapv(u16::from)))
        .map_err(|e| DataError::UnsupportedRaster(format!("label volume npy: {e}")))
}

/// Encodes a label map as PNG: 8-bit when every label fits, 16-bit otherwise.
pub fn encode_mask_png(labels: &Array2<u16>) -> Vec<u8> {
    let (h, w) = labels.dim();
    let mut out = Cursor::new(Vec::new());
    if labels.iter().all(|&l| l <= u16::from(u8::MAX)) {
        let raw: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
        ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, raw)
            .expect("buffer sized from array")
            .write_to(&mut out, ImageFormat::Png)
            .expect("in-memory png encode");
    } else {
        let raw: Vec<u16> = labels.iter().copied().collect();
        ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, raw)
            .expect("buffer sized from array")
            .write_to(&mut out, ImageFormat::Png)
            .expect("in-memory png encode");
    }
    out.into_inner()
}

/// Encodes intensities as a 16-bit PNG, min-max stretched to the full range.
/// Exact for integer images already in `0..=65535` with min 0 and max 65535;
/// lossless storage of arbitrary floats should use [`encode_image_npy`].
pub fn encode_image_png16(pixels: &Array2<f32>) -> Vec<u8> {
    let (h, w) = pixels.dim();
    let (lo, hi) = pixels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let raw: Vec<u16> = pixels
        .iter()
        .map(|&v| {
            if span > 0.0 {
                (((v - lo) / span) * 65535.0).round() as u16
            } else {
                0
            }
        })
        .collect();
    let mut out = Cursor::new(Vec::new());
    ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, raw)
        .expect("buffer sized from array")
        .write_to(&mut out, ImageFormat::Png)
        .expect("in-memory png encode");
    out.into_inner()
}

/// 8-bit display rendering (thumbnails), min-max stretched.
pub fn encode_image_png8(pixels: &Array2<f32>) -> Vec<u8> {
    let (h, w) = pixels.dim();
    let (lo, hi) = pixels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let raw: Vec<u8> = pixels
        .iter()
        .map(|&v| if span > 0.0 { (((v - lo) / span) * 255.0).round() as u8 } else { 0 })
        .collect();
    let mut out = Cursor::new(Vec::new());
    ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, raw)
        .expect("buffer sized from array")
        .write_to(&mut out, ImageFormat::Png)
        .expect("in-memory png encode");
    out.into_inner()
}

/// Lossless float storage.
pub fn encode_image_npy(pixels: &Array2<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    pixels
        .write_npy(&mut out)
        .expect("writing npy to a Vec cannot fail");
    out
}

pub fn write_mask(path: &Path, labels: &Array2<u16>) -> Result<(), DataError> {
    write_bytes(path, &encode_mask_png(labels))
}

/// Writes an image losslessly: `.npy` keeps floats, anything else is a 16-bit
/// PNG and must already hold integers in `0..=65535`.
pub fn write_image(path: &Path, pixels: &Array2<f32>) -> Result<(), DataError> {
    let is_npy = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("npy"));
    if is_npy {
        return write_bytes(path, &encode_image_npy(pixels));
    }
    let lossless = pixels
        .iter()
        .all(|&v| v.fract() == 0.0 && (0.0..=65535.0).contains(&v));
    if !lossless {
        return Err(DataError::UnsupportedRaster(
            "PNG images must hold integers in 0..=65535; use .npy for floats".into(),
        ));
    }
    let (h, w) = pixels.dim();
    let raw: Vec<u16> = pixels.iter().map(|&v| v as u16).collect();
    let mut out = Cursor::new(Vec::new());
    ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, raw)
        .expect("buffer sized from array")
        .write_to(&mut out, ImageFormat::Png)
        .expect("in-memory png encode");
    write_bytes(path, &out.into_inner())
}
