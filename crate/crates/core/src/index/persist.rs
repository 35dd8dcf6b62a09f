//! Binary index file:
//!
//! ```text
//! magic "RAMIDX1\0" | dim u32 LE | count u64 LE | version u64 LE | rows count*dim f32 LE
//! | ids_len u64 LE | ids UTF-8 JSON array | crc32 of everything before, u32 LE
//! ```
//!
//! The checksum is verified before any field is interpreted, so every
//! corruption surfaces as `CorruptFile`.

use std::io::Write;
use std::path::Path;

use super::{FlatIndex, IndexError};

pub const INDEX_MAGIC: &[u8; 8] = b"RAMIDX1\0";
const MAGIC_FAMILY: &[u8; 6] = b"RAMIDX";
const HEADER_LEN: usize = 8 + 4 + 8 + 8;
const CRC_LEN: usize = 4;

fn corrupt(msg: impl Into<String>) -> IndexError {
    IndexError::CorruptFile(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl FlatIndex {
    pub fn to_bytes(&self) -> Vec<u8> {
        let ids_json = serde_json::to_vec(&self.ids).expect("string list serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + self.rows.len() * 4 + 8 + ids_json.len() + CRC_LEN);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.version().to_le_bytes());
        for v in self.raw_rows() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(ids_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&ids_json);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        if bytes.len() < HEADER_LEN + 8 + CRC_LEN {
            return Err(corrupt("truncated"));
        }
        let (body, crc) = bytes.split_at(bytes.len() - CRC_LEN);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
            return Err(corrupt("checksum mismatch"));
        }
        if &body[..8] != INDEX_MAGIC {
            return Err(if &body[..6] == MAGIC_FAMILY {
                IndexError::VersionUnsupported(String::from_utf8_lossy(&body[6..8]).into_owned())
            } else {
                corrupt("bad magic")
            });
        }
        let mut r = Reader { buf: body, pos: 8 };
        let dim = r.u32()? as usize;
        let count = usize::try_from(r.u64()?).map_err(|_| corrupt("count overflow"))?;
        let version = r.u64()?;
        let row_bytes = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| corrupt("row block overflow"))?;
        let rows: Vec<f32> = r
            .take(row_bytes)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let ids_len = usize::try_from(r.u64()?).map_err(|_| corrupt("ids length overflow"))?;
        let ids: Vec<String> =
            serde_json::from_slice(r.take(ids_len)?).map_err(|e| corrupt(format!("ids block: {e}")))?;
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        if ids.len() != count {
            return Err(corrupt(format!("{count} rows but {} ids", ids.len())));
        }
        if dim == 0 && count > 0 {
            return Err(corrupt("zero dimension"));
        }
        let items = ids.into_iter().zip(rows.chunks_exact(dim.max(1)).map(<[f32]>::to_vec));
        Ok(FlatIndex::build(dim, items)
            .map_err(|e| corrupt(format!("invalid contents: {e}")))?
            .with_version(version))
    }

    /// Writes atomically (temp file + rename).
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_index(n: usize, dim: usize) -> FlatIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let items = (0..n).map(|i| {
            let v: Vec<f32> = (0..dim).map(|_| rng.random::<f32>() - 0.5).collect();
            let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            (format!("acdc_{i:03}"), v.iter().map(|x| (f64::from(*x) / norm) as f32).collect::<Vec<_>>())
        });
        FlatIndex::build(dim, items).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let idx = sample_index(50, 384);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.bin");
        idx.save(&path).unwrap();
        let back = FlatIndex::load(&path).unwrap();
        assert_eq!(back.ids(), idx.ids());
        assert_eq!(back.version(), idx.version());
        assert!(back.raw_rows().iter().zip(idx.raw_rows()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.to_bytes(), idx.to_bytes());
    }

    #[test]
    fn empty_index_round_trips() {
        let idx = FlatIndex::new(384);
        let back = FlatIndex::from_bytes(&idx.to_bytes()).unwrap();
        assert_eq!(back.dim(), 384);
        assert!(back.is_empty());
    }

    #[test]
    fn truncation_is_corrupt() {
        let bytes = sample_index(5, 8).to_bytes();
        for cut in [0, 3, 19, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(FlatIndex::from_bytes(&bytes[..cut]), Err(IndexError::CorruptFile(_))));
        }
    }

    #[test]
    fn wrong_magic_is_corrupt() {
        let mut bytes = sample_index(5, 8).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(FlatIndex::from_bytes(&bytes), Err(IndexError::CorruptFile(_))));
    }

    #[test]
    fn other_version_with_valid_checksum() {
        let mut bytes = sample_index(3, 8).to_bytes();
        bytes[6] = b'2';
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(FlatIndex::from_bytes(&bytes), Err(IndexError::VersionUnsupported(_))));
    }

    #[test]
    fn layout_matches_documented_format() {
        let idx = FlatIndex::build(2, [("a", vec![1.0f32, 0.0])]).unwrap().with_version(7);
        let b = idx.to_bytes();
        assert_eq!(&b[..8], INDEX_MAGIC);
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..20], &1u64.to_le_bytes());
        assert_eq!(&b[20..28], &7u64.to_le_bytes());
        assert_eq!(&b[28..32], &1.0f32.to_le_bytes());
        assert_eq!(&b[32..36], &0.0f32.to_le_bytes());
        assert_eq!(&b[36..44], &5u64.to_le_bytes());
        assert_eq!(&b[44..49], br#"["a"]"#);
        assert_eq!(b.len(), 53);
        assert_eq!(FlatIndex::from_bytes(&b).unwrap().version(), 7);
    }
}
