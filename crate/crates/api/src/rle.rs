use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RleError {
    #[error("{len} values for a {height}×{width} mask")]
    LengthMismatch { len: usize, height: u32, width: u32 },
    #[error("mask value {0} is not 0 or 1")]
    NonBinary(u8),
    #[error("runs cover {covered} pixels, mask has {expected}")]
    Coverage { covered: u64, expected: u64 },
    #[error("label {0} does not fit in 16 bits")]
    LabelRange(u32),
    #[error("decoded foreground count {decoded} differs from checksum {declared}")]
    Checksum { decoded: u64, declared: u64 },
}

fn check_len(len: usize, height: u32, width: u32) -> Result<(), RleError> {
    if len as u64 != u64::from(height) * u64::from(width) {
        return Err(RleError::LengthMismatch { len, height, width });
    }
    Ok(())
}

/// Row-major binary mask as alternating run lengths, starting with a
/// (possibly empty) run of zeros. `foreground` is the count of ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryRle {
    pub height: u32,
    pub width: u32,
    pub counts: Vec<u32>,
    pub foreground: u64,
}

impl BinaryRle {
    pub fn encode(height: u32, width: u32, mask: &[u8]) -> Result<Self, RleError> {
        check_len(mask.len(), height, width)?;
        let mut counts = Vec::new();
        let mut current = 0u8;
        let mut run = 0u32;
        let mut foreground = 0u64;
        for &v in mask {
            if v > 1 {
                return Err(RleError::NonBinary(v));
            }
            foreground += u64::from(v);
            if v != current {
                counts.push(run);
                current = v;
                run = 0;
            }
            run += 1;
        }
        counts.push(run);
        Ok(Self {
            height,
            width,
            counts,
            foreground,
        })
    }

    /// Decodes and checks coverage and the foreground checksum.
    pub fn decode(&self) -> Result<Vec<u8>, RleError> {
        let expected = u64::from(self.height) * u64::from(self.width);
        let covered: u64 = self.counts.iter().map(|&c| u64::from(c)).sum();
        if covered != expected {
            return Err(RleError::Coverage { covered, expected });
        }
        let mut out = Vec::with_capacity(expected as usize);
        for (i, &c) in self.counts.iter().enumerate() {
            out.extend(std::iter::repeat_n((i % 2) as u8, c as usize));
        }
        let decoded = out.iter().map(|&v| u64::from(v)).sum();
        if decoded != self.foreground {
            return Err(RleError::Checksum {
                decoded,
                declared: self.foreground,
            });
        }
        Ok(out)
    }
}

/// Row-major label map as `[label, length]` runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRle {
    pub height: u32,
    pub width: u32,
    pub runs: Vec<[u32; 2]>,
}

impl LabelRle {
    pub fn encode(height: u32, width: u32, labels: &[u16]) -> Result<Self, RleError> {
        check_len(labels.len(), height, width)?;
        let mut runs: Vec<[u32; 2]> = Vec::new();
        for &v in labels {
            match runs.last_mut() {
                Some(last) if last[0] == u32::from(v) => last[1] += 1,
                _ => runs.push([u32::from(v), 1]),
            }
        }
        Ok(Self { height, width, runs })
    }

    pub fn decode(&self) -> Result<Vec<u16>, RleError> {
        let expected = u64::from(self.height) * u64::from(self.width);
        let covered: u64 = self.runs.iter().map(|r| u64::from(r[1])).sum();
        if covered != expected {
            return Err(RleError::Coverage { covered, expected });
        }
        let mut out = Vec::with_capacity(expected as usize);
        for &[label, len] in &self.runs {
            let label = u16::try_from(label).map_err(|_| RleError::LabelRange(label))?;
            out.extend(std::iter::repeat_n(label, len as usize));
        }
        Ok(out)
    }

    /// Pixels per label.
    pub fn histogram(&self) -> std::collections::BTreeMap<u16, u64> {
        let mut h = std::collections::BTreeMap::new();
        for &[label, len] in &self.runs {
            *h.entry(label as u16).or_insert(0) += u64::from(len);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn binary_layout() {
        let r = BinaryRle::encode(2, 3, &[1, 1, 0, 0, 0, 1]).unwrap();
        assert_eq!(r.counts, vec![0, 2, 3, 1]);
        assert_eq!(r.foreground, 3);
        let z = BinaryRle::encode(1, 4, &[0; 4]).unwrap();
        assert_eq!(z.counts, vec![4]);
    }

    #[test]
    fn binary_errors() {
        assert!(matches!(BinaryRle::encode(2, 2, &[0; 3]), Err(RleError::LengthMismatch { .. })));
        assert!(matches!(BinaryRle::encode(1, 1, &[2]), Err(RleError::NonBinary(2))));
        let mut r = BinaryRle::encode(1, 3, &[0, 1, 1]).unwrap();
        r.foreground = 1;
        assert!(matches!(r.decode(), Err(RleError::Checksum { decoded: 2, declared: 1 })));
        r.counts.push(1);
        assert!(matches!(r.decode(), Err(RleError::Coverage { .. })));
    }

    #[test]
    fn label_layout() {
        let r = LabelRle::encode(1, 6, &[0, 0, 3, 3, 1, 0]).unwrap();
        assert_eq!(r.runs, vec![[0, 2], [3, 2], [1, 1], [0, 1]]);
        assert_eq!(r.histogram()[&0], 3);
    }

    proptest! {
        #[test]
        fn binary_round_trip(h in 1u32..20, w in 1u32..20, seed in proptest::collection::vec(0u8..2, 400)) {
            let mask: Vec<u8> = seed.into_iter().take((h * w) as usize).collect();
            prop_assume!(mask.len() == (h * w) as usize);
            let r = BinaryRle::encode(h, w, &mask).unwrap();
            prop_assert_eq!(r.foreground, mask.iter().map(|&v| u64::from(v)).sum::<u64>());
            prop_assert_eq!(r.decode().unwrap(), mask);
        }

        #[test]
        fn label_round_trip(h in 1u32..20, w in 1u32..20, seed in proptest::collection::vec(0u16..5, 400)) {
            let labels: Vec<u16> = seed.into_iter().take((h * w) as usize).collect();
            prop_assume!(labels.len() == (h * w) as usize);
            let r = LabelRle::encode(h, w, &labels).unwrap();
            prop_assert_eq!(r.decode().unwrap(), labels);
        }
    }
}
