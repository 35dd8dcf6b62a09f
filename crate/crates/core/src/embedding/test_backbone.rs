use ndarray::ArrayView3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{EmbedError, EmbeddingBackbone};

const POOL_GRID: usize = 16;
const CHANNELS: usize = 3;

/// Weight-free deterministic backbone: adaptive average pool to 16×16 per
/// channel, then a fixed seeded Gaussian projection to `dim`.
#[derive(Debug, Clone)]
pub struct TestBackbone {
    name: String,
    seed: u64,
    dim: usize,
    resolution: usize,
    /// Row-major `dim × (3·16·16)`.
    projection: Vec<f32>,
}

impl TestBackbone {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim >= 2, "test backbone needs dim >= 2");
        let fan_in = CHANNELS * POOL_GRID * POOL_GRID;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (fan_in as f32).sqrt();
        let projection = (0..dim * fan_in)
            .map(|_| {
                let z: f32 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Self {
            name: format!("test:{seed}"),
            seed,
            dim,
            resolution: 518,
            projection,
        }
    }

    pub fn with_resolution(mut self, resolution: usize) -> Self {
        assert!(resolution >= POOL_GRID);
        self.resolution = resolution;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// PyTorch-style adaptive average pooling bounds.
fn pool_bounds(len: usize, i: usize) -> (usize, usize) {
    let start = i * len / POOL_GRID;
    let end = ((i + 1) * len).div_ceil(POOL_GRID);
    (start, end)
}

impl EmbeddingBackbone for TestBackbone {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn input_resolution(&self) -> usize {
        self.resolution
    }

    fn forward(&self, input: ArrayView3<f32>) -> Result<Vec<f32>, EmbedError> {
        let (c, h, w) = input.dim();
        if c != CHANNELS || h < POOL_GRID || w < POOL_GRID {
            return Err(EmbedError::ShapeMismatch {
                expected: (CHANNELS, self.resolution, self.resolution),
                actual: (c, h, w),
            });
        }
        let mut pooled = Vec::with_capacity(CHANNELS * POOL_GRID * POOL_GRID);
        for ch in 0..CHANNELS {
            for gy in 0..POOL_GRID {
                let (y0, y1) = pool_bounds(h, gy);
                for gx in 0..POOL_GRID {
                    let (x0, x1) = pool_bounds(w, gx);
                    let mut sum = 0.0f64;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            sum += f64::from(input[[ch, y, x]]);
                        }
                    }
                    pooled.push((sum / ((y1 - y0) * (x1 - x0)) as f64) as f32);
                }
            }
        }
        Ok(self
            .projection
            .chunks_exact(pooled.len())
            .map(|row| row.iter().zip(&pooled).map(|(a, b)| a * b).sum())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn input() -> Array3<f32> {
        Array3::from_shape_fn((3, 56, 56), |(c, y, x)| ((c * 13 + y * 7 + x * 3) % 23) as f32 / 23.0)
    }

    #[test]
    fn same_seed_bitwise_identical() {
        let a = TestBackbone::new(42, 384).with_resolution(56);
        let b = TestBackbone::new(42, 384).with_resolution(56);
        let x = input();
        let fa = a.forward(x.view()).unwrap();
        let fb = b.forward(x.view()).unwrap();
        assert!(fa.iter().zip(&fb).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn different_seeds_differ() {
        let x = input();
        let f1 = TestBackbone::new(1, 384).with_resolution(56).forward(x.view()).unwrap();
        let f2 = TestBackbone::new(2, 384).with_resolution(56).forward(x.view()).unwrap();
        assert_ne!(f1, f2);
    }

    #[test]
    fn dim_eight() {
        let f = TestBackbone::new(0, 8).with_resolution(56).forward(input().view()).unwrap();
        assert_eq!(f.len(), 8);
    }

    #[test]
    fn pooling_bounds_cover_everything() {
        for len in [16usize, 37, 518] {
            let mut covered = vec![false; len];
            for i in 0..POOL_GRID {
                let (a, b) = pool_bounds(len, i);
                assert!(a < b && b <= len);
                covered[a..b].iter_mut().for_each(|c| *c = true);
            }
            assert!(covered.into_iter().all(|c| c));
        }
    }
}
