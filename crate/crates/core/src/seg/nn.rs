//! Small dense building blocks for the toy engine. Tokens are row-major
//! `L × C` matrices; grids are channel-first `C × h × w`.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    /// `in × out`, so `tokens.dot(&weight)` applies the layer.
    weight: Array2<f32>,
    bias: Array1<f32>,
}

impl Linear {
    pub(crate) fn init<R: Rng>(rng: &mut R, input: usize, output: usize) -> Self {
        let scale = 1.0 / (input as f32).sqrt();
        let weight = Array2::from_shape_simple_fn((input, output), || {
            let z: f32 = StandardNormal.sample(rng);
            z * scale
        });
        let bias = Array1::from_shape_simple_fn(output, || {
            let z: f32 = StandardNormal.sample(rng);
            z * 0.1
        });
        Self { weight, bias }
    }

    pub(crate) fn forward(&self, tokens: ArrayView2<f32>) -> Array2<f32> {
        tokens.dot(&self.weight) + &self.bias
    }

    pub(crate) fn output_dim(&self) -> usize {
        self.weight.ncols()
    }
}

pub(crate) fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Per-token layer normalization without affine parameters.
pub(crate) fn layer_norm(tokens: ArrayView2<f32>) -> Array2<f32> {
    let mut out = tokens.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.len() as f32;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

pub(crate) fn softmax_rows(scores: &mut Array2<f32>) {
    for mut row in scores.axis_iter_mut(Axis(0)) {
        let max = row.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Single-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    pub(crate) fn init<R: Rng>(rng: &mut R, query_dim: usize, kv_dim: usize, inner: usize) -> Self {
        Self {
            q: Linear::init(rng, query_dim, inner),
            k: Linear::init(rng, kv_dim, inner),
            v: Linear::init(rng, kv_dim, inner),
            o: Linear::init(rng, inner, query_dim),
        }
    }

    /// `queries`/`keys` already carry positional terms; `values` do not.
    pub(crate) fn forward(&self, queries: ArrayView2<f32>, keys: ArrayView2<f32>, values: ArrayView2<f32>) -> Array2<f32> {
        let q = self.q.forward(queries);
        let k = self.k.forward(keys);
        let v = self.v.forward(values);
        let scale = 1.0 / (self.q.output_dim() as f32).sqrt();
        let mut scores = q.dot(&k.t()) * scale;
        softmax_rows(&mut scores);
        self.o.forward(scores.dot(&v).view())
    }
}

pub(crate) fn grid_to_tokens(grid: ArrayView3<f32>) -> Array2<f32> {
    let (c, h, w) = grid.dim();
    grid.to_shape((c, h * w))
        .expect("contiguous reshape")
        .t()
        .as_standard_layout()
        .into_owned()
}

pub(crate) fn tokens_to_grid(tokens: ArrayView2<f32>, h: usize, w: usize) -> Array3<f32> {
    let c = tokens.ncols();
    tokens
        .t()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h, w))
        .expect("token count matches grid")
}

/// Non-overlapping `patch × patch` convolution expressed as unfold + linear.
pub(crate) fn patchify(grid: ArrayView3<f32>, patch: usize) -> (Array2<f32>, usize, usize) {
    let (c, h, w) = grid.dim();
    let (gh, gw) = (h / patch, w / patch);
    let mut tokens = Array2::<f32>::zeros((gh * gw, c * patch * patch));
    for gy in 0..gh {
        for gx in 0..gw {
            let block = grid.slice(s![.., gy * patch..(gy + 1) * patch, gx * patch..(gx + 1) * patch]);
            let mut row = tokens.row_mut(gy * gw + gx);
            for (dst, src) in row.iter_mut().zip(block.iter()) {
                *dst = *src;
            }
        }
    }
    (tokens, gh, gw)
}

/// Fixed 2D sinusoidal encoding, `channels × h × w`.
pub(crate) fn sinusoidal_2d(channels: usize, h: usize, w: usize) -> Array3<f32> {
    let half = channels / 2;
    let freqs = half.div_ceil(2).max(1);
    Array3::from_shape_fn((channels, h, w), |(c, y, x)| {
        let (coord, local) = if c < half { (y, c) } else { (x, c - half) };
        let f = (local / 2) as f32;
        let omega = 1.0 / 10_000f32.powf(f / freqs as f32);
        let phase = coord as f32 * omega;
        if local % 2 == 0 {
            phase.sin()
        } else {
            phase.cos()
        }
    })
}

/// Nearest upsampling of a channel-first grid by an integer factor.
pub(crate) fn upsample_nearest(grid: ArrayView3<f32>, factor: usize) -> Array3<f32> {
    let (c, h, w) = grid.dim();
    Array3::from_shape_fn((c, h * factor, w * factor), |(ch, y, x)| grid[[ch, y / factor, x / factor]])
}

/// Exact area-weighted downsampling of a binary mask to `out_h × out_w`
/// (fractional box filter); values are coverage fractions in `[0, 1]`.
pub(crate) fn area_average(mask: ArrayView2<u8>, out_h: usize, out_w: usize) -> Array2<f32> {
    fn taps(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|i| {
                let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
                let first = lo.floor() as usize;
                let last = (hi.ceil() as usize).min(in_len);
                (first..last)
                    .filter_map(|j| {
                        let overlap = (hi.min((j + 1) as f64) - lo.max(j as f64)).max(0.0);
                        (overlap > 0.0).then_some((j, overlap / scale))
                    })
                    .collect()
            })
            .collect()
    }
    let (h, w) = mask.dim();
    let rows = taps(h, out_h);
    let cols = taps(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let mut acc = 0.0f64;
        for &(r, wr) in &rows[i] {
            for &(c, wc) in &cols[j] {
                acc += wr * wc * f64::from(mask[[r, c]]);
            }
        }
        acc as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn area_average_integer_and_fractional() {
        let m = array![[1u8, 1, 0, 0], [1, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 1]];
        assert_eq!(area_average(m.view(), 2, 2), array![[1.0f32, 0.0], [0.0, 0.75]]);
        let ones = Array2::<u8>::ones((5, 7));
        assert!(area_average(ones.view(), 3, 2).iter().all(|&v| (v - 1.0).abs() < 1e-6));
        // 3 -> 2: each output covers 1.5 source pixels.
        let row = array![[1u8, 0, 1]];
        let out = area_average(row.view(), 1, 2);
        assert!((out[[0, 0]] - 2.0 / 3.0).abs() < 1e-6);
        assert!((out[[0, 1]] - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn token_grid_round_trip() {
        let g = Array3::from_shape_fn((3, 2, 4), |(c, y, x)| (c * 100 + y * 10 + x) as f32);
        let t = grid_to_tokens(g.view());
        assert_eq!(t.dim(), (8, 3));
        assert_eq!(t[[5, 2]], 211.0);
        assert_eq!(tokens_to_grid(t.view(), 2, 4), g);
    }

    #[test]
    fn patchify_layout() {
        let g = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| (y * 4 + x) as f32);
        let (t, gh, gw) = patchify(g.view(), 2);
        assert_eq!((gh, gw), (2, 2));
        assert_eq!(t.row(1).to_vec(), vec![2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut s = array![[1.0f32, 2.0, 3.0], [1000.0, 1000.0, -1000.0]];
        softmax_rows(&mut s);
        for row in s.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }
}
