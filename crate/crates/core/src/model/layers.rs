use crate::tensor::{FloatMatrix, PackedQ8, QuantizedMatrix};

const LN_EPS: f32 = 1e-5;

/// Quantized affine projection `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    weight: QuantizedMatrix,
    packed: PackedQ8,
    bias: Option<Vec<f32>>,
}

impl Linear {
    pub fn new(weight: QuantizedMatrix, bias: Option<Vec<f32>>) -> Self {
        if let Some(b) = &bias {
            assert_eq!(b.len(), weight.cols(), "bias length");
        }
        let packed = weight.pack();
        Self { weight, packed, bias }
    }

    pub fn weight(&self) -> &QuantizedMatrix {
        &self.weight
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &FloatMatrix) -> FloatMatrix {
        self.packed.matmul(x, self.bias.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        Self { gain: vec![1.0; dim], bias: vec![0.0; dim] }
    }

    pub fn forward(&self, x: &FloatMatrix) -> FloatMatrix {
        let d = x.cols();
        let mut out = Vec::with_capacity(x.data().len());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            out.extend(
                row.iter()
                    .zip(self.gain.iter().zip(&self.bias))
                    .map(|(v, (g, b))| (v - mean) * inv * g + b),
            );
        }
        FloatMatrix::from_raw(x.rows(), d, out)
    }
}

/// Multi-head attention projections. Scores and softmax run in `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl Attention {
    /// Attends each row of `queries` (already projected) over `keys`/`values`
    /// (already projected). All three belong to a single sentence.
    pub fn attend(queries: &[f32], keys: &[f32], values: &[f32], dim: usize, heads: usize) -> Vec<f32> {
        let n_q = queries.len() / dim;
        let n_k = keys.len() / dim;
        let head_dim = dim / heads;
        let scale = 1.0 / (head_dim as f32).sqrt();
        let mut out = vec![0f32; n_q * dim];
        if n_k == 0 {
            return out;
        }
        let mut scores = vec![0f32; n_k];
        for qi in 0..n_q {
            for h in 0..heads {
                let off = h * head_dim;
                let q = &queries[qi * dim + off..qi * dim + off + head_dim];
                for (kj, score) in scores.iter_mut().enumerate() {
                    let k = &keys[kj * dim + off..kj * dim + off + head_dim];
                    *score = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
                }
                softmax_in_place(&mut scores);
                let ctx = &mut out[qi * dim + off..qi * dim + off + head_dim];
                for (kj, &w) in scores.iter().enumerate() {
                    let v = &values[kj * dim + off..kj * dim + off + head_dim];
                    for (c, x) in ctx.iter_mut().zip(v) {
                        *c += w * x;
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn forward(&self, x: &FloatMatrix) -> FloatMatrix {
        let mut h = self.up.forward(x).into_data();
        relu_in_place(&mut h);
        self.down
            .forward(&FloatMatrix::from_raw(x.rows(), self.up.out_dim(), h))
    }
}

pub fn softmax_in_place(xs: &mut [f32]) {
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

pub fn relu_in_place(xs: &mut [f32]) {
    for x in xs {
        *x = x.max(0.0);
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn add_in_place(acc: &mut [f32], x: &[f32]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Sinusoidal position encoding for one position.
pub fn position_encoding(pos: usize, dim: usize, out: &mut [f32]) {
    for i in 0..dim / 2 {
        let angle = pos as f32 / 10000f32.powf(2.0 * i as f32 / dim as f32);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
}
