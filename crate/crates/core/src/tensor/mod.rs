//! Float and 8-bit quantized matrices, and the integer GEMM every model layer
//! runs on.
//!
//! Weights are quantized per column (`s_j = 127 / max_i |m[i,j]|`), activations
//! per row at multiply time. The product is accumulated in `i32` and rescaled
//! by `1 / (r_i * s_j)`.

mod io;
pub mod kernels;

pub use io::{
    read_f32_vec, read_quantized, write_f32_vec, write_quantized, ReadError as TensorReadError,
};
pub(crate) use io::read_u32;
pub use kernels::Kernel;

use thiserror::Error;

/// Largest magnitude a quantized value may take. `-128` is never produced.
pub const Q_MAX: f32 = 127.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("non-finite value {value} at ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f32 },
    #[error("data length {len} does not match {rows}x{cols}")]
    Length { rows: usize, cols: usize, len: usize },
    #[error("scale count {got} does not match column count {cols}")]
    ScaleCount { cols: usize, got: usize },
    #[error("scale for column {col} must be positive and finite, got {value}")]
    BadScale { col: usize, value: f32 },
    #[error("quantized value -128 at index {index}")]
    OutOfRange { index: usize },
    #[error("dimension mismatch: {0}")]
    Shape(String),
}

/// Row-major `f32` matrix. All values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FloatMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Length { rows, cols, len: data.len() });
        }
        check_finite(cols, &data)?;
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix without the finiteness scan; used on hot paths whose
    /// inputs are already known to be finite.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(TensorError::Shape(format!(
                "ragged rows: expected {cols} columns, found {}",
                bad.len()
            )));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }
}

/// Row-major `i8` matrix with one positive scale per column.
///
/// The real value represented at `(i, j)` is `data[i * cols + j] / scales[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i8>,
    scales: Vec<f32>,
}

impl QuantizedMatrix {
    pub fn from_parts(
        rows: usize,
        cols: usize,
        data: Vec<i8>,
        scales: Vec<f32>,
    ) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Length { rows, cols, len: data.len() });
        }
        if scales.len() != cols {
            return Err(TensorError::ScaleCount { cols, got: scales.len() });
        }
        if let Some((col, &value)) = scales
            .iter()
            .enumerate()
            .find(|(_, s)| !(s.is_finite() && **s > 0.0))
        {
            return Err(TensorError::BadScale { col, value });
        }
        if let Some(index) = data.iter().position(|&q| q == i8::MIN) {
            return Err(TensorError::OutOfRange { index });
        }
        Ok(Self { rows, cols, data, scales })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn get(&self, row: usize, col: usize) -> i8 {
        self.data[row * self.cols + col]
    }

    /// Dequantized copy of one row.
    pub fn row_f32(&self, row: usize) -> Vec<f32> {
        self.data[row * self.cols..(row + 1) * self.cols]
            .iter()
            .zip(&self.scales)
            .map(|(&q, &s)| q as f32 / s)
            .collect()
    }

    /// Column-major copy for the GEMM kernels.
    pub fn pack(&self) -> PackedQ8 {
        let mut cols = vec![0i8; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                cols[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        PackedQ8 { k: self.rows, n: self.cols, cols, scales: self.scales.clone() }
    }
}

/// A `k x n` quantized weight stored column by column, so each output column
/// is one contiguous `k`-long run of `i8`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedQ8 {
    k: usize,
    n: usize,
    cols: Vec<i8>,
    scales: Vec<f32>,
}

impl PackedQ8 {
    /// Wraps data that is already column-major (`n` runs of `k` values).
    pub fn from_columns(k: usize, n: usize, cols: Vec<i8>, scales: Vec<f32>) -> Self {
        assert_eq!(cols.len(), k * n);
        assert_eq!(scales.len(), n);
        Self { k, n, cols, scales }
    }

    pub fn inner(&self) -> usize {
        self.k
    }

    pub fn outer(&self) -> usize {
        self.n
    }

    pub fn column(&self, j: usize) -> &[i8] {
        &self.cols[j * self.k..(j + 1) * self.k]
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    /// `a (m x k) * self (k x n) + bias`, with `a` quantized per row.
    pub fn matmul(&self, a: &FloatMatrix, bias: Option<&[f32]>) -> FloatMatrix {
        assert_eq!(a.cols(), self.k, "inner dimension");
        let (qa, row_scales) = quantize_rows(a);
        let kernel = Kernel::detect();
        let m = a.rows();
        let mut out = vec![0f32; m * self.n];
        for j in 0..self.n {
            let col = self.column(j);
            let s = self.scales[j];
            let b = bias.map_or(0.0, |b| b[j]);
            for i in 0..m {
                let acc = kernel.dot(&qa[i * self.k..(i + 1) * self.k], col);
                out[i * self.n + j] = acc as f32 / (row_scales[i] * s) + b;
            }
        }
        FloatMatrix::from_raw(m, self.n, out)
    }
}

fn check_finite(cols: usize, data: &[f32]) -> Result<(), TensorError> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(idx) => Err(TensorError::NonFinite {
            row: idx / cols.max(1),
            col: idx % cols.max(1),
            value: data[idx],
        }),
    }
}

/// `127 / max|x|`, or 1 when every value is zero.
#[inline]
pub fn symmetric_scale(max_abs: f32) -> f32 {
    if max_abs == 0.0 {
        1.0
    } else {
        Q_MAX / max_abs
    }
}

/// Round half away from zero, then clamp to `[-127, 127]`.
#[inline]
pub fn quantize_value(x: f32, scale: f32) -> i8 {
    // f32 * f32 is exact in f64, so the rounding decision is made on the true product.
    let v = (x as f64 * scale as f64).round();
    v.clamp(-127.0, 127.0) as i8
}

/// Quantizes a matrix with one scale per column.
pub fn quantize(m: &FloatMatrix) -> Result<QuantizedMatrix, TensorError> {
    check_finite(m.cols, &m.data)?;
    let mut max_abs = vec![0f32; m.cols];
    for row in m.data.chunks_exact(m.cols.max(1)) {
        for (mx, v) in max_abs.iter_mut().zip(row) {
            *mx = mx.max(v.abs());
        }
    }
    let scales: Vec<f32> = max_abs.into_iter().map(symmetric_scale).collect();
    let mut data = Vec::with_capacity(m.data.len());
    for row in m.data.chunks_exact(m.cols.max(1)) {
        data.extend(row.iter().zip(&scales).map(|(&v, &s)| quantize_value(v, s)));
    }
    Ok(QuantizedMatrix { rows: m.rows, cols: m.cols, data, scales })
}

pub fn dequantize(q: &QuantizedMatrix) -> FloatMatrix {
    let mut data = Vec::with_capacity(q.data.len());
    for row in q.data.chunks_exact(q.cols.max(1)) {
        data.extend(row.iter().zip(&q.scales).map(|(&v, &s)| v as f32 / s));
    }
    FloatMatrix::from_raw(q.rows, q.cols, data)
}

/// Quantizes each row of `a` with its own scale. Returns the row-major `i8`
/// data and the per-row scales `r_i`.
pub fn quantize_rows(a: &FloatMatrix) -> (Vec<i8>, Vec<f32>) {
    let mut data = Vec::with_capacity(a.data.len());
    let mut scales = Vec::with_capacity(a.rows);
    for i in 0..a.rows {
        let row = a.row(i);
        let r = symmetric_scale(row.iter().fold(0f32, |m, v| m.max(v.abs())));
        scales.push(r);
        data.extend(row.iter().map(|&v| quantize_value(v, r)));
    }
    (data, scales)
}

/// Integer stage of the GEMM: `acc[i,j] = sum_k qa[i,k] * qb[k,j]`.
pub fn gemm_q8_accumulate(qa: &[i8], m: usize, b: &PackedQ8) -> Vec<i32> {
    gemm_q8_accumulate_with(Kernel::detect(), qa, m, b)
}

pub fn gemm_q8_accumulate_with(kernel: Kernel, qa: &[i8], m: usize, b: &PackedQ8) -> Vec<i32> {
    let k = b.k;
    assert_eq!(qa.len(), m * k, "activation length");
    let mut acc = vec![0i32; m * b.n];
    // Column-outer keeps one weight column hot while every row walks past it.
    for j in 0..b.n {
        let col = b.column(j);
        for i in 0..m {
            acc[i * b.n + j] = kernel.dot(&qa[i * k..(i + 1) * k], col);
        }
    }
    acc
}

/// `a (m x k) * b (k x n) + bias`, computed in 8-bit integer arithmetic.
pub fn gemm_q8(
    a: &FloatMatrix,
    b: &QuantizedMatrix,
    bias: Option<&[f32]>,
) -> Result<FloatMatrix, TensorError> {
    if a.cols != b.rows {
        return Err(TensorError::Shape(format!(
            "lhs is {}x{}, rhs is {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    if let Some(bias) = bias {
        if bias.len() != b.cols {
            return Err(TensorError::Shape(format!(
                "bias has {} entries, expected {}",
                bias.len(),
                b.cols
            )));
        }
    }
    check_finite(a.cols, &a.data)?;
    Ok(b.pack().matmul(a, bias))
}
