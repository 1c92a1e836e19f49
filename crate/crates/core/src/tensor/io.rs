//! Little-endian binary layout for weight tensors.
//!
//! Quantized matrix: `rows u32 | cols u32 | scales f32 x cols | data i8 x rows*cols`.
//! Float vector: `len u32 | values f32 x len`.

use std::io::{self, Write};

use super::{QuantizedMatrix, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ReadError {
    #[error("unexpected end of data: needed {needed} bytes, {remaining} remaining")]
    Truncated { needed: usize, remaining: usize },
    #[error(transparent)]
    Invalid(#[from] TensorError),
}

pub fn write_quantized<W: Write>(w: &mut W, m: &QuantizedMatrix) -> io::Result<()> {
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    for s in m.scales() {
        w.write_all(&s.to_le_bytes())?;
    }
    let bytes: Vec<u8> = m.data().iter().map(|&q| q as u8).collect();
    w.write_all(&bytes)
}

pub fn write_f32_vec<W: Write>(w: &mut W, v: &[f32]) -> io::Result<()> {
    w.write_all(&(v.len() as u32).to_le_bytes())?;
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8], ReadError> {
    if buf.len() < n {
        return Err(ReadError::Truncated { needed: n, remaining: buf.len() });
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

pub(crate) fn read_u32(buf: &mut &[u8]) -> Result<u32, ReadError> {
    let b = take(buf, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_f32s(buf: &mut &[u8], n: usize) -> Result<Vec<f32>, ReadError> {
    let bytes = take(buf, n.saturating_mul(4))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Reads one quantized matrix and advances `buf` past it.
pub fn read_quantized(buf: &mut &[u8]) -> Result<QuantizedMatrix, ReadError> {
    let rows = read_u32(buf)? as usize;
    let cols = read_u32(buf)? as usize;
    let scales = read_f32s(buf, cols)?;
    let data = take(buf, rows.saturating_mul(cols))?
        .iter()
        .map(|&b| b as i8)
        .collect();
    Ok(QuantizedMatrix::from_parts(rows, cols, data, scales)?)
}

pub fn read_f32_vec(buf: &mut &[u8]) -> Result<Vec<f32>, ReadError> {
    let n = read_u32(buf)? as usize;
    read_f32s(buf, n)
}
