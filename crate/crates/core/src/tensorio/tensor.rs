//! `DTNS` tensor files.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size      | field                              |
//! |--------|-----------|------------------------------------|
//! | 0      | 4         | magic `DTNS`                       |
//! | 4      | 1         | version = 1                        |
//! | 5      | 1         | dtype = 1 (f32 LE)                 |
//! | 6      | 2         | reserved, zero                     |
//! | 8      | 4         | rank (u32)                         |
//! | 12     | 8 * rank  | dims (u64 each)                    |
//! | ...    | 4 * prod  | payload, row-major f32             |

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"DTNS";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DimensionMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Size of the leading dimension.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of scalars per leading-dimension row.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Flattens everything after the first dimension.
    pub fn to_matrix(&self) -> Array2<f32> {
        Array2::from_shape_vec((self.rows(), self.row_len()), self.data.clone())
            .expect("shape checked at construction")
    }

    pub fn from_matrix(m: &Array2<f32>) -> Self {
        Self {
            shape: vec![m.nrows(), m.ncols()],
            data: m.iter().copied().collect(),
        }
    }

    /// Stacks equally sized rows into a tensor of shape `[rows.len(), inner...]`.
    pub fn stack(inner: &[usize], rows: &[&[f32]]) -> Result<Self> {
        let n: usize = inner.iter().product();
        let mut data = Vec::with_capacity(n * rows.len());
        for r in rows {
            if r.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(inner);
        Self::new(shape, data)
    }
}

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format(format!("non-finite value at flat index {i}")));
    }
    let mut out = Vec::with_capacity(12 + 8 * t.shape.len() + 4 * t.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, DTYPE_F32, 0, 0]);
    out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
    for &d in &t.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let err = |m: &str| Error::Format(m.to_string());
    if bytes.len() < 12 {
        return Err(err("truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(err("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype {}", bytes[5])));
    }
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(err("reserved bytes must be zero"));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dims_end = 12usize
        .checked_add(rank.checked_mul(8).ok_or_else(|| err("rank overflow"))?)
        .ok_or_else(|| err("rank overflow"))?;
    if bytes.len() < dims_end {
        return Err(err("truncated dims"));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for chunk in bytes[12..dims_end].chunks_exact(8) {
        let d = usize::try_from(u64::from_le_bytes(chunk.try_into().unwrap()))
            .map_err(|_| err("dimension exceeds address space"))?;
        count = count.checked_mul(d).ok_or_else(|| err("element count overflow"))?;
        shape.push(d);
    }
    let payload = &bytes[dims_end..];
    if Some(payload.len()) != count.checked_mul(4) {
        return Err(Error::Format(format!(
            "payload is {} bytes, shape {:?} needs {}",
            payload.len(),
            shape,
            count.saturating_mul(4)
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor { shape, data })
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
