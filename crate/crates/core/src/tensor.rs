//! Dense row-major `f64` tensors and the BTSR binary tensor format.
//!
//! BTSR layout: magic `BTSR`, `u8` version (1), `u8` dtype (0 = f64,
//! 1 = u8), `u8` rank, `rank` little-endian `u32` extents, then the
//! row-major payload in little-endian order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::dim(format!("invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&e| e > 0), "invalid shape {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data).expect("non-empty vector")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![rows.len(), cols], data).expect("valid matrix")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::dim(format!(
                "expected a c×h×w tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Row `r` of a matrix.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn write_btsr<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write_header(w, DTYPE_F64, &self.shape)?;
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn to_btsr_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_btsr(&mut out).expect("write to Vec");
        out
    }
}

const MAGIC: &[u8; 4] = b"BTSR";
const VERSION: u8 = 1;
const DTYPE_F64: u8 = 0;
const DTYPE_U8: u8 = 1;

/// Payload of a BTSR file, kept in its stored element type.
#[derive(Clone, Debug, PartialEq)]
pub enum Btsr {
    F64(Tensor),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl Btsr {
    pub fn shape(&self) -> &[usize] {
        match self {
            Btsr::F64(t) => t.shape(),
            Btsr::U8 { shape, .. } => shape,
        }
    }

    /// Converts to floats; `u8` payloads are scaled to `[0, 1]`.
    pub fn into_tensor(self) -> Tensor {
        match self {
            Btsr::F64(t) => t,
            Btsr::U8 { shape, data } => Tensor {
                shape,
                data: data.iter().map(|&b| f64::from(b) / 255.0).collect(),
            },
        }
    }

    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        match self {
            Btsr::F64(t) => t.write_btsr(w),
            Btsr::U8 { shape, data } => {
                write_header(w, DTYPE_U8, shape)?;
                w.write_all(data)
            }
        }
    }

    /// Reads one BTSR record from `r`; `ctx` labels error messages.
    pub fn read<R: Read>(r: &mut R, ctx: &Path) -> Result<Btsr> {
        let mut head = [0u8; 7];
        read_exact(r, &mut head, ctx, "header")?;
        if &head[..4] != MAGIC {
            return Err(Error::load(ctx, "bad BTSR magic"));
        }
        if head[4] != VERSION {
            return Err(Error::load(ctx, format!("unsupported BTSR version {}", head[4])));
        }
        let dtype = head[5];
        let rank = head[6] as usize;
        if rank == 0 {
            return Err(Error::load(ctx, "BTSR rank must be at least 1"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 4];
            read_exact(r, &mut b, ctx, "extents")?;
            let e = u32::from_le_bytes(b) as usize;
            if e == 0 {
                return Err(Error::load(ctx, "zero extent in BTSR shape"));
            }
            shape.push(e);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::load(ctx, "BTSR shape overflows"))?;
        match dtype {
            DTYPE_F64 => {
                let mut buf = vec![0u8; n * 8];
                read_exact(r, &mut buf, ctx, "f64 payload")?;
                let data = buf
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Ok(Btsr::F64(Tensor { shape, data }))
            }
            DTYPE_U8 => {
                let mut data = vec![0u8; n];
                read_exact(r, &mut data, ctx, "u8 payload")?;
                Ok(Btsr::U8 { shape, data })
            }
            other => Err(Error::load(ctx, format!("unknown BTSR dtype {other}"))),
        }
    }

    pub fn read_file(path: &Path) -> Result<Btsr> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cursor = &bytes[..];
        let t = Btsr::read(&mut cursor, path)?;
        if !cursor.is_empty() {
            return Err(Error::load(path, "trailing bytes after BTSR payload"));
        }
        Ok(t)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("write to Vec");
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

fn write_header<W: Write>(w: &mut W, dtype: u8, shape: &[usize]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, dtype, shape.len() as u8])?;
    for &e in shape {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], ctx: &Path, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::load(ctx, format!("truncated BTSR {what}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![1.0]).is_err());
    }

    #[test]
    fn btsr_header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let bytes = t.to_btsr_bytes();
        assert_eq!(&bytes[..4], b"BTSR");
        assert_eq!(bytes[4..7], [1, 0, 2]);
        assert_eq!(bytes[7..11], 1u32.to_le_bytes());
        assert_eq!(bytes[11..15], 2u32.to_le_bytes());
        assert_eq!(bytes[15..23], 1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 15 + 16);
    }

    #[test]
    fn u8_payload_scales_to_unit_interval() {
        let b = Btsr::U8 {
            shape: vec![3],
            data: vec![0, 51, 255],
        };
        let mut buf = Vec::new();
        b.write(&mut buf).unwrap();
        let back = Btsr::read(&mut &buf[..], Path::new("mem")).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.into_tensor().data(), &[0.0, 0.2, 1.0]);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = Tensor::vector(vec![1.0, 2.0]).to_btsr_bytes();
        let err = Btsr::read(&mut &bytes[..bytes.len() - 1], Path::new("t.btsr")).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
