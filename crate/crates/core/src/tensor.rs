//! Dense row-major tensors in double precision.
//!
//! Tensors are immutable values once created; every operation returns a new
//! tensor. The on-disk format is a one-line ASCII header `shape: d0,d1,...`
//! followed by the raw little-endian f64 payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Dense n-dimensional array of f64 values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and matching data vector.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dimension("shape", "extents must be positive"));
        }
        if numel != data.len() {
            return Err(Error::dimension(
                "shape",
                format!("shape {:?} implies {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Writes the tensor in the header + little-endian f64 layout.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        write_shape_header(w, &self.shape)?;
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from(r: &mut impl Read, entry: &str) -> Result<Self> {
        let shape = read_shape_header(r, entry)?;
        let numel: usize = shape.iter().product();
        let mut buf = vec![0u8; numel * 8];
        r.read_exact(&mut buf)
            .map_err(|e| Error::io(entry, format!("truncated payload: {e}")))?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.write_to(&mut f)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::read_from(&mut f, &path.display().to_string())
    }
}

pub(crate) fn write_shape_header(w: &mut impl Write, shape: &[usize]) -> std::io::Result<()> {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    writeln!(w, "shape: {}", dims.join(","))
}

pub(crate) fn read_shape_header(r: &mut impl Read, entry: &str) -> Result<Vec<usize>> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)
            .map_err(|e| Error::io(entry, format!("missing header: {e}")))?;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 256 {
            return Err(Error::io(entry, "header line too long"));
        }
    }
    let line = String::from_utf8(line).map_err(|_| Error::io(entry, "header is not utf-8"))?;
    let rest = line
        .strip_prefix("shape: ")
        .ok_or_else(|| Error::io(entry, format!("bad header {line:?}")))?;
    let mut shape = Vec::new();
    for tok in rest.split(',') {
        let d: usize = tok
            .trim()
            .parse()
            .map_err(|_| Error::io(entry, format!("bad extent {tok:?}")))?;
        shape.push(d);
    }
    Ok(shape)
}

/// Byte map with the same header + payload layout as [`Tensor`], used for
/// lung masks and class-index maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ByteMap {
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl ByteMap {
    pub fn new(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dimension(
                "shape",
                format!("shape {:?} implies {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(ByteMap { shape, data })
    }

    pub fn filled(shape: &[usize], value: u8) -> Self {
        let numel = shape.iter().product();
        ByteMap {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        write_shape_header(w, &self.shape)?;
        w.write_all(&self.data)
    }

    pub fn read_from(r: &mut impl Read, entry: &str) -> Result<Self> {
        let shape = read_shape_header(r, entry)?;
        let numel: usize = shape.iter().product();
        let mut data = vec![0u8; numel];
        r.read_exact(&mut data)
            .map_err(|e| Error::io(entry, format!("truncated payload: {e}")))?;
        ByteMap::new(shape, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.write_to(&mut f)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::read_from(&mut f, &path.display().to_string())
    }
}
