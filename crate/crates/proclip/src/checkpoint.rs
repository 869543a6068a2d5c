//! Parameter checkpoint files.
//!
//! Layout: magic bytes `PCLP`, format version `u32` little-endian, then one
//! record per tensor: name length `u32`, UTF-8 name, rank `u32`, dims as
//! `u64` each, and the row-major payload as little-endian `f64`. Round trips
//! are bit-exact; any truncation or corruption reports the byte offset.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::embedding::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::models::{Activation, LinearLayer, MlpProjector, PROJECTOR_DEPTH};

pub const PCLP_MAGIC: [u8; 4] = *b"PCLP";
pub const PCLP_VERSION: u32 = 1;

/// A named tensor as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

impl TensorRecord {
    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn matrix(name: impl Into<String>, m: &EmbeddingBatch) -> Self {
        Self {
            name: name.into(),
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: m.data().to_vec(),
        }
    }

    pub fn vector(name: impl Into<String>, v: &[f64]) -> Self {
        Self {
            name: name.into(),
            dims: vec![v.len() as u64],
            data: v.to_vec(),
        }
    }
}

pub fn write_checkpoint(path: &Path, tensors: &[TensorRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&PCLP_MAGIC)?;
    w.write_all(&PCLP_VERSION.to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
        for &d in &t.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        let expected: u64 = t.dims.iter().product();
        debug_assert_eq!(expected as usize, t.data.len());
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Tracks the read position so parse errors can name the failing offset.
pub(crate) struct OffsetReader<R> {
    pub(crate) inner: R,
    pub(crate) offset: u64,
}

impl<R: Read> OffsetReader<R> {
    pub(crate) fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| Error::Parse {
            offset: at,
            message: format!("reading {what}: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub(crate) fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    pub(crate) fn read_u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact_at(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    pub(crate) fn read_f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact_at(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }

    /// Returns false cleanly at end of stream, errors on a partial read.
    pub(crate) fn at_eof(&mut self) -> Result<Option<u8>> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(None),
            Ok(_) => {
                self.offset += 1;
                Ok(Some(b[0]))
            }
            Err(e) => Err(Error::Io(e)),
        }
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<TensorRecord>> {
    let mut r = OffsetReader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "magic")?;
    if magic != PCLP_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {magic:?}, expected PCLP"),
        });
    }
    let version = r.read_u32("version")?;
    if version != PCLP_VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }

    let mut tensors = Vec::new();
    loop {
        // Peek one byte to distinguish clean EOF from a truncated record.
        let first = match r.at_eof()? {
            None => break,
            Some(b) => b,
        };
        let name_len_offset = r.offset - 1;
        let mut rest = [0u8; 3];
        r.read_exact_at(&mut rest, "tensor name length")?;
        let name_len = u32::from_le_bytes([first, rest[0], rest[1], rest[2]]) as usize;

        let mut name_bytes = vec![0u8; name_len];
        r.read_exact_at(&mut name_bytes, "tensor name")?;
        let name = String::from_utf8(name_bytes).map_err(|e| Error::Parse {
            offset: name_len_offset + 4,
            message: format!("tensor name is not UTF-8: {e}"),
        })?;

        let rank = r.read_u32("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.read_u64("tensor dim")?);
        }
        let count: u64 = dims.iter().product();
        let mut data = Vec::with_capacity(count as usize);
        for _ in 0..count {
            data.push(r.read_f64("tensor data")?);
        }
        tensors.push(TensorRecord { name, dims, data });
    }
    Ok(tensors)
}

/// Serializes a projector's layers as `{prefix}.layer{i}.weight` /
/// `{prefix}.layer{i}.bias` records.
pub fn projector_to_tensors(prefix: &str, net: &MlpProjector) -> Vec<TensorRecord> {
    let mut out = Vec::with_capacity(PROJECTOR_DEPTH * 2);
    for (i, layer) in net.layers().iter().enumerate() {
        out.push(TensorRecord::matrix(
            format!("{prefix}.layer{i}.weight"),
            &layer.weight,
        ));
        out.push(TensorRecord::vector(
            format!("{prefix}.layer{i}.bias"),
            &layer.bias,
        ));
    }
    out
}

/// Rebuilds a projector from records written by [`projector_to_tensors`].
pub fn projector_from_tensors(
    prefix: &str,
    tensors: &[TensorRecord],
    activation: Activation,
) -> Result<MlpProjector> {
    let find = |name: String| -> Result<&TensorRecord> {
        tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::InvalidConfig(format!("checkpoint missing tensor {name}")))
    };
    let mut layers = Vec::with_capacity(PROJECTOR_DEPTH);
    for i in 0..PROJECTOR_DEPTH {
        let w = find(format!("{prefix}.layer{i}.weight"))?;
        if w.dims.len() != 2 {
            return Err(Error::InvalidConfig(format!(
                "tensor {} must have rank 2",
                w.name
            )));
        }
        let b = find(format!("{prefix}.layer{i}.bias"))?;
        let weight = EmbeddingBatch::new(w.dims[0] as usize, w.dims[1] as usize, w.data.clone())?;
        layers.push(LinearLayer::new(weight, b.data.clone())?);
    }
    MlpProjector::new(layers, activation)
}

/// True if any tensor name starts with `{prefix}.`.
pub fn has_prefix(tensors: &[TensorRecord], prefix: &str) -> bool {
    let dotted = format!("{prefix}.");
    tensors.iter().any(|t| t.name.starts_with(&dotted))
}

/// Finds a scalar record by name.
pub fn find_scalar(tensors: &[TensorRecord], name: &str) -> Result<f64> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .and_then(|t| t.data.first().copied())
        .ok_or_else(|| Error::InvalidConfig(format!("checkpoint missing scalar {name}")))
}
