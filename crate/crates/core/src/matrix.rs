//! Dense embedding matrices and the VPEM binary format.
//!
//! Layout: ASCII magic `VPEM`, `u32` LE row count, `u32` LE dim, then
//! `rows * dim` little-endian `f32` values in row-major order.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const VPEM_MAGIC: &[u8; 4] = b"VPEM";
pub const VPEM_HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::Precondition(format!(
                "embedding matrix must be non-empty, got {rows}x{dim}"
            )));
        }
        if data.len() != rows * dim {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{dim} matrix needs {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Precondition(format!(
                "non-finite entry at row {}, col {}",
                i / dim,
                i % dim
            )));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch(format!(
                "row {r} has {} columns, expected {dim}",
                rows[r].len()
            )));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(expected_file_len(self.rows, self.dim) as usize);
        out.extend_from_slice(VPEM_MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        if bytes.len() < VPEM_HEADER_LEN {
            return Err(Error::format(
                context,
                format!(
                    "file of {} bytes is shorter than the 12-byte header",
                    bytes.len()
                ),
            ));
        }
        if &bytes[..4] != VPEM_MAGIC {
            return Err(Error::format(context, "bad magic at byte offset 0"));
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let expected = expected_file_len(rows, dim);
        if bytes.len() as u64 != expected {
            return Err(Error::format(
                context,
                format!(
                    "size mismatch: header declares {rows}x{dim} ({expected} bytes), file has {} bytes",
                    bytes.len()
                ),
            ));
        }
        if rows == 0 || dim == 0 {
            return Err(Error::format(
                context,
                format!("empty matrix {rows}x{dim} at byte offset 4"),
            ));
        }
        let mut data = Vec::with_capacity(rows * dim);
        for (i, chunk) in bytes[VPEM_HEADER_LEN..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(
                    context,
                    format!(
                        "non-finite value at byte offset {}",
                        VPEM_HEADER_LEN + 4 * i
                    ),
                ));
            }
            data.push(v);
        }
        Ok(Self { rows, dim, data })
    }
}

/// Total VPEM file size for a `rows x dim` matrix.
pub fn expected_file_len(rows: usize, dim: usize) -> u64 {
    VPEM_HEADER_LEN as u64 + rows as u64 * dim as u64 * 4
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingMatrix::from_bytes(&bytes, &format!("embeddings {}", path.display()))
}

pub fn save_embeddings(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&matrix.to_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}
