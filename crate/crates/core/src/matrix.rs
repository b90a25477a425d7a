//! Dense row-major matrices and their on-disk format.
//!
//! A matrix file is either self-describing (a 28-byte [`MatrixHeader`]
//! followed by the payload) or raw (payload only). The payload is always
//! `n * d` little-endian `f64` values in row-major order, so row `i` lives at
//! payload bytes `[i * 8d, (i + 1) * 8d)`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{KnorError, Result};

pub const MAGIC: [u8; 4] = *b"KNRM";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;
pub const DTYPE_F64: u32 = 0;
pub const ELEM_BYTES: usize = 8;

/// An `n x d` matrix of finite `f64` values stored contiguously by row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMatrix {
    n: usize,
    d: usize,
    values: Vec<f64>,
}

impl RowMatrix {
    pub fn new(n: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(KnorError::config(format!(
                "matrix must have at least one row and column, got {n}x{d}"
            )));
        }
        if values.len() != n * d {
            return Err(KnorError::DimensionMismatch {
                expected: n * d,
                actual: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(KnorError::NonFinite {
                row: pos / d,
                col: pos % d,
            });
        }
        Ok(Self { n, d, values })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut values = Vec::with_capacity(rows.len() * d);
        for r in rows {
            let r = r.as_ref();
            if r.len() != d {
                return Err(KnorError::DimensionMismatch {
                    expected: d,
                    actual: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), d, values)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.d)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Bytes held by the value buffer.
    pub fn resident_bytes(&self) -> usize {
        self.values.capacity() * ELEM_BYTES
    }

    pub fn payload_bytes(&self) -> u64 {
        (self.n * self.d * ELEM_BYTES) as u64
    }
}

/// Sequential or random row reads from wherever a dataset lives.
pub trait RowAccess {
    fn n(&self) -> usize;
    fn d(&self) -> usize;
    /// Copies row `i` into `out` (length `d`).
    fn read_row(&self, i: usize, out: &mut [f64]) -> Result<()>;
    /// Visits every row in ascending order.
    fn for_each_row(&self, f: &mut dyn FnMut(usize, &[f64])) -> Result<()>;
}

impl RowAccess for RowMatrix {
    fn n(&self) -> usize {
        self.n
    }

    fn d(&self) -> usize {
        self.d
    }

    fn read_row(&self, i: usize, out: &mut [f64]) -> Result<()> {
        if i >= self.n {
            return Err(KnorError::RowOutOfRange { row: i, n: self.n });
        }
        out.copy_from_slice(self.row(i));
        Ok(())
    }

    fn for_each_row(&self, f: &mut dyn FnMut(usize, &[f64])) -> Result<()> {
        for (i, r) in self.rows().enumerate() {
            f(i, r);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixHeader {
    pub magic: [u8; 4],
    pub version: u32,
    pub n: u64,
    pub d: u64,
    pub dtype: u32,
}

impl MatrixHeader {
    pub fn for_shape(n: usize, d: usize) -> Self {
        Self {
            magic: MAGIC,
            version: FORMAT_VERSION,
            n: n as u64,
            d: d as u64,
            dtype: DTYPE_F64,
        }
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&self.magic);
        out[4..8].copy_from_slice(&self.version.to_le_bytes());
        out[8..16].copy_from_slice(&self.n.to_le_bytes());
        out[16..24].copy_from_slice(&self.d.to_le_bytes());
        out[24..28].copy_from_slice(&self.dtype.to_le_bytes());
        out
    }

    /// Parses and validates a header. `path` is only used for error context.
    pub fn parse(bytes: &[u8; HEADER_LEN], path: &Path) -> Result<Self> {
        let le_u32 = |r: std::ops::Range<usize>| u32::from_le_bytes(bytes[r].try_into().unwrap());
        let le_u64 = |r: std::ops::Range<usize>| u64::from_le_bytes(bytes[r].try_into().unwrap());
        let header = Self {
            magic: bytes[0..4].try_into().unwrap(),
            version: le_u32(4..8),
            n: le_u64(8..16),
            d: le_u64(16..24),
            dtype: le_u32(24..28),
        };
        if header.magic != MAGIC {
            return Err(KnorError::MagicMismatch {
                path: path.to_path_buf(),
                expected: MAGIC,
                found: header.magic,
            });
        }
        if header.version != FORMAT_VERSION {
            return Err(KnorError::UnsupportedVersion(header.version));
        }
        if header.dtype != DTYPE_F64 {
            return Err(KnorError::UnknownDtype(header.dtype));
        }
        Ok(header)
    }

    pub fn payload_bytes(&self) -> u64 {
        self.n * self.d * ELEM_BYTES as u64
    }
}

/// On-disk layout of a matrix file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// 28-byte header followed by the payload.
    Header,
    /// Payload only; the shape must be supplied by the reader.
    Raw,
}

pub fn save_matrix(m: &RowMatrix, path: impl AsRef<Path>, layout: Layout) -> Result<()> {
    let path = path.as_ref();
    let io_err = |offset: u64| {
        let path = path.to_path_buf();
        move |source| KnorError::Io {
            path,
            offset,
            source,
        }
    };
    let file = File::create(path).map_err(io_err(0))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    let mut offset = 0u64;
    if layout == Layout::Header {
        w.write_all(&MatrixHeader::for_shape(m.n, m.d).to_bytes())
            .map_err(io_err(0))?;
        offset = HEADER_LEN as u64;
    }
    let mut buf = Vec::with_capacity(64 * 1024);
    for chunk in m.values.chunks(8 * 1024) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io_err(offset))?;
        offset += buf.len() as u64;
    }
    w.flush().map_err(io_err(offset))?;
    Ok(())
}

/// Reads only the header of a self-describing matrix file.
pub fn read_header(path: impl AsRef<Path>) -> Result<MatrixHeader> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|source| KnorError::Io {
        path: path.to_path_buf(),
        offset: 0,
        source,
    })?;
    let actual = file.metadata().map(|m| m.len()).unwrap_or(0);
    if actual < HEADER_LEN as u64 {
        return Err(KnorError::LengthMismatch {
            path: path.to_path_buf(),
            expected: HEADER_LEN as u64,
            actual,
        });
    }
    let mut bytes = [0u8; HEADER_LEN];
    file.read_exact(&mut bytes).map_err(|source| KnorError::Io {
        path: path.to_path_buf(),
        offset: 0,
        source,
    })?;
    MatrixHeader::parse(&bytes, path)
}

/// Loads a matrix. Raw files need `shape = Some((n, d))`; for header files a
/// supplied shape must agree with the header.
pub fn load_matrix(
    path: impl AsRef<Path>,
    layout: Layout,
    shape: Option<(usize, usize)>,
) -> Result<RowMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| KnorError::Io {
        path: path.to_path_buf(),
        offset: 0,
        source,
    })?;

    let (n, d, payload) = match layout {
        Layout::Raw => {
            let (n, d) = shape.ok_or_else(|| {
                KnorError::config("raw matrix files require explicit row and column counts")
            })?;
            (n, d, &bytes[..])
        }
        Layout::Header => {
            if bytes.len() < HEADER_LEN {
                return Err(KnorError::LengthMismatch {
                    path: path.to_path_buf(),
                    expected: HEADER_LEN as u64,
                    actual: bytes.len() as u64,
                });
            }
            let header = MatrixHeader::parse(bytes[..HEADER_LEN].try_into().unwrap(), path)?;
            let (n, d) = (header.n as usize, header.d as usize);
            if let Some((sn, sd)) = shape {
                if (sn, sd) != (n, d) {
                    return Err(KnorError::config(format!(
                        "header shape {n}x{d} disagrees with requested {sn}x{sd}"
                    )));
                }
            }
            (n, d, &bytes[HEADER_LEN..])
        }
    };

    let expected = (n as u64)
        .checked_mul(d as u64)
        .and_then(|e| e.checked_mul(ELEM_BYTES as u64))
        .ok_or_else(|| KnorError::config(format!("shape {n}x{d} overflows")))?;
    let prefix = (bytes.len() - payload.len()) as u64;
    if payload.len() as u64 != expected {
        return Err(KnorError::LengthMismatch {
            path: path.to_path_buf(),
            expected: expected + prefix,
            actual: bytes.len() as u64,
        });
    }

    let values: Vec<f64> = payload
        .chunks_exact(ELEM_BYTES)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    RowMatrix::new(n, d, values)
}
