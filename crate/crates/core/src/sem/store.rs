use std::fs::File;
use std::io;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use crate::error::{KnorError, Result};
use crate::matrix::{read_header, RowAccess, ELEM_BYTES, HEADER_LEN};

pub const DEFAULT_PAGE_SIZE: usize = 4096;

/// Positional reads from a byte-addressed device. Implementations must allow
/// concurrent independent readers.
pub trait BlockDevice: Send + Sync {
    fn len(&self) -> u64;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn read_at(&self, offset: u64, buf: &mut [u8]) -> io::Result<()>;
}

#[derive(Debug)]
pub struct FileDevice {
    file: File,
    len: u64,
}

impl FileDevice {
    pub fn open(path: &Path) -> io::Result<Self> {
        let file = File::open(path)?;
        let len = file.metadata()?.len();
        Ok(Self { file, len })
    }
}

impl BlockDevice for FileDevice {
    fn len(&self) -> u64 {
        self.len
    }

    #[cfg(unix)]
    fn read_at(&self, offset: u64, buf: &mut [u8]) -> io::Result<()> {
        use std::os::unix::fs::FileExt;
        self.file.read_exact_at(buf, offset)
    }

    #[cfg(windows)]
    fn read_at(&self, mut offset: u64, mut buf: &mut [u8]) -> io::Result<()> {
        use std::os::windows::fs::FileExt;
        while !buf.is_empty() {
            match self.file.seek_read(buf, offset)? {
                0 => return Err(io::ErrorKind::UnexpectedEof.into()),
                n => {
                    buf = &mut buf[n..];
                    offset += n as u64;
                }
            }
        }
        Ok(())
    }
}

/// Row-major `f64` rows on a block device, addressed in pages of
/// `page_size` bytes measured from the start of the payload.
pub struct RowStore {
    device: Box<dyn BlockDevice>,
    path: PathBuf,
    n: usize,
    d: usize,
    page_size: usize,
    data_offset: u64,
}

impl std::fmt::Debug for RowStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RowStore")
            .field("path", &self.path)
            .field("n", &self.n)
            .field("d", &self.d)
            .field("page_size", &self.page_size)
            .field("data_offset", &self.data_offset)
            .finish()
    }
}

impl RowStore {
    /// Opens a headerless matrix file of known shape.
    pub fn open_raw(path: impl AsRef<Path>, n: usize, d: usize, page_size: usize) -> Result<Self> {
        let path = path.as_ref();
        let device = FileDevice::open(path).map_err(|source| KnorError::Io {
            path: path.to_path_buf(),
            offset: 0,
            source,
        })?;
        Self::with_device(Box::new(device), path, n, d, page_size, 0)
    }

    /// Opens a self-describing matrix file; pages start after the header.
    pub fn open_with_header(path: impl AsRef<Path>, page_size: usize) -> Result<Self> {
        let path = path.as_ref();
        let header = read_header(path)?;
        let device = FileDevice::open(path).map_err(|source| KnorError::Io {
            path: path.to_path_buf(),
            offset: 0,
            source,
        })?;
        Self::with_device(
            Box::new(device),
            path,
            header.n as usize,
            header.d as usize,
            page_size,
            HEADER_LEN as u64,
        )
    }

    pub fn with_device(
        device: Box<dyn BlockDevice>,
        path: impl AsRef<Path>,
        n: usize,
        d: usize,
        page_size: usize,
        data_offset: u64,
    ) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if n == 0 || d == 0 {
            return Err(KnorError::config("row store needs n >= 1 and d >= 1"));
        }
        if page_size == 0 {
            return Err(KnorError::config("page size must be positive"));
        }
        let expected = data_offset + (n * d * ELEM_BYTES) as u64;
        if device.len() != expected {
            return Err(KnorError::LengthMismatch {
                path,
                expected,
                actual: device.len(),
            });
        }
        Ok(Self {
            device,
            path,
            n,
            d,
            page_size,
            data_offset,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn row_bytes(&self) -> usize {
        self.d * ELEM_BYTES
    }

    pub fn payload_bytes(&self) -> u64 {
        (self.n * self.row_bytes()) as u64
    }

    pub fn page_count(&self) -> u64 {
        self.payload_bytes().div_ceil(self.page_size as u64)
    }

    /// Pages overlapping row `i`.
    pub fn pages_of_row(&self, i: usize) -> RangeInclusive<u64> {
        let w = self.row_bytes() as u64;
        let p = self.page_size as u64;
        let start = i as u64 * w;
        (start / p)..=((start + w - 1) / p)
    }

    /// Reads `count` pages starting at `first` into `buf`, which is resized to
    /// the bytes actually present (the final page may be short).
    pub(crate) fn read_pages(&self, first: u64, count: u64, buf: &mut Vec<u8>) -> Result<()> {
        let p = self.page_size as u64;
        let start = first * p;
        let end = ((first + count) * p).min(self.payload_bytes());
        buf.resize((end - start) as usize, 0);
        self.device
            .read_at(self.data_offset + start, buf)
            .map_err(|source| KnorError::ShortRead {
                page: first,
                source,
            })
    }
}

pub(crate) fn decode_into(bytes: &[u8], out: &mut [f64]) {
    for (o, c) in out.iter_mut().zip(bytes.chunks_exact(ELEM_BYTES)) {
        *o = f64::from_le_bytes(c.try_into().unwrap());
    }
}

impl RowAccess for RowStore {
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
        let w = self.row_bytes();
        let mut bytes = vec![0u8; w];
        let offset = self.data_offset + (i * w) as u64;
        self.device
            .read_at(offset, &mut bytes)
            .map_err(|source| KnorError::Io {
                path: self.path.clone(),
                offset,
                source,
            })?;
        decode_into(&bytes, out);
        Ok(())
    }

    fn for_each_row(&self, f: &mut dyn FnMut(usize, &[f64])) -> Result<()> {
        let w = self.row_bytes();
        let rows_per_chunk = ((1usize << 20) / w).max(1);
        let mut bytes = Vec::new();
        let mut row = vec![0.0; self.d];
        let mut start = 0;
        while start < self.n {
            let end = (start + rows_per_chunk).min(self.n);
            bytes.resize((end - start) * w, 0);
            let offset = self.data_offset + (start * w) as u64;
            self.device
                .read_at(offset, &mut bytes)
                .map_err(|source| KnorError::Io {
                    path: self.path.clone(),
                    offset,
                    source,
                })?;
            for (j, chunk) in bytes.chunks_exact(w).enumerate() {
                decode_into(chunk, &mut row);
                f(start + j, &row);
            }
            start = end;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{save_matrix, Layout, RowMatrix};

    #[test]
    fn page_math() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = RowMatrix::new(100, 3, (0..300).map(f64::from).collect()).unwrap();
        save_matrix(&m, &path, Layout::Raw).unwrap();
        let store = RowStore::open_raw(&path, 100, 3, 64).unwrap();
        assert_eq!(store.row_bytes(), 24);
        assert_eq!(store.pages_of_row(0), 0..=0);
        assert_eq!(store.pages_of_row(2), 0..=1); // bytes 48..72
        assert_eq!(store.page_count(), 38); // 2400 / 64 rounded up
    }

    #[test]
    fn open_validates_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        std::fs::write(&path, [0u8; 33]).unwrap();
        assert!(matches!(
            RowStore::open_raw(&path, 2, 2, 4096),
            Err(KnorError::LengthMismatch { expected: 32, actual: 33, .. })
        ));
    }

    #[test]
    fn header_file_rows_match() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.knr");
        let m = RowMatrix::new(50, 4, (0..200).map(|x| x as f64 * 0.5).collect()).unwrap();
        save_matrix(&m, &path, Layout::Header).unwrap();
        let store = RowStore::open_with_header(&path, 128).unwrap();
        let mut row = vec![0.0; 4];
        store.read_row(17, &mut row).unwrap();
        assert_eq!(row, m.row(17));
        let mut seen = 0;
        store
            .for_each_row(&mut |i, r| {
                assert_eq!(r, m.row(i));
                seen += 1;
            })
            .unwrap();
        assert_eq!(seen, 50);
        assert!(store.read_row(50, &mut row).is_err());
    }
}
