//! Binary file formats.
//!
//! Embedding store (`.temb`): magic `TEMB`, then little-endian `u32` version,
//! `u32` count, `u32` dim, followed by `count * dim` row-major `f32` values.
//! Row ids live in a sidecar `.ids` file, one id per line, row-aligned.

use std::io::Write;
use std::path::{Path, PathBuf};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"TEMB";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad magic, expected {expected:?}")]
    Magic { path: PathBuf, expected: String },
    #[error("{path}: unsupported version {version}")]
    Version { path: PathBuf, version: u32 },
    #[error("{path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("{0}")]
    Invalid(String),
}

pub(crate) fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Sidecar id path for an embedding store: same stem, `.ids` extension.
pub fn ids_path(store: &Path) -> PathBuf {
    store.with_extension("ids")
}

/// Row-major `f32` matrix with one id per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingStore {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self, StoreError> {
        if data.len() != ids.len() * dim {
            return Err(StoreError::Invalid(format!(
                "{} ids x dim {dim} != {} values",
                ids.len(),
                data.len()
            )));
        }
        if ids.iter().any(|id| id.contains('\n')) {
            return Err(StoreError::Invalid("ids must not contain newlines".into()));
        }
        Ok(Self { ids, dim, data })
    }

    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f32>]) -> Result<Self, StoreError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.len() != ids.len() || rows.iter().any(|r| r.len() != dim) {
            return Err(StoreError::Invalid("ragged rows".into()));
        }
        Self::new(ids, dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn write(&self, path: &Path) -> Result<(), StoreError> {
        let mut buf = Vec::with_capacity(16 + self.data.len() * 4);
        buf.extend_from_slice(EMBEDDING_MAGIC);
        buf.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        write_file(path, &buf)?;
        let mut ids = String::new();
        for id in &self.ids {
            ids.push_str(id);
            ids.push('\n');
        }
        write_file(&ids_path(path), ids.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self, StoreError> {
        let bytes = std::fs::read(path).map_err(io_at(path))?;
        let mut r = ByteReader::new(&bytes, path);
        r.magic(EMBEDDING_MAGIC)?;
        let version = r.u32()?;
        if version != EMBEDDING_VERSION {
            return Err(StoreError::Version {
                path: path.to_path_buf(),
                version,
            });
        }
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let data = r.f32s(count * dim)?;
        r.end()?;
        let ids_file = ids_path(path);
        let text = std::fs::read_to_string(&ids_file).map_err(io_at(&ids_file))?;
        let ids: Vec<String> = text.lines().map(str::to_string).collect();
        if ids.len() != count {
            return Err(StoreError::Corrupt {
                path: ids_file,
                reason: format!("{} ids for {count} rows", ids.len()),
            });
        }
        Self::new(ids, dim, data)
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_at(dir))?;
    }
    let mut f = std::fs::File::create(path).map_err(io_at(path))?;
    f.write_all(bytes).map_err(io_at(path))?;
    f.flush().map_err(io_at(path))
}

/// Cursor over a little-endian byte buffer with path-tagged errors.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn corrupt(&self, reason: impl Into<String>) -> StoreError {
        StoreError::Corrupt {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<(), StoreError> {
        if self.take(4).ok() != Some(&expected[..]) {
            return Err(StoreError::Magic {
                path: self.path.to_path_buf(),
                expected: String::from_utf8_lossy(expected).into_owned(),
            });
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>, StoreError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.corrupt("size overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn string(&mut self, len: usize) -> Result<String, StoreError> {
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.corrupt("invalid UTF-8"))
    }

    pub(crate) fn end(&self) -> Result<(), StoreError> {
        if self.pos != self.bytes.len() {
            return Err(self.corrupt(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}
