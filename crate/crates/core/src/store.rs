//! Binary embedding stores and parameter files.
//!
//! Embedding store layout (all integers little-endian):
//!
//! ```text
//! "RALM" | version u32 | count u64 | dim u32 | space u8
//! repeated count times: id_len u32 | id UTF-8 bytes | dim × f32
//! ```
//!
//! Parameter file layout:
//!
//! ```text
//! magic (6 bytes) | version u32 | config_len u32 | config bytes
//! param_count u32 | repeated: name_len u32 | name | rows u32 | cols u32 | rows·cols × f64
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{DenseMatrix, ParameterSet};

pub const STORE_MAGIC: &[u8; 4] = b"RALM";
pub const STORE_VERSION: u32 = 1;
pub const PARAM_FILE_VERSION: u32 = 1;

/// Which embedding space a store holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSpace {
    Universal = 0,
    Lookalike = 1,
}

impl EmbeddingSpace {
    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Self::Universal),
            1 => Some(Self::Lookalike),
            _ => None,
        }
    }
}

/// Id → vector map, read-only once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    space: EmbeddingSpace,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    vectors: DenseMatrix,
}

impl EmbeddingStore {
    pub fn new(space: EmbeddingSpace, ids: Vec<String>, vectors: DenseMatrix) -> Result<Self> {
        if ids.len() != vectors.rows() {
            return Err(Error::dim("EmbeddingStore::new", (ids.len(), 0), vectors.shape()));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Argument(format!("duplicate embedding id {id}")));
            }
        }
        Ok(Self {
            space,
            ids,
            index,
            vectors,
        })
    }

    pub fn from_rows(space: EmbeddingSpace, rows: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let (ids, vecs): (Vec<String>, Vec<Vec<f64>>) = rows.into_iter().unzip();
        let vectors = if vecs.is_empty() {
            DenseMatrix::zeros(0, 0)
        } else {
            DenseMatrix::from_rows(&vecs)?
        };
        Self::new(space, ids, vectors)
    }

    pub fn space(&self) -> EmbeddingSpace {
        self.space
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.vectors.row(i))
    }

    pub fn vectors(&self) -> &DenseMatrix {
        &self.vectors
    }

    /// Serialises to the binary layout; values are narrowed to `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let dim = self.dim();
        let mut out = Vec::with_capacity(21 + self.len() * (8 + 4 * dim));
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        out.push(self.space as u8);
        for (i, id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for &v in self.vectors.row(i) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, origin);
        if r.take(4)? != STORE_MAGIC {
            return Err(Error::format(origin, "bad magic, expected RALM"));
        }
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(Error::format(origin, format!("unsupported store version {version}")));
        }
        let count = r.u64()? as usize;
        let dim = r.u32()? as usize;
        let space = EmbeddingSpace::from_tag(r.u8()?).ok_or_else(|| Error::format(origin, "unknown space tag"))?;
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        let mut data = Vec::with_capacity(count.min(1 << 20) * dim);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(origin, "id is not UTF-8"))?;
            ids.push(id.to_string());
            for _ in 0..dim {
                data.push(f32::from_le_bytes(r.array()?) as f64);
            }
        }
        if !r.is_done() {
            return Err(Error::format(origin, "trailing bytes after last record"));
        }
        Self::new(space, ids, DenseMatrix::from_vec(count, dim, data)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_required(path)?;
        Self::from_bytes(&bytes, path)
    }
}

/// Reads a file, mapping "not found" to a dependency error naming the path.
pub fn read_required(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingDependency(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serialises a parameter set under a 6-byte magic with an opaque config blob.
pub fn params_to_bytes(magic: &[u8; 6], config: &[u8], params: &ParameterSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&PARAM_FILE_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let (rows, cols) = p.shape();
        out.extend_from_slice(&(rows as u32).to_le_bytes());
        out.extend_from_slice(&(cols as u32).to_le_bytes());
        for &v in p.value.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Inverse of [`params_to_bytes`]; returns the config blob and the parameters.
pub fn params_from_bytes(magic: &[u8; 6], bytes: &[u8], origin: &Path) -> Result<(Vec<u8>, ParameterSet)> {
    let mut r = Reader::new(bytes, origin);
    if r.take(6)? != magic {
        return Err(Error::format(
            origin,
            format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
        ));
    }
    let version = r.u32()?;
    if version != PARAM_FILE_VERSION {
        return Err(Error::format(origin, format!("unsupported version {version}")));
    }
    let config_len = r.u32()? as usize;
    let config = r.take(config_len)?.to_vec();
    let count = r.u32()?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(origin, "parameter name is not UTF-8"))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(r.array()?));
        }
        params.add(name, DenseMatrix::from_vec(rows, cols, data)?);
    }
    if !r.is_done() {
        return Err(Error::format(origin, "trailing bytes after last parameter"));
    }
    Ok((config, params))
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], origin: &'a Path) -> Self {
        Self { bytes, pos: 0, origin }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.origin, "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
