//! Binary embedding cache.
//!
//! ```text
//! magic    8 bytes  "CBDTEMB1"
//! version  u32 LE   1
//! dim      u32 LE
//! count    u64 LE
//! ids      count × (u32 LE byte length, UTF-8 bytes)
//! rows     count × dim × f32 LE
//! ```
//!
//! Row `i` starts at `rows_offset + i * dim * 4`, so once the id table is read
//! any row can be fetched with a single seek.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::{EmbeddingStore, SimilarityError};

pub const CACHE_MAGIC: &[u8; 8] = b"CBDTEMB1";
pub const CACHE_VERSION: u32 = 1;

const HEADER_LEN: u64 = 8 + 4 + 4 + 8;

pub fn precompute_embeddings_cache(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<(), SimilarityError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CACHE_MAGIC)?;
    out.write_all(&CACHE_VERSION.to_le_bytes())?;
    out.write_all(&(store.dimension() as u32).to_le_bytes())?;
    out.write_all(&(store.len() as u64).to_le_bytes())?;
    for id in store.ids() {
        out.write_all(&(id.len() as u32).to_le_bytes())?;
        out.write_all(id.as_bytes())?;
    }
    for row in 0..store.len() {
        for v in store.row(row) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_embeddings_cache(path: impl AsRef<Path>) -> Result<EmbeddingStore, SimilarityError> {
    EmbeddingCacheReader::open(path)?.load_all()
}

/// An open cache with its id table in memory and rows left on disk.
#[derive(Debug)]
pub struct EmbeddingCacheReader {
    path: PathBuf,
    dimension: usize,
    ids: Vec<String>,
    rows: HashMap<String, usize>,
    rows_offset: u64,
    file: Mutex<File>,
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &Path, section: &'static str) -> Result<(), SimilarityError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => SimilarityError::Truncated {
            path: path.to_path_buf(),
            section,
        },
        _ => SimilarityError::Io(e),
    })
}

impl EmbeddingCacheReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, SimilarityError> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path)?;
        let file_len = file.metadata()?.len();
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, &path, "header")?;
        if &magic != CACHE_MAGIC {
            return Err(SimilarityError::BadMagic { path });
        }
        let mut b4 = [0u8; 4];
        read_exact(&mut r, &mut b4, &path, "header")?;
        let version = u32::from_le_bytes(b4);
        if version != CACHE_VERSION {
            return Err(SimilarityError::UnsupportedVersion { path, version });
        }
        read_exact(&mut r, &mut b4, &path, "header")?;
        let dimension = u32::from_le_bytes(b4) as usize;
        let mut b8 = [0u8; 8];
        read_exact(&mut r, &mut b8, &path, "header")?;
        let count = u64::from_le_bytes(b8);
        if dimension == 0 {
            return Err(SimilarityError::Corrupt {
                path,
                message: "dimension is zero".into(),
            });
        }

        let mut offset = HEADER_LEN;
        let mut ids = Vec::new();
        let mut rows = HashMap::new();
        for row in 0..count {
            read_exact(&mut r, &mut b4, &path, "id table")?;
            let len = u32::from_le_bytes(b4) as u64;
            if offset + 4 + len > file_len {
                return Err(SimilarityError::Truncated {
                    path,
                    section: "id table",
                });
            }
            let mut bytes = vec![0u8; len as usize];
            read_exact(&mut r, &mut bytes, &path, "id table")?;
            let id = String::from_utf8(bytes).map_err(|_| SimilarityError::Corrupt {
                path: path.clone(),
                message: format!("id {row} is not UTF-8"),
            })?;
            if rows.insert(id.clone(), row as usize).is_some() {
                return Err(SimilarityError::DuplicateId(id));
            }
            ids.push(id);
            offset += 4 + len;
        }

        let expected = offset + count * dimension as u64 * 4;
        if file_len < expected {
            return Err(SimilarityError::Truncated { path, section: "rows" });
        }
        if file_len > expected {
            return Err(SimilarityError::Corrupt {
                path,
                message: format!("{} trailing bytes after rows", file_len - expected),
            });
        }
        Ok(Self {
            file: Mutex::new(r.into_inner()),
            path,
            dimension,
            ids,
            rows,
            rows_offset: offset,
        })
    }

    /// Opens and checks the stored dimension.
    pub fn open_expecting(path: impl AsRef<Path>, dimension: usize) -> Result<Self, SimilarityError> {
        let reader = Self::open(path)?;
        if reader.dimension != dimension {
            return Err(SimilarityError::CacheDimension {
                expected: dimension,
                found: reader.dimension,
            });
        }
        Ok(reader)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.rows.contains_key(id)
    }

    pub fn row_offset(&self, row: usize) -> u64 {
        self.rows_offset + row as u64 * self.dimension as u64 * 4
    }

    pub fn read_row(&self, id: &str) -> Result<Vec<f32>, SimilarityError> {
        let row = *self.rows.get(id).ok_or_else(|| SimilarityError::UnknownId(id.to_string()))?;
        let mut buf = vec![0u8; self.dimension * 4];
        {
            let mut file = self.file.lock().unwrap_or_else(|p| p.into_inner());
            file.seek(SeekFrom::Start(self.row_offset(row)))?;
            read_exact(&mut *file, &mut buf, &self.path, "rows")?;
        }
        let vector: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(&v) = vector.iter().find(|v| !v.is_finite()) {
            return Err(SimilarityError::NonFinite {
                key: id.to_string(),
                value: v as f64,
            });
        }
        Ok(vector)
    }

    /// Loads only the listed ids, in the order given.
    pub fn load_subset<S: AsRef<str>>(&self, ids: &[S]) -> Result<EmbeddingStore, SimilarityError> {
        let mut store = EmbeddingStore::new(self.dimension);
        for id in ids {
            let id = id.as_ref();
            if store.get(id).is_some() {
                continue;
            }
            store.insert(id, &self.read_row(id)?)?;
        }
        Ok(store)
    }

    pub fn load_all(&self) -> Result<EmbeddingStore, SimilarityError> {
        self.load_subset(&self.ids)
    }
}
