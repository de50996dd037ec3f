use std::collections::HashMap;
use std::io::BufRead;
use std::sync::Arc;

use serde::Deserialize;

use super::{EmbeddingCacheReader, Item, Similarity, SimilarityError};

/// Id-indexed dense vectors of one shared dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dimension: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f32>,
}

impl EmbeddingStore {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            ids: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
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

    pub fn insert(&mut self, id: impl Into<String>, vector: &[f32]) -> Result<(), SimilarityError> {
        let id = id.into();
        if vector.len() != self.dimension {
            return Err(SimilarityError::DimensionMismatch {
                left: self.dimension,
                right: vector.len(),
            });
        }
        if let Some(&v) = vector.iter().find(|v| !v.is_finite()) {
            return Err(SimilarityError::NonFinite { key: id, value: v as f64 });
        }
        if self.index.contains_key(&id) {
            return Err(SimilarityError::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&row| self.row(row))
    }

    pub fn require(&self, id: &str) -> Result<&[f32], SimilarityError> {
        self.get(id).ok_or_else(|| SimilarityError::UnknownId(id.to_string()))
    }

    pub(crate) fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.dimension..(row + 1) * self.dimension]
    }

    /// Reads `{"id": ..., "vector": [...]}` lines. The dimension is taken from
    /// the first record.
    pub fn from_jsonl(reader: impl BufRead) -> Result<Self, SimilarityError> {
        #[derive(Deserialize)]
        struct Row {
            id: String,
            vector: Vec<f32>,
        }
        let mut store: Option<Self> = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Row = serde_json::from_str(&line).map_err(|e| SimilarityError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            let store = store.get_or_insert_with(|| Self::new(row.vector.len()));
            store.insert(row.id, &row.vector)?;
        }
        match store {
            Some(s) if s.dimension > 0 => Ok(s),
            _ => Err(SimilarityError::EmptyCorpus),
        }
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum()
}

fn cosine_with_norms(u: &[f32], u_norm: f64, v: &[f32], v_norm: f64) -> f64 {
    (dot(u, v) / (u_norm * v_norm)).clamp(-1.0, 1.0)
}

/// Cosine similarity, accumulated in f64.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64, SimilarityError> {
    if u.len() != v.len() {
        return Err(SimilarityError::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(SimilarityError::ZeroNorm(None));
    }
    Ok(cosine_with_norms(u, nu, v, nv))
}

/// Where memorized-side vectors come from.
pub enum MemoryVectors {
    Store(Arc<EmbeddingStore>),
    /// Rows are read from disk on demand, so only the neighbors that are
    /// actually compared get loaded.
    Cache(Arc<EmbeddingCacheReader>),
}

/// Cosine similarity between externally computed embeddings.
pub struct EmbeddingCosine {
    name: String,
    query: Arc<EmbeddingStore>,
    memory: MemoryVectors,
}

impl EmbeddingCosine {
    pub fn new(name: impl Into<String>, query: Arc<EmbeddingStore>, memory: MemoryVectors) -> Result<Self, SimilarityError> {
        let memory_dim = match &memory {
            MemoryVectors::Store(s) => s.dimension(),
            MemoryVectors::Cache(c) => c.dimension(),
        };
        if memory_dim != query.dimension() {
            return Err(SimilarityError::CacheDimension {
                expected: query.dimension(),
                found: memory_dim,
            });
        }
        Ok(Self {
            name: name.into(),
            query,
            memory,
        })
    }

    /// Query and memorized vectors share one store.
    pub fn shared(name: impl Into<String>, store: Arc<EmbeddingStore>) -> Self {
        Self {
            name: name.into(),
            query: store.clone(),
            memory: MemoryVectors::Store(store),
        }
    }

    fn resolve_memory(&self, keys: &[&str]) -> Result<Vec<Vec<f32>>, SimilarityError> {
        match &self.memory {
            MemoryVectors::Store(store) => keys.iter().map(|k| store.require(k).map(<[f32]>::to_vec)).collect(),
            MemoryVectors::Cache(reader) => keys.iter().map(|k| reader.read_row(k)).collect(),
        }
    }
}

fn checked_norm(key: &str, v: &[f32]) -> Result<f64, SimilarityError> {
    let n = norm(v);
    if n == 0.0 {
        Err(SimilarityError::ZeroNorm(Some(key.to_string())))
    } else {
        Ok(n)
    }
}

impl Similarity for EmbeddingCosine {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, query: Item<'_>, memorized: Item<'_>) -> Result<f64, SimilarityError> {
        let q = self.query.require(query.key)?;
        let m = &self.resolve_memory(&[memorized.key])?[0];
        let qn = checked_norm(query.key, q)?;
        let mn = checked_norm(memorized.key, m)?;
        Ok(cosine_with_norms(q, qn, m, mn))
    }

    fn score_batch(&self, queries: &[Item<'_>], memorized: &[Item<'_>]) -> Result<Vec<f64>, SimilarityError> {
        let q_vecs: Vec<(&[f32], f64)> = queries
            .iter()
            .map(|q| {
                let v = self.query.require(q.key)?;
                Ok((v, checked_norm(q.key, v)?))
            })
            .collect::<Result<_, SimilarityError>>()?;
        let keys: Vec<&str> = memorized.iter().map(|m| m.key).collect();
        let m_vecs = self.resolve_memory(&keys)?;
        let m_norms: Vec<f64> = keys
            .iter()
            .zip(&m_vecs)
            .map(|(k, v)| checked_norm(k, v))
            .collect::<Result<_, _>>()?;
        let mut out = Vec::with_capacity(queries.len() * memorized.len());
        for (q, qn) in &q_vecs {
            for (m, mn) in m_vecs.iter().zip(&m_norms) {
                out.push(cosine_with_norms(q, *qn, m, *mn));
            }
        }
        Ok(out)
    }
}
