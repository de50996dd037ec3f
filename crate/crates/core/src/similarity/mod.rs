//! Input-side and output-side similarity functions and their normalization.
//!
//! A [`Similarity`] compares a query item (the current input, or one of the
//! current hypotheses) with a memorized item. Items are addressed by key so
//! that precomputed representations can be looked up without the text:
//! inputs use their segment id, hypotheses use `"<id>:<index>"` (see
//! [`hypothesis_key`]).

mod bm25;
mod cache;
mod embedding;
mod table;

use std::path::PathBuf;

pub use bm25::{Bm25Index, Bm25Params, Bm25Similarity};
pub use cache::{load_embeddings_cache, precompute_embeddings_cache, EmbeddingCacheReader, CACHE_MAGIC, CACHE_VERSION};
pub use embedding::{cosine, EmbeddingCosine, EmbeddingStore, MemoryVectors};
pub use table::SimilarityTable;

#[derive(Debug, thiserror::Error)]
pub enum SimilarityError {
    #[error("vector dimensions differ: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero-norm vector{}", fmt_key(.0))]
    ZeroNorm(Option<String>),
    #[error("no vector or document for id `{0}`")]
    UnknownId(String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("text similarity needs text, but `{0}` is an opaque input")]
    MissingText(String),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("cannot normalize an empty score list")]
    EmptyScores,
    #[error("non-finite value {value} for `{key}`")]
    NonFinite { key: String, value: f64 },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid BM25 parameters: {0}")]
    InvalidParams(String),
    #[error("{path}: not an embedding cache (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported cache version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{path}: truncated cache ({section})")]
    Truncated { path: PathBuf, section: &'static str },
    #[error("cache dimension {found} disagrees with expected {expected}")]
    CacheDimension { expected: usize, found: usize },
    #[error("{path}: corrupt cache: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fmt_key(key: &Option<String>) -> String {
    key.as_ref().map(|k| format!(" for `{k}`")).unwrap_or_default()
}

/// Key of the hypothesis at `index` in the list owned by `owner_id`.
pub fn hypothesis_key(owner_id: &str, index: usize) -> String {
    format!("{owner_id}:{index}")
}

/// Something that can be compared: a key for precomputed representations and,
/// when the item is textual, its text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Item<'a> {
    pub key: &'a str,
    pub text: Option<&'a str>,
}

impl<'a> Item<'a> {
    pub fn new(key: &'a str, text: Option<&'a str>) -> Self {
        Self { key, text }
    }

    pub fn text(key: &'a str, text: &'a str) -> Self {
        Self { key, text: Some(text) }
    }

    pub(crate) fn require_text(&self) -> Result<&'a str, SimilarityError> {
        self.text.ok_or_else(|| SimilarityError::MissingText(self.key.to_string()))
    }
}

/// A raw similarity function s(q, m) with arbitrary real range.
pub trait Similarity: Send + Sync {
    fn name(&self) -> &str;

    fn score(&self, query: Item<'_>, memorized: Item<'_>) -> Result<f64, SimilarityError>;

    /// Row-major `queries.len() × memorized.len()` scores. Implementations
    /// may resolve representations once per item but must agree with
    /// [`Similarity::score`].
    fn score_batch(&self, queries: &[Item<'_>], memorized: &[Item<'_>]) -> Result<Vec<f64>, SimilarityError> {
        let mut out = Vec::with_capacity(queries.len() * memorized.len());
        for q in queries {
            for m in memorized {
                out.push(self.score(*q, *m)?);
            }
        }
        Ok(out)
    }
}

impl<S: Similarity + ?Sized> Similarity for Box<S> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn score(&self, query: Item<'_>, memorized: Item<'_>) -> Result<f64, SimilarityError> {
        (**self).score(query, memorized)
    }
    fn score_batch(&self, queries: &[Item<'_>], memorized: &[Item<'_>]) -> Result<Vec<f64>, SimilarityError> {
        (**self).score_batch(queries, memorized)
    }
}

impl<S: Similarity + ?Sized> Similarity for std::sync::Arc<S> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn score(&self, query: Item<'_>, memorized: Item<'_>) -> Result<f64, SimilarityError> {
        (**self).score(query, memorized)
    }
    fn score_batch(&self, queries: &[Item<'_>], memorized: &[Item<'_>]) -> Result<Vec<f64>, SimilarityError> {
        (**self).score_batch(queries, memorized)
    }
}

impl<S: Similarity + ?Sized> Similarity for &S {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn score(&self, query: Item<'_>, memorized: Item<'_>) -> Result<f64, SimilarityError> {
        (**self).score(query, memorized)
    }
    fn score_batch(&self, queries: &[Item<'_>], memorized: &[Item<'_>]) -> Result<Vec<f64>, SimilarityError> {
        (**self).score_batch(queries, memorized)
    }
}

/// Normalized similarity weights over a list of candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityWeights {
    pub weights: Vec<f64>,
    pub temperature: f64,
}

/// Softmax of `scores / temperature`, shifted by the maximum for stability.
pub fn tempered_normalize(scores: &[f64], temperature: f64) -> Result<SimilarityWeights, SimilarityError> {
    check_temperature(temperature)?;
    if scores.is_empty() {
        return Err(SimilarityError::EmptyScores);
    }
    if let Some((i, &v)) = scores.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(SimilarityError::NonFinite {
            key: format!("score[{i}]"),
            value: v,
        });
    }
    let mut weights = scores.to_vec();
    softmax_in_place(&mut weights, temperature);
    Ok(SimilarityWeights { weights, temperature })
}

pub(crate) fn check_temperature(temperature: f64) -> Result<(), SimilarityError> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(SimilarityError::NonPositiveTemperature(temperature))
    }
}

/// Caller guarantees a nonempty finite slice and a valid temperature.
pub(crate) fn softmax_in_place(values: &mut [f64], temperature: f64) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
}
