//! Okapi BM25 over lowercased whitespace tokens.
//!
//! IDF uses the `ln(1 + (N - df + 0.5) / (df + 0.5))` form, which is always
//! positive; it is still floored at zero. A document therefore scores zero
//! exactly when it shares no term with the query.

use std::collections::HashMap;

use super::{Item, Similarity, SimilarityError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.5, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), SimilarityError> {
        if !(self.k1 > 0.0 && self.k1.is_finite()) {
            return Err(SimilarityError::InvalidParams(format!("k1 must be positive, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(SimilarityError::InvalidParams(format!("b must be in [0, 1], got {}", self.b)));
        }
        Ok(())
    }
}

pub(crate) fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    params: Bm25Params,
    doc_ids: Vec<String>,
    docs: HashMap<String, usize>,
    term_counts: Vec<HashMap<String, u32>>,
    doc_lengths: Vec<u32>,
    doc_freq: HashMap<String, u32>,
    avg_length: f64,
}

impl Bm25Index {
    pub fn build<I, S, T>(corpus: I, params: Bm25Params) -> Result<Self, SimilarityError>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: AsRef<str>,
    {
        params.validate()?;
        let mut index = Self {
            params,
            doc_ids: Vec::new(),
            docs: HashMap::new(),
            term_counts: Vec::new(),
            doc_lengths: Vec::new(),
            doc_freq: HashMap::new(),
            avg_length: 0.0,
        };
        for (id, text) in corpus {
            let id = id.into();
            if index.docs.contains_key(&id) {
                return Err(SimilarityError::DuplicateId(id));
            }
            let mut counts: HashMap<String, u32> = HashMap::new();
            let mut length = 0u32;
            for token in tokenize(text.as_ref()) {
                *counts.entry(token).or_insert(0) += 1;
                length += 1;
            }
            for term in counts.keys() {
                *index.doc_freq.entry(term.clone()).or_insert(0) += 1;
            }
            index.docs.insert(id.clone(), index.doc_ids.len());
            index.doc_ids.push(id);
            index.term_counts.push(counts);
            index.doc_lengths.push(length);
        }
        if index.doc_ids.is_empty() {
            return Err(SimilarityError::EmptyCorpus);
        }
        let total: u64 = index.doc_lengths.iter().map(|&l| l as u64).sum();
        index.avg_length = total as f64 / index.doc_ids.len() as f64;
        Ok(index)
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn avg_length(&self) -> f64 {
        self.avg_length
    }

    pub fn doc_freq(&self, term: &str) -> u32 {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<u32> {
        self.docs.get(doc_id).map(|&d| self.doc_lengths[d])
    }

    pub fn term_count(&self, doc_id: &str, term: &str) -> Option<u32> {
        self.docs
            .get(doc_id)
            .map(|&d| self.term_counts[d].get(term).copied().unwrap_or(0))
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_ids.len() as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln().max(0.0)
    }

    /// Sum over query tokens (repeats included) of idf × saturated tf.
    pub fn score(&self, query: &str, doc_id: &str) -> Result<f64, SimilarityError> {
        let doc = *self
            .docs
            .get(doc_id)
            .ok_or_else(|| SimilarityError::UnknownId(doc_id.to_string()))?;
        let counts = &self.term_counts[doc];
        let length_ratio = if self.avg_length > 0.0 {
            self.doc_lengths[doc] as f64 / self.avg_length
        } else {
            0.0
        };
        let Bm25Params { k1, b } = self.params;
        let norm = k1 * (1.0 - b + b * length_ratio);
        let mut score = 0.0;
        for term in tokenize(query) {
            let tf = counts.get(&term).copied().unwrap_or(0) as f64;
            if tf == 0.0 {
                continue;
            }
            score += self.idf(&term) * tf * (k1 + 1.0) / (tf + norm);
        }
        Ok(score)
    }
}

/// BM25 as a similarity: the query item's text against the indexed document
/// whose id is the memorized item's key.
pub struct Bm25Similarity {
    name: String,
    index: Bm25Index,
}

impl Bm25Similarity {
    pub fn new(name: impl Into<String>, index: Bm25Index) -> Self {
        Self {
            name: name.into(),
            index,
        }
    }

    pub fn index(&self) -> &Bm25Index {
        &self.index
    }
}

impl Similarity for Bm25Similarity {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, query: Item<'_>, memorized: Item<'_>) -> Result<f64, SimilarityError> {
        self.index.score(query.require_text()?, memorized.key)
    }
}
