//! The example memory: per-example hypothesis sets scored against their true
//! references, and nearest-neighbor retrieval over the example inputs.

mod io;

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::metrics::{pairwise_bleu, MetricError, Utility, UtilityQuery};
use crate::similarity::{Item, Similarity, SimilarityError};

pub use io::{load_memory, read_memory, save_memory, write_memory, LoadOptions, UtilityMismatch};

#[derive(Debug, thiserror::Error)]
pub enum MemoryError {
    #[error("H_cap must be at least 1")]
    InvalidCap,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("no hypothesis list for example `{0}`")]
    MissingHypotheses(String),
    #[error("empty hypothesis list for example `{0}`")]
    EmptyHypotheses(String),
    #[error("duplicate example id `{0}`")]
    DuplicateExample(String),
    #[error("utility failed on example `{example}`: {source}")]
    Utility { example: String, source: MetricError },
    #[error("memory is empty")]
    Empty,
    #[error("input similarity failed: {0}")]
    Similarity(#[from] SimilarityError),
    #[error("memory line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("not a memory file (format `{0}`)")]
    UnsupportedFormat(String),
    #[error("unsupported memory version {0}")]
    UnsupportedVersion(u32),
    #[error("memory was built with utility `{found}`, expected `{expected}`")]
    UtilityMismatch { expected: String, found: String },
    #[error("memory line {line} violates an invariant: {message}")]
    Invariant { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One input with a stable id. Image or other non-text inputs have no text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    pub text: Option<String>,
}

impl Segment {
    pub fn text(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: Some(text.into()),
        }
    }

    pub fn opaque(id: impl Into<String>) -> Self {
        Self { id: id.into(), text: None }
    }

    pub fn item(&self) -> Item<'_> {
        Item::new(&self.id, self.text.as_deref())
    }
}

/// Text equality used for deduplication and exact-match lookups: trailing
/// whitespace trimmed, then NFC.
pub fn dedup_key(text: &str) -> String {
    text.trim_end().nfc().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub hypothesis: String,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryGroup {
    pub input: Segment,
    pub entries: Vec<MemoryEntry>,
}

impl MemoryGroup {
    pub fn example_id(&self) -> &str {
        &self.input.id
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Memory {
    pub groups: Vec<MemoryGroup>,
    pub h_cap: usize,
    pub utility_id: String,
    /// Free-form notes on which similarity files accompany the memory.
    pub provenance: BTreeMap<String, String>,
}

impl Memory {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn total_entries(&self) -> usize {
        self.groups.iter().map(|g| g.entries.len()).sum()
    }

    pub fn group(&self, example_id: &str) -> Option<&MemoryGroup> {
        self.groups.iter().find(|g| g.example_id() == example_id)
    }

    /// Mean pairwise BLEU of the memorized hypothesis sets. A group with a
    /// single surviving hypothesis counts as 1, the value for identical copies.
    pub fn hypothesis_diversity(&self) -> Result<f64, MemoryError> {
        if self.groups.is_empty() {
            return Err(MemoryError::Empty);
        }
        let mut total = 0.0;
        for g in &self.groups {
            total += if g.entries.len() < 2 {
                1.0
            } else {
                let texts: Vec<&str> = g.entries.iter().map(|e| e.hypothesis.as_str()).collect();
                pairwise_bleu(&texts).map_err(|source| MemoryError::Utility {
                    example: g.example_id().to_string(),
                    source,
                })?
            };
        }
        Ok(total / self.groups.len() as f64)
    }
}

/// One row of parallel data: an input and its true reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelExample {
    pub id: String,
    pub source: Option<String>,
    pub reference: String,
}

/// Keeps the first `h_cap` hypotheses, then drops repeats (first wins).
/// Returns the surviving texts with their positions in the original list.
pub fn truncate_and_dedup(hypotheses: &[String], h_cap: usize) -> Vec<(usize, &str)> {
    let mut seen = HashSet::new();
    hypotheses
        .iter()
        .take(h_cap)
        .enumerate()
        .filter(|(_, h)| seen.insert(dedup_key(h)))
        .map(|(i, h)| (i, h.as_str()))
        .collect()
}

/// Scores every kept hypothesis of every example against its reference.
/// Examples are processed in parallel; groups keep the input order.
pub fn build_memory<U: Utility + ?Sized>(
    parallel: &[ParallelExample],
    hyp_sets: &HashMap<String, Vec<String>>,
    utility: &U,
    h_cap: usize,
) -> Result<Memory, MemoryError> {
    if h_cap == 0 {
        return Err(MemoryError::InvalidCap);
    }
    let mut ids = HashSet::new();
    for ex in parallel {
        if !ids.insert(ex.id.as_str()) {
            return Err(MemoryError::DuplicateExample(ex.id.clone()));
        }
        match hyp_sets.get(&ex.id) {
            None => return Err(MemoryError::MissingHypotheses(ex.id.clone())),
            Some(h) if h.is_empty() => return Err(MemoryError::EmptyHypotheses(ex.id.clone())),
            Some(_) => {}
        }
    }

    let groups = parallel
        .par_iter()
        .map(|ex| {
            let kept = truncate_and_dedup(&hyp_sets[&ex.id], h_cap);
            let entries = kept
                .into_iter()
                .map(|(index, hyp)| {
                    let reward = utility
                        .score(&UtilityQuery {
                            input_id: &ex.id,
                            hyp,
                            hyp_index: index,
                            reference: &ex.reference,
                            ref_index: 0,
                        })
                        .map_err(|source| MemoryError::Utility {
                            example: ex.id.clone(),
                            source,
                        })?;
                    Ok(MemoryEntry {
                        hypothesis: hyp.to_string(),
                        reward,
                    })
                })
                .collect::<Result<Vec<_>, MemoryError>>()?;
            Ok(MemoryGroup {
                input: Segment {
                    id: ex.id.clone(),
                    text: ex.source.clone(),
                },
                entries,
            })
        })
        .collect::<Result<Vec<_>, MemoryError>>()?;

    Ok(Memory {
        groups,
        h_cap,
        utility_id: utility.id().to_string(),
        provenance: BTreeMap::new(),
    })
}

#[derive(Debug, Clone)]
pub struct RetrievedGroup<'m> {
    pub group: &'m MemoryGroup,
    /// Raw input-side similarity to the query.
    pub similarity: f64,
}

/// The k nearest example groups, most similar first.
#[derive(Debug, Clone)]
pub struct RetrievedMemory<'m> {
    pub groups: Vec<RetrievedGroup<'m>>,
}

impl<'m> RetrievedMemory<'m> {
    pub fn total_entries(&self) -> usize {
        self.groups.iter().map(|g| g.group.entries.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Every group of the memory with a given similarity list, unsorted.
    pub fn from_parts(groups: Vec<RetrievedGroup<'m>>) -> Self {
        Self { groups }
    }
}

/// Ranks examples by descending s_X(query, input), ties by ascending id.
pub fn knn_retrieve<'m, S: Similarity + ?Sized>(
    query: &Segment,
    memory: &'m Memory,
    k: usize,
    s_x: &S,
) -> Result<RetrievedMemory<'m>, MemoryError> {
    if k == 0 {
        return Err(MemoryError::InvalidK);
    }
    if memory.is_empty() {
        return Err(MemoryError::Empty);
    }
    let inputs: Vec<Item> = memory.groups.iter().map(|g| g.input.item()).collect();
    let scores = s_x.score_batch(&[query.item()], &inputs)?;
    if let Some((i, &value)) = scores.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(SimilarityError::NonFinite {
            key: memory.groups[i].example_id().to_string(),
            value,
        }
        .into());
    }
    let mut order: Vec<usize> = (0..memory.groups.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then_with(|| memory.groups[a].example_id().cmp(memory.groups[b].example_id()))
    });
    order.truncate(k);
    Ok(RetrievedMemory {
        groups: order
            .into_iter()
            .map(|i| RetrievedGroup {
                group: &memory.groups[i],
                similarity: scores[i],
            })
            .collect(),
    })
}
