//! Precomputed similarity scores.
//!
//! ```text
//! {"format": "cbdt-sim", "version": 1, "name": "dinov2"}
//! {"query": "img-17", "memorized": "train-4", "score": 0.83}
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;

use super::{Item, Similarity, SimilarityError};

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    #[serde(default)]
    name: Option<String>,
}

#[derive(Deserialize)]
struct Record {
    query: String,
    memorized: String,
    score: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SimilarityTable {
    name: String,
    scores: HashMap<(String, String), f64>,
}

impl SimilarityTable {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            scores: HashMap::new(),
        }
    }

    pub fn insert(&mut self, query: impl Into<String>, memorized: impl Into<String>, score: f64) {
        self.scores.insert((query.into(), memorized.into()), score);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimilarityError> {
        Self::from_reader(BufReader::new(File::open(path)?))
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self, SimilarityError> {
        let mut table = Self::new("table");
        let mut seen_header = false;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |e: serde_json::Error| SimilarityError::Parse {
                line: i + 1,
                message: e.to_string(),
            };
            if !seen_header {
                let header: Header = serde_json::from_str(&line).map_err(parse_err)?;
                if header.format != "cbdt-sim" || header.version != 1 {
                    return Err(SimilarityError::Parse {
                        line: i + 1,
                        message: format!("expected cbdt-sim version 1, got {} version {}", header.format, header.version),
                    });
                }
                if let Some(name) = header.name {
                    table.name = name;
                }
                seen_header = true;
                continue;
            }
            let record: Record = serde_json::from_str(&line).map_err(parse_err)?;
            if !record.score.is_finite() {
                return Err(SimilarityError::NonFinite {
                    key: format!("{}/{}", record.query, record.memorized),
                    value: record.score,
                });
            }
            table.insert(record.query, record.memorized, record.score);
        }
        if !seen_header {
            return Err(SimilarityError::Parse {
                line: 1,
                message: "missing cbdt-sim header".into(),
            });
        }
        Ok(table)
    }
}

impl Similarity for SimilarityTable {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, query: Item<'_>, memorized: Item<'_>) -> Result<f64, SimilarityError> {
        self.scores
            .get(&(query.key.to_string(), memorized.key.to_string()))
            .copied()
            .ok_or_else(|| SimilarityError::UnknownId(format!("{} -> {}", query.key, memorized.key)))
    }
}
