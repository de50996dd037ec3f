//! Precomputed scores from metrics evaluated outside this crate.
//!
//! File layout (JSON lines):
//!
//! ```text
//! {"keying": "text", "metric": "comet"}
//! {"input_id": "7", "hyp": "a cat", "ref": "the cat", "score": 0.81}
//! ```
//!
//! With `"keying": "index"` the `hyp`/`ref` fields are positional indices into
//! the candidate and pseudo-reference lists. `ref` may be omitted or null for
//! reference-free (quality estimation) scores. `metric` is optional.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{MetricError, Utility, UtilityQuery, UtilityScore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Keying {
    Text,
    Index,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum KeyPart {
    Text(String),
    Index(usize),
}

impl fmt::Display for KeyPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyPart::Text(t) => write!(f, "{t:?}"),
            KeyPart::Index(i) => write!(f, "#{i}"),
        }
    }
}

impl KeyPart {
    fn to_json(&self) -> Value {
        match self {
            KeyPart::Text(t) => Value::String(t.clone()),
            KeyPart::Index(i) => Value::from(*i),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ScoreKey {
    pub input_id: String,
    pub hyp: KeyPart,
    pub reference: Option<KeyPart>,
}

impl fmt::Display for ScoreKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(input_id={:?}, hyp={}", self.input_id, self.hyp)?;
        match &self.reference {
            Some(r) => write!(f, ", ref={r})"),
            None => write!(f, ", ref=none)"),
        }
    }
}

#[derive(Deserialize)]
struct Header {
    keying: Keying,
    #[serde(default)]
    metric: Option<String>,
}

#[derive(Deserialize)]
struct Record {
    input_id: String,
    hyp: Value,
    #[serde(default, rename = "ref")]
    reference: Option<Value>,
    score: f64,
}

#[derive(Debug, Clone)]
pub struct ScoreTable {
    keying: Keying,
    metric: String,
    scores: HashMap<ScoreKey, f64>,
}

impl ScoreTable {
    pub fn new(keying: Keying, metric: impl Into<String>) -> Self {
        Self {
            keying,
            metric: metric.into(),
            scores: HashMap::new(),
        }
    }

    pub fn keying(&self) -> Keying {
        self.keying
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn insert(&mut self, key: ScoreKey, score: f64) {
        self.scores.insert(key, score);
    }

    pub fn get(&self, key: &ScoreKey) -> Result<f64, MetricError> {
        self.scores
            .get(key)
            .copied()
            .ok_or_else(|| MetricError::MissingKey(key.clone()))
    }

    fn part(&self, text: &str, index: usize) -> KeyPart {
        match self.keying {
            Keying::Text => KeyPart::Text(text.to_string()),
            Keying::Index => KeyPart::Index(index),
        }
    }

    /// Reference-free score for one hypothesis (quality estimation).
    pub fn qe_score(&self, input_id: &str, hyp: &str, hyp_index: usize) -> Result<f64, MetricError> {
        self.get(&ScoreKey {
            input_id: input_id.to_string(),
            hyp: self.part(hyp, hyp_index),
            reference: None,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MetricError> {
        let path = path.as_ref();
        let mut table = Self::from_reader(BufReader::new(File::open(path)?))?;
        if table.metric.is_empty() {
            table.metric = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "table".into());
        }
        Ok(table)
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self, MetricError> {
        let mut lines = reader.lines().enumerate().filter_map(|(i, l)| match l {
            Ok(l) if l.trim().is_empty() => None,
            other => Some((i + 1, other)),
        });
        let (line, header) = lines.next().ok_or(MetricError::Parse {
            line: 1,
            message: "missing {\"keying\": ...} header".into(),
        })?;
        let header: Header = serde_json::from_str(&header?).map_err(|e| MetricError::Parse {
            line,
            message: format!("bad header: {e}"),
        })?;
        let mut table = Self::new(header.keying, header.metric.unwrap_or_default());

        for (line, text) in lines {
            let record: Record = serde_json::from_str(&text?).map_err(|e| MetricError::Parse {
                line,
                message: e.to_string(),
            })?;
            if !record.score.is_finite() {
                return Err(MetricError::Parse {
                    line,
                    message: "score must be finite".into(),
                });
            }
            let hyp = table.parse_part(&record.hyp).map_err(|message| MetricError::Parse { line, message })?;
            let reference = match record.reference {
                None | Some(Value::Null) => None,
                Some(v) => Some(table.parse_part(&v).map_err(|message| MetricError::Parse { line, message })?),
            };
            table.insert(
                ScoreKey {
                    input_id: record.input_id,
                    hyp,
                    reference,
                },
                record.score,
            );
        }
        Ok(table)
    }

    fn parse_part(&self, value: &Value) -> Result<KeyPart, String> {
        match (self.keying, value) {
            (Keying::Text, Value::String(s)) => Ok(KeyPart::Text(s.clone())),
            (Keying::Index, Value::Number(n)) => n
                .as_u64()
                .map(|i| KeyPart::Index(i as usize))
                .ok_or_else(|| format!("index must be a non-negative integer, got {n}")),
            (keying, other) => Err(format!("{other} does not match {keying:?} keying")),
        }
    }

    /// Writes the table with records sorted, so equal tables give equal files.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), MetricError> {
        let mut out = BufWriter::new(File::create(path)?);
        let header = serde_json::json!({"keying": self.keying, "metric": self.metric});
        writeln!(out, "{header}")?;
        let mut rows: Vec<String> = self
            .scores
            .iter()
            .map(|(key, score)| {
                let mut record = serde_json::json!({
                    "input_id": key.input_id,
                    "hyp": key.hyp.to_json(),
                    "score": score,
                });
                if let Some(r) = &key.reference {
                    record["ref"] = r.to_json();
                }
                record.to_string()
            })
            .collect();
        rows.sort();
        for row in rows {
            writeln!(out, "{row}")?;
        }
        out.flush()?;
        Ok(())
    }
}

impl Utility for ScoreTable {
    fn id(&self) -> &str {
        &self.metric
    }

    fn score(&self, query: &UtilityQuery<'_>) -> Result<UtilityScore, MetricError> {
        self.get(&ScoreKey {
            input_id: query.input_id.to_string(),
            hyp: self.part(query.hyp, query.hyp_index),
            reference: Some(self.part(query.reference, query.ref_index)),
        })
    }
}
