//! Line-delimited JSON readers for the batch files.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::decoding::{Decision, Hypothesis, Timing};
use crate::memory::{ParallelExample, Segment};

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.push(value);
    }
    Ok(out)
}

fn unique_ids<'a>(path: &Path, ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            bail!("{}: duplicate id `{id}`", path.display());
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct InputLine {
    id: String,
    #[serde(default)]
    source: Option<String>,
}

/// `{"id", "source"}`; a null source marks an opaque input.
pub fn read_inputs(path: &Path) -> Result<Vec<Segment>> {
    let lines: Vec<InputLine> = read_jsonl(path)?;
    unique_ids(path, lines.iter().map(|l| l.id.as_str()))?;
    Ok(lines.into_iter().map(|l| Segment { id: l.id, text: l.source }).collect())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum HypLine {
    Scored { text: String, logprob: f64 },
    Plain(String),
}

#[derive(Deserialize)]
struct CandidateLine {
    id: String,
    hyps: Vec<HypLine>,
    #[serde(default)]
    provenance: Option<String>,
}

pub struct Candidates {
    pub hypotheses: Vec<Hypothesis>,
    pub provenance: String,
}

/// `{"id", "hyps": [{"text", "logprob"}]}`. Bare strings get logprob 0.
pub fn read_candidates(path: &Path) -> Result<HashMap<String, Candidates>> {
    let lines: Vec<CandidateLine> = read_jsonl(path)?;
    unique_ids(path, lines.iter().map(|l| l.id.as_str()))?;
    Ok(lines
        .into_iter()
        .map(|l| {
            let hypotheses = l
                .hyps
                .into_iter()
                .map(|h| match h {
                    HypLine::Scored { text, logprob } => Hypothesis { text, logprob },
                    HypLine::Plain(text) => Hypothesis { text, logprob: 0.0 },
                })
                .collect();
            (
                l.id,
                Candidates {
                    hypotheses,
                    provenance: l.provenance.unwrap_or_default(),
                },
            )
        })
        .collect())
}

/// Hypothesis texts per id, as used for memory building.
pub fn read_hypothesis_texts(path: &Path) -> Result<HashMap<String, Vec<String>>> {
    Ok(read_candidates(path)?
        .into_iter()
        .map(|(id, c)| (id, c.hypotheses.into_iter().map(|h| h.text).collect()))
        .collect())
}

#[derive(Deserialize)]
struct PseudoRefLine {
    id: String,
    refs: Vec<String>,
}

pub fn read_pseudo_references(path: &Path) -> Result<HashMap<String, Vec<String>>> {
    let lines: Vec<PseudoRefLine> = read_jsonl(path)?;
    unique_ids(path, lines.iter().map(|l| l.id.as_str()))?;
    Ok(lines.into_iter().map(|l| (l.id, l.refs)).collect())
}

#[derive(Deserialize)]
struct ReferenceLine {
    id: String,
    #[serde(rename = "ref")]
    reference: String,
}

/// `{"id", "ref"}`.
pub fn read_references(path: &Path) -> Result<HashMap<String, String>> {
    let lines: Vec<ReferenceLine> = read_jsonl(path)?;
    unique_ids(path, lines.iter().map(|l| l.id.as_str()))?;
    Ok(lines.into_iter().map(|l| (l.id, l.reference)).collect())
}

#[derive(Deserialize)]
struct ParallelLine {
    id: String,
    #[serde(default)]
    source: Option<String>,
    #[serde(rename = "ref")]
    reference: String,
}

/// `{"id", "source", "ref"}`.
pub fn read_parallel(path: &Path) -> Result<Vec<ParallelExample>> {
    let lines: Vec<ParallelLine> = read_jsonl(path)?;
    Ok(lines
        .into_iter()
        .map(|l| ParallelExample {
            id: l.id,
            source: l.source,
            reference: l.reference,
        })
        .collect())
}

/// One line of `decode` output.
#[derive(Debug, Serialize, Deserialize)]
pub struct OutputLine {
    pub id: String,
    pub rule: String,
    pub chosen_index: usize,
    pub chosen: String,
    pub scores: std::collections::BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing_ns: Option<Timing>,
}

impl OutputLine {
    pub fn new(id: &str, rule: &str, d: Decision, timing: bool) -> Self {
        Self {
            id: id.to_string(),
            rule: rule.to_string(),
            chosen_index: d.chosen_index,
            chosen: d.chosen_text,
            scores: d.scores,
            timing_ns: timing.then_some(d.timing),
        }
    }
}
