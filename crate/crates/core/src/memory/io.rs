//! Memory persistence as JSON lines.
//!
//! ```text
//! {"format":"cbdt-mem","version":1,"H_cap":256,"utility":"chrf"}
//! {"id":"12","input":"Wie wirkt das?","entries":[{"h":"How does it work?","r":0.71}]}
//! ```
//!
//! Rewards are written with shortest round-trip formatting and read back
//! with correctly rounded parsing, so the float bits survive.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{dedup_key, Memory, MemoryEntry, MemoryError, MemoryGroup, Segment};

const FORMAT: &str = "cbdt-mem";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    #[serde(rename = "H_cap")]
    h_cap: usize,
    utility: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    provenance: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct EntryLine {
    h: String,
    r: f64,
}

#[derive(Serialize, Deserialize)]
struct GroupLine {
    id: String,
    input: Option<String>,
    entries: Vec<EntryLine>,
}

/// What to do when a loaded memory's utility differs from the pinned one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UtilityMismatch {
    #[default]
    Error,
    Warn,
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub expected_utility: Option<String>,
    pub on_mismatch: UtilityMismatch,
}

pub fn write_memory(memory: &Memory, out: &mut impl Write) -> Result<(), MemoryError> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        h_cap: memory.h_cap,
        utility: memory.utility_id.clone(),
        provenance: memory.provenance.clone(),
    };
    serde_json::to_writer(&mut *out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for g in &memory.groups {
        let line = GroupLine {
            id: g.input.id.clone(),
            input: g.input.text.clone(),
            entries: g
                .entries
                .iter()
                .map(|e| EntryLine {
                    h: e.hypothesis.clone(),
                    r: e.reward,
                })
                .collect(),
        };
        serde_json::to_writer(&mut *out, &line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_memory(memory: &Memory, path: impl AsRef<Path>) -> Result<(), MemoryError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_memory(memory, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_memory(path: impl AsRef<Path>, options: &LoadOptions) -> Result<Memory, MemoryError> {
    read_memory(BufReader::new(File::open(path)?), options)
}

pub fn read_memory(reader: impl BufRead, options: &LoadOptions) -> Result<Memory, MemoryError> {
    let mut lines = reader.lines().enumerate();
    let (_, first) = lines.next().ok_or(MemoryError::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let header: Header = serde_json::from_str(&first?).map_err(|e| MemoryError::Parse {
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    if header.format != FORMAT {
        return Err(MemoryError::UnsupportedFormat(header.format));
    }
    if header.version != VERSION {
        return Err(MemoryError::UnsupportedVersion(header.version));
    }
    if header.h_cap == 0 {
        return Err(MemoryError::Invariant {
            line: 1,
            message: "H_cap is zero".into(),
        });
    }
    if let Some(expected) = &options.expected_utility {
        if *expected != header.utility {
            match options.on_mismatch {
                UtilityMismatch::Error => {
                    return Err(MemoryError::UtilityMismatch {
                        expected: expected.clone(),
                        found: header.utility,
                    })
                }
                UtilityMismatch::Warn => log::warn!(
                    "memory was built with utility `{}` but `{}` is in use",
                    header.utility,
                    expected
                ),
            }
        }
    }

    let mut ids = HashSet::new();
    let mut groups = Vec::new();
    for (i, text) in lines {
        let line = i + 1;
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let g: GroupLine = serde_json::from_str(&text).map_err(|e| MemoryError::Parse {
            line,
            message: e.to_string(),
        })?;
        let invariant = |message: String| MemoryError::Invariant { line, message };
        if !ids.insert(g.id.clone()) {
            return Err(invariant(format!("duplicate example id `{}`", g.id)));
        }
        if g.entries.is_empty() || g.entries.len() > header.h_cap {
            return Err(invariant(format!(
                "{} entries, expected 1..={}",
                g.entries.len(),
                header.h_cap
            )));
        }
        let mut seen = HashSet::new();
        for e in &g.entries {
            if !seen.insert(dedup_key(&e.h)) {
                return Err(invariant(format!("repeated hypothesis {:?}", e.h)));
            }
            if !e.r.is_finite() {
                return Err(invariant("non-finite reward".into()));
            }
        }
        groups.push(MemoryGroup {
            input: Segment { id: g.id, text: g.input },
            entries: g
                .entries
                .into_iter()
                .map(|e| MemoryEntry {
                    hypothesis: e.h,
                    reward: e.r,
                })
                .collect(),
        });
    }
    Ok(Memory {
        groups,
        h_cap: header.h_cap,
        utility_id: header.utility,
        provenance: header.provenance,
    })
}
