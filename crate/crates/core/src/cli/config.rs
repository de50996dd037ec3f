//! Run configuration: flags, then `CBDT_*` environment variables, then an
//! optional TOML file of flat `key = value` pairs, then built-in defaults.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Deserialize;

use crate::decoding::{DecisionConfig, PmbrConfig, Rule};
use crate::memory::{load_memory, LoadOptions, Memory, UtilityMismatch};
use crate::metrics::{utility_from_name, Utility};
use crate::similarity::{
    hypothesis_key, Bm25Index, Bm25Params, Bm25Similarity, EmbeddingCacheReader, EmbeddingCosine, EmbeddingStore,
    MemoryVectors, Similarity, SimilarityTable, CACHE_MAGIC,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimKind {
    Bm25,
    Embedding,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchPolicy {
    Warn,
    Error,
}

/// Keys accepted in the config file. Names match the long flags with
/// dashes replaced by underscores.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub rule: Option<Rule>,
    pub tau_x: Option<f64>,
    pub tau_y: Option<f64>,
    pub lambda: Option<f64>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub pmbr_rank: Option<usize>,
    pub pmbr_sample_rate: Option<f64>,
    pub pmbr_iterations: Option<usize>,
    pub pmbr_l2: Option<f64>,
    pub utility: Option<String>,
    pub memory: Option<PathBuf>,
    pub on_utility_mismatch: Option<MismatchPolicy>,
    pub s_x: Option<SimKind>,
    pub s_y: Option<SimKind>,
    pub sx_query_emb: Option<PathBuf>,
    pub sx_memory_emb: Option<PathBuf>,
    pub sy_query_emb: Option<PathBuf>,
    pub sy_memory_emb: Option<PathBuf>,
    pub sx_table: Option<PathBuf>,
    pub sy_table: Option<PathBuf>,
    pub qe: Option<PathBuf>,
    pub pseudo_refs: Option<PathBuf>,
    pub references: Option<PathBuf>,
    pub threads: Option<usize>,
    pub h_cap: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct DecodeArgs {
    #[arg(long, env = "CBDT_RULE", value_parser = parse_rule)]
    pub rule: Option<Rule>,
    #[arg(long, env = "CBDT_TAU_X")]
    pub tau_x: Option<f64>,
    #[arg(long, env = "CBDT_TAU_Y")]
    pub tau_y: Option<f64>,
    #[arg(long, env = "CBDT_LAMBDA")]
    pub lambda: Option<f64>,
    #[arg(long, env = "CBDT_K")]
    pub k: Option<usize>,
    #[arg(long, env = "CBDT_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "CBDT_PMBR_RANK")]
    pub pmbr_rank: Option<usize>,
    #[arg(long, env = "CBDT_PMBR_SAMPLE_RATE")]
    pub pmbr_sample_rate: Option<f64>,
    #[arg(long, env = "CBDT_PMBR_ITERATIONS")]
    pub pmbr_iterations: Option<usize>,
    #[arg(long, env = "CBDT_PMBR_L2")]
    pub pmbr_l2: Option<f64>,
    /// chrf, bleu or table:<path>
    #[arg(long, env = "CBDT_UTILITY")]
    pub utility: Option<String>,
    #[arg(long, env = "CBDT_MEMORY")]
    pub memory: Option<PathBuf>,
    /// What to do when the memory was scored with a different utility.
    #[arg(long, env = "CBDT_ON_UTILITY_MISMATCH")]
    pub on_utility_mismatch: Option<MismatchPolicy>,
    #[arg(long, env = "CBDT_S_X")]
    pub s_x: Option<SimKind>,
    #[arg(long, env = "CBDT_S_Y")]
    pub s_y: Option<SimKind>,
    /// Query-input vectors, keyed by input id (JSONL or binary cache).
    #[arg(long, env = "CBDT_SX_QUERY_EMB")]
    pub sx_query_emb: Option<PathBuf>,
    /// Memorized-input vectors, keyed by example id.
    #[arg(long, env = "CBDT_SX_MEMORY_EMB")]
    pub sx_memory_emb: Option<PathBuf>,
    /// Hypothesis vectors, keyed `<input id>:<index>`.
    #[arg(long, env = "CBDT_SY_QUERY_EMB")]
    pub sy_query_emb: Option<PathBuf>,
    /// Memorized-hypothesis vectors, keyed `<example id>:<position>`.
    #[arg(long, env = "CBDT_SY_MEMORY_EMB")]
    pub sy_memory_emb: Option<PathBuf>,
    #[arg(long, env = "CBDT_SX_TABLE")]
    pub sx_table: Option<PathBuf>,
    #[arg(long, env = "CBDT_SY_TABLE")]
    pub sy_table: Option<PathBuf>,
    /// QE score table for the qe rule.
    #[arg(long, env = "CBDT_QE")]
    pub qe: Option<PathBuf>,
    /// `{"id", "refs"}` lines; defaults to the hypotheses themselves.
    #[arg(long, env = "CBDT_PSEUDO_REFS")]
    pub pseudo_refs: Option<PathBuf>,
    /// `{"id", "ref"}` lines, needed by the oracle rule.
    #[arg(long, env = "CBDT_REFERENCES")]
    pub references: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, env = "CBDT_THREADS")]
    pub threads: Option<usize>,
}

fn parse_rule(s: &str) -> Result<Rule, String> {
    s.parse()
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub decision: DecisionConfig,
    pub utility: String,
    pub memory: Option<PathBuf>,
    pub on_utility_mismatch: MismatchPolicy,
    pub s_x: SimKind,
    pub s_y: SimKind,
    pub sx_query_emb: Option<PathBuf>,
    pub sx_memory_emb: Option<PathBuf>,
    pub sy_query_emb: Option<PathBuf>,
    pub sy_memory_emb: Option<PathBuf>,
    pub sx_table: Option<PathBuf>,
    pub sy_table: Option<PathBuf>,
    pub qe: Option<PathBuf>,
    pub pseudo_refs: Option<PathBuf>,
    pub references: Option<PathBuf>,
    pub threads: usize,
}

impl RunConfig {
    pub fn resolve(args: &DecodeArgs, file: &FileConfig) -> Result<Self> {
        let d = DecisionConfig::default();
        let p = PmbrConfig::default();
        macro_rules! pick {
            ($f:ident, $default:expr) => {
                args.$f.clone().or(file.$f.clone()).unwrap_or($default)
            };
            ($f:ident) => {
                args.$f.clone().or(file.$f.clone())
            };
        }
        let decision = DecisionConfig {
            rule: pick!(rule, d.rule),
            tau_x: pick!(tau_x, d.tau_x),
            tau_y: pick!(tau_y, d.tau_y),
            lambda: pick!(lambda, d.lambda),
            k: pick!(k, d.k),
            seed: pick!(seed, d.seed),
            pmbr: PmbrConfig {
                rank: pick!(pmbr_rank, p.rank),
                sample_rate: pick!(pmbr_sample_rate, p.sample_rate),
                iterations: pick!(pmbr_iterations, p.iterations),
                l2: pick!(pmbr_l2, p.l2),
                ..p
            },
        };
        decision.validate()?;
        Ok(Self {
            decision,
            utility: pick!(utility, "chrf".to_string()),
            memory: pick!(memory),
            on_utility_mismatch: pick!(on_utility_mismatch, MismatchPolicy::Error),
            s_x: pick!(s_x, SimKind::Bm25),
            s_y: pick!(s_y, SimKind::Bm25),
            sx_query_emb: pick!(sx_query_emb),
            sx_memory_emb: pick!(sx_memory_emb),
            sy_query_emb: pick!(sy_query_emb),
            sy_memory_emb: pick!(sy_memory_emb),
            sx_table: pick!(sx_table),
            sy_table: pick!(sy_table),
            qe: pick!(qe),
            pseudo_refs: pick!(pseudo_refs),
            references: pick!(references),
            threads: pick!(threads, 0),
        })
    }

    pub fn build_utility(&self) -> Result<Box<dyn Utility>> {
        utility_from_name(&self.utility).with_context(|| format!("utility `{}`", self.utility))
    }

    /// Loads the memory, pinning its utility when the rule also scores with one.
    pub fn load_memory(&self, utility_id: &str) -> Result<Memory> {
        let rule = self.decision.rule;
        let Some(path) = &self.memory else {
            bail!("rule `{rule}` needs --memory");
        };
        let opts = LoadOptions {
            expected_utility: rule.calls_utility().then(|| utility_id.to_string()),
            on_mismatch: match self.on_utility_mismatch {
                MismatchPolicy::Warn => UtilityMismatch::Warn,
                MismatchPolicy::Error => UtilityMismatch::Error,
            },
        };
        load_memory(path, &opts).with_context(|| format!("loading memory {}", path.display()))
    }

    pub fn build_s_x(&self, memory: &Memory) -> Result<Box<dyn Similarity>> {
        match self.s_x {
            SimKind::Bm25 => {
                let mut corpus = Vec::with_capacity(memory.len());
                for g in &memory.groups {
                    let Some(text) = g.input.text.as_deref() else {
                        bail!("BM25 input similarity needs text, but memory input `{}` is opaque", g.example_id());
                    };
                    corpus.push((g.example_id().to_string(), text));
                }
                Ok(Box::new(Bm25Similarity::new("bm25", Bm25Index::build(corpus, Bm25Params::default())?)))
            }
            SimKind::Embedding => embedding_similarity("sx", &self.sx_query_emb, &self.sx_memory_emb),
            SimKind::Table => table_similarity("--sx-table", &self.sx_table),
        }
    }

    pub fn build_s_y(&self, memory: &Memory) -> Result<Box<dyn Similarity>> {
        match self.s_y {
            SimKind::Bm25 => {
                let corpus = memory.groups.iter().flat_map(|g| {
                    g.entries
                        .iter()
                        .enumerate()
                        .map(move |(j, e)| (hypothesis_key(g.example_id(), j), e.hypothesis.as_str()))
                });
                Ok(Box::new(Bm25Similarity::new("bm25", Bm25Index::build(corpus, Bm25Params::default())?)))
            }
            SimKind::Embedding => embedding_similarity("sy", &self.sy_query_emb, &self.sy_memory_emb),
            SimKind::Table => table_similarity("--sy-table", &self.sy_table),
        }
    }
}

fn table_similarity(flag: &str, path: &Option<PathBuf>) -> Result<Box<dyn Similarity>> {
    let Some(path) = path else {
        bail!("similarity kind `table` needs {flag}");
    };
    Ok(Box::new(
        SimilarityTable::load(path).with_context(|| format!("loading {}", path.display()))?,
    ))
}

fn is_cache(path: &Path) -> Result<bool> {
    let mut magic = [0u8; 8];
    let mut f = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    Ok(f.read_exact(&mut magic).is_ok() && &magic == CACHE_MAGIC)
}

pub fn load_store(path: &Path) -> Result<EmbeddingStore> {
    let ctx = || format!("loading embeddings {}", path.display());
    if is_cache(path)? {
        Ok(EmbeddingCacheReader::open(path).with_context(ctx)?.load_all().with_context(ctx)?)
    } else {
        Ok(EmbeddingStore::from_jsonl(BufReader::new(File::open(path)?)).with_context(ctx)?)
    }
}

/// Query vectors are loaded whole; memory vectors stay on disk when given
/// as a binary cache.
fn embedding_similarity(side: &str, query: &Option<PathBuf>, memory: &Option<PathBuf>) -> Result<Box<dyn Similarity>> {
    let (Some(query), Some(memory)) = (query, memory) else {
        bail!("embedding {side} needs both --{side}-query-emb and --{side}-memory-emb");
    };
    let query_store = Arc::new(load_store(query)?);
    let vectors = if is_cache(memory)? {
        let reader = EmbeddingCacheReader::open(memory).with_context(|| format!("opening {}", memory.display()))?;
        MemoryVectors::Cache(Arc::new(reader))
    } else {
        MemoryVectors::Store(Arc::new(load_store(memory)?))
    };
    Ok(Box::new(EmbeddingCosine::new("cosine", query_store, vectors)?))
}
