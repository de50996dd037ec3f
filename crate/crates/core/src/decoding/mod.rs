//! Decision rules that pick one hypothesis out of a candidate set.
//!
//! Every rule produces a per-hypothesis score list and selects its argmax,
//! breaking ties towards the lowest index.

mod cbdt;
mod pmbr;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::memory::{knn_retrieve, Memory, MemoryError, RetrievedMemory, Segment};
use crate::metrics::{utility_matrix, MetricError, ScoreTable, Utility, UtilityQuery};
use crate::similarity::{Similarity, SimilarityError};

pub use cbdt::{cbdt_naive_scores, cbdt_scores};
pub use pmbr::{complete_low_rank, pmbr_sample, pmbr_scores, sample_size, PmbrSample};

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("candidate set `{0}` is empty")]
    EmptyCandidates(String),
    #[error("hypothesis {index} of `{input}` has non-finite logprob {value}")]
    NonFiniteLogprob { input: String, index: usize, value: f64 },
    #[error("pseudo-reference set is empty")]
    EmptyPseudoReferences,
    #[error("no memory groups were retrieved")]
    EmptyRetrieved,
    #[error("rule `{rule}` needs {what}")]
    MissingInput { rule: Rule, what: &'static str },
    #[error("invalid decoding config: {0}")]
    InvalidConfig(String),
    #[error("similarity {value} for example `{example}` is outside [0, 1]")]
    SimilarityOutOfRange { example: String, value: f64 },
    #[error("non-finite {what} score {value} at hypothesis {index}")]
    NonFiniteScore { what: &'static str, index: usize, value: f64 },
    #[error("no sample at rate {rate} observed every row and column after {attempts} attempts; use a higher sample rate")]
    DegenerateSampling { rate: f64, attempts: usize },
    #[error("utility failed for `{input}`: {source}")]
    Utility { input: String, source: MetricError },
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub text: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub input: Segment,
    pub hypotheses: Vec<Hypothesis>,
    /// Which generator produced the list.
    pub provenance: String,
}

impl CandidateSet {
    pub fn new(input: Segment, hypotheses: Vec<Hypothesis>) -> Self {
        Self {
            input,
            hypotheses,
            provenance: String::new(),
        }
    }

    /// Candidates without model scores; every logprob is 0.
    pub fn from_texts<S: Into<String>>(input: Segment, texts: impl IntoIterator<Item = S>) -> Self {
        let hypotheses = texts
            .into_iter()
            .map(|t| Hypothesis {
                text: t.into(),
                logprob: 0.0,
            })
            .collect();
        Self::new(input, hypotheses)
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.hypotheses.iter().map(|h| h.text.as_str()).collect()
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.hypotheses.is_empty() {
            return Err(DecodeError::EmptyCandidates(self.input.id.clone()));
        }
        if let Some((index, h)) = self.hypotheses.iter().enumerate().find(|(_, h)| !h.logprob.is_finite()) {
            return Err(DecodeError::NonFiniteLogprob {
                input: self.input.id.clone(),
                index,
                value: h.logprob,
            });
        }
        Ok(())
    }
}

/// Pseudo-references: an ordered multiset, duplicates count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoReferenceSet {
    pub texts: Vec<String>,
}

impl PseudoReferenceSet {
    pub fn new(texts: Vec<String>) -> Self {
        Self { texts }
    }

    /// The hypothesis texts themselves.
    pub fn from_candidates(cands: &CandidateSet) -> Self {
        Self {
            texts: cands.hypotheses.iter().map(|h| h.text.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Map,
    Qe,
    Oracle,
    Mbr,
    CbdtNaive,
    Cbdt,
    MbrCbdt,
    Pmbr,
    PmbrCbdt,
}

impl Rule {
    pub const ALL: [Rule; 9] = [
        Rule::Map,
        Rule::Qe,
        Rule::Oracle,
        Rule::Mbr,
        Rule::CbdtNaive,
        Rule::Cbdt,
        Rule::MbrCbdt,
        Rule::Pmbr,
        Rule::PmbrCbdt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Rule::Map => "map",
            Rule::Qe => "qe",
            Rule::Oracle => "oracle",
            Rule::Mbr => "mbr",
            Rule::CbdtNaive => "cbdt_naive",
            Rule::Cbdt => "cbdt",
            Rule::MbrCbdt => "mbr_cbdt",
            Rule::Pmbr => "pmbr",
            Rule::PmbrCbdt => "pmbr_cbdt",
        }
    }

    pub fn needs_pseudo_references(self) -> bool {
        matches!(self, Rule::Mbr | Rule::MbrCbdt | Rule::Pmbr | Rule::PmbrCbdt)
    }

    pub fn needs_memory(self) -> bool {
        matches!(self, Rule::CbdtNaive | Rule::Cbdt | Rule::MbrCbdt | Rule::PmbrCbdt)
    }

    /// Whether the rule calls the utility at decode time.
    pub fn calls_utility(self) -> bool {
        matches!(self, Rule::Oracle | Rule::Mbr | Rule::MbrCbdt | Rule::Pmbr | Rule::PmbrCbdt)
    }
}

impl std::fmt::Display for Rule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Rule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Rule::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown rule `{s}`"))
    }
}

/// Matrix-completion settings for the sampled MBR estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PmbrConfig {
    pub rank: usize,
    pub sample_rate: f64,
    pub iterations: usize,
    pub l2: f64,
    pub init_scale: f64,
    pub max_resample: usize,
}

impl Default for PmbrConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            sample_rate: 1.0 / 64.0,
            iterations: 30,
            l2: 1e-3,
            init_scale: 0.1,
            max_resample: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecisionConfig {
    pub rule: Rule,
    pub tau_x: f64,
    pub tau_y: f64,
    pub lambda: f64,
    pub k: usize,
    pub seed: u64,
    pub pmbr: PmbrConfig,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        Self {
            rule: Rule::MbrCbdt,
            tau_x: 0.01,
            tau_y: 0.01,
            lambda: 0.5,
            k: 256,
            seed: 0,
            pmbr: PmbrConfig::default(),
        }
    }
}

impl DecisionConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        let bad = |m: String| Err(DecodeError::InvalidConfig(m));
        for (name, tau) in [("tau_x", self.tau_x), ("tau_y", self.tau_y)] {
            if !(tau > 0.0 && tau.is_finite()) {
                return bad(format!("{name} must be positive, got {tau}"));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must be in [0, 1], got {}", self.lambda));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        let p = &self.pmbr;
        if p.rank == 0 {
            return bad("pmbr rank must be at least 1".into());
        }
        if !(p.sample_rate > 0.0 && p.sample_rate <= 1.0) {
            return bad(format!("pmbr sample rate must be in (0, 1], got {}", p.sample_rate));
        }
        if !(p.l2 >= 0.0 && p.l2.is_finite()) || !(p.init_scale > 0.0 && p.init_scale.is_finite()) {
            return bad("pmbr l2 must be non-negative and init scale positive".into());
        }
        Ok(())
    }
}

/// Nanoseconds spent per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub similarity_ns: u64,
    pub utility_ns: u64,
    pub selection_ns: u64,
}

impl Timing {
    pub fn total_ns(&self) -> u64 {
        self.similarity_ns + self.utility_ns + self.selection_ns
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decision {
    pub chosen_index: usize,
    pub chosen_text: String,
    /// Score list per component, keyed by rule name.
    pub scores: BTreeMap<String, Vec<f64>>,
    pub timing: Timing,
}

impl Decision {
    fn new(cands: &CandidateSet, chosen_index: usize) -> Self {
        Self {
            chosen_index,
            chosen_text: cands.hypotheses[chosen_index].text.clone(),
            scores: BTreeMap::new(),
            timing: Timing::default(),
        }
    }

    fn with_scores(mut self, name: &str, scores: Vec<f64>) -> Self {
        self.scores.insert(name.to_string(), scores);
        self
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn nanos(start: Instant) -> u64 {
    start.elapsed().as_nanos() as u64
}

fn check_finite(what: &'static str, scores: &[f64]) -> Result<(), DecodeError> {
    match scores.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        Some((index, &value)) => Err(DecodeError::NonFiniteScore { what, index, value }),
        None => Ok(()),
    }
}

/// Maps scores affinely onto [0, 1]. A constant list becomes all 0.5.
pub fn minmax_normalize(scores: &[f64]) -> Vec<f64> {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return vec![0.5; scores.len()];
    }
    let span = max - min;
    scores.iter().map(|&s| ((s - min) / span).clamp(0.0, 1.0)).collect()
}

/// (1 − λ)·minmax(a) + λ·minmax(b).
pub fn mix_scores(a: &[f64], b: &[f64], lambda: f64) -> Vec<f64> {
    let a = minmax_normalize(a);
    let b = minmax_normalize(b);
    a.iter().zip(&b).map(|(x, y)| (1.0 - lambda) * x + lambda * y).collect()
}

pub fn select_map(cands: &CandidateSet) -> Result<Decision, DecodeError> {
    cands.validate()?;
    let start = Instant::now();
    let scores: Vec<f64> = cands.hypotheses.iter().map(|h| h.logprob).collect();
    let mut d = Decision::new(cands, argmax(&scores)).with_scores("map", scores);
    d.timing.selection_ns = nanos(start);
    Ok(d)
}

pub fn select_qe(cands: &CandidateSet, qe: &ScoreTable) -> Result<Decision, DecodeError> {
    cands.validate()?;
    let start = Instant::now();
    let scores = cands
        .hypotheses
        .iter()
        .enumerate()
        .map(|(i, h)| qe.qe_score(&cands.input.id, &h.text, i))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| DecodeError::Utility {
            input: cands.input.id.clone(),
            source,
        })?;
    check_finite("qe", &scores)?;
    let mut d = Decision::new(cands, argmax(&scores)).with_scores("qe", scores);
    d.timing.selection_ns = nanos(start);
    Ok(d)
}

pub fn select_oracle<U: Utility + ?Sized>(cands: &CandidateSet, reference: &str, u: &U) -> Result<Decision, DecodeError> {
    cands.validate()?;
    let start = Instant::now();
    let scores = cands
        .hypotheses
        .iter()
        .enumerate()
        .map(|(i, h)| {
            u.score(&UtilityQuery {
                input_id: &cands.input.id,
                hyp: &h.text,
                hyp_index: i,
                reference,
                ref_index: 0,
            })
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| DecodeError::Utility {
            input: cands.input.id.clone(),
            source,
        })?;
    check_finite("oracle", &scores)?;
    let utility_ns = nanos(start);
    let mut d = Decision::new(cands, argmax(&scores)).with_scores("oracle", scores);
    d.timing.utility_ns = utility_ns;
    Ok(d)
}

/// Mean utility of each hypothesis against the pseudo-references.
pub fn mbr_scores<U: Utility + ?Sized>(
    cands: &CandidateSet,
    refs: &PseudoReferenceSet,
    u: &U,
) -> Result<Vec<f64>, DecodeError> {
    cands.validate()?;
    if refs.is_empty() {
        return Err(DecodeError::EmptyPseudoReferences);
    }
    let matrix = utility_matrix(&cands.input.id, &cands.texts(), &refs.texts, u).map_err(|source| DecodeError::Utility {
        input: cands.input.id.clone(),
        source,
    })?;
    let scores = matrix.row_means();
    check_finite("mbr", &scores)?;
    Ok(scores)
}

pub fn select_mbr<U: Utility + ?Sized>(cands: &CandidateSet, refs: &PseudoReferenceSet, u: &U) -> Result<Decision, DecodeError> {
    let start = Instant::now();
    let scores = mbr_scores(cands, refs, u)?;
    let utility_ns = nanos(start);
    let mut d = Decision::new(cands, argmax(&scores)).with_scores("mbr", scores);
    d.timing.utility_ns = utility_ns;
    Ok(d)
}

pub fn select_cbdt_naive<S: Similarity + ?Sized>(
    cands: &CandidateSet,
    query: &Segment,
    memory: &Memory,
    s: &S,
) -> Result<Decision, DecodeError> {
    let start = Instant::now();
    let scores = cbdt_naive_scores(cands, query, memory, s)?;
    let mut d = Decision::new(cands, argmax(&scores)).with_scores("cbdt_naive", scores);
    d.timing.similarity_ns = nanos(start);
    Ok(d)
}

pub fn select_cbdt<S: Similarity + ?Sized>(
    cands: &CandidateSet,
    retrieved: &RetrievedMemory<'_>,
    s_y: &S,
    cfg: &DecisionConfig,
) -> Result<Decision, DecodeError> {
    let start = Instant::now();
    let scores = cbdt_scores(cands, retrieved, s_y, cfg.tau_x, cfg.tau_y)?;
    let mut d = Decision::new(cands, argmax(&scores)).with_scores("cbdt", scores);
    d.timing.similarity_ns = nanos(start);
    Ok(d)
}

fn mixture(cands: &CandidateSet, name: &str, base: (&str, Vec<f64>), cbdt: Vec<f64>, lambda: f64) -> Decision {
    let mixed = mix_scores(&base.1, &cbdt, lambda);
    Decision::new(cands, argmax(&mixed))
        .with_scores(base.0, base.1)
        .with_scores("cbdt", cbdt)
        .with_scores(name, mixed)
}

pub fn select_mbr_cbdt<U: Utility + ?Sized, S: Similarity + ?Sized>(
    cands: &CandidateSet,
    refs: &PseudoReferenceSet,
    retrieved: &RetrievedMemory<'_>,
    u: &U,
    s_y: &S,
    cfg: &DecisionConfig,
) -> Result<Decision, DecodeError> {
    cfg.validate()?;
    let t0 = Instant::now();
    let mbr = mbr_scores(cands, refs, u)?;
    let utility_ns = nanos(t0);
    let t1 = Instant::now();
    let cbdt = cbdt_scores(cands, retrieved, s_y, cfg.tau_x, cfg.tau_y)?;
    let similarity_ns = nanos(t1);
    let t2 = Instant::now();
    let mut d = mixture(cands, "mbr_cbdt", ("mbr", mbr), cbdt, cfg.lambda);
    d.timing = Timing {
        similarity_ns,
        utility_ns,
        selection_ns: nanos(t2),
    };
    Ok(d)
}

pub fn select_pmbr<U: Utility + ?Sized>(
    cands: &CandidateSet,
    refs: &PseudoReferenceSet,
    u: &U,
    cfg: &DecisionConfig,
) -> Result<Decision, DecodeError> {
    cfg.validate()?;
    let t0 = Instant::now();
    let scores = pmbr_scores(cands, refs, u, &cfg.pmbr, cfg.seed)?;
    let mut d = Decision::new(cands, argmax(&scores)).with_scores("pmbr", scores);
    d.timing.utility_ns = nanos(t0);
    Ok(d)
}

pub fn select_pmbr_cbdt<U: Utility + ?Sized, S: Similarity + ?Sized>(
    cands: &CandidateSet,
    refs: &PseudoReferenceSet,
    retrieved: &RetrievedMemory<'_>,
    u: &U,
    s_y: &S,
    cfg: &DecisionConfig,
) -> Result<Decision, DecodeError> {
    cfg.validate()?;
    let t0 = Instant::now();
    let pmbr = pmbr_scores(cands, refs, u, &cfg.pmbr, cfg.seed)?;
    let utility_ns = nanos(t0);
    let t1 = Instant::now();
    let cbdt = cbdt_scores(cands, retrieved, s_y, cfg.tau_x, cfg.tau_y)?;
    let similarity_ns = nanos(t1);
    let t2 = Instant::now();
    let mut d = mixture(cands, "pmbr_cbdt", ("pmbr", pmbr), cbdt, cfg.lambda);
    d.timing = Timing {
        similarity_ns,
        utility_ns,
        selection_ns: nanos(t2),
    };
    Ok(d)
}

/// Per-segment inputs. Missing pseudo-references default to the hypotheses.
#[derive(Debug, Clone, Copy)]
pub struct DecodeRequest<'a> {
    pub candidates: &'a CandidateSet,
    pub pseudo_references: Option<&'a PseudoReferenceSet>,
    pub reference: Option<&'a str>,
}

/// A rule together with everything it may consult. Shareable across threads.
pub struct Decoder<'a> {
    pub config: DecisionConfig,
    pub utility: Option<&'a dyn Utility>,
    pub qe: Option<&'a ScoreTable>,
    pub memory: Option<&'a Memory>,
    pub s_x: Option<&'a dyn Similarity>,
    pub s_y: Option<&'a dyn Similarity>,
}

impl<'a> Decoder<'a> {
    pub fn new(config: DecisionConfig) -> Self {
        Self {
            config,
            utility: None,
            qe: None,
            memory: None,
            s_x: None,
            s_y: None,
        }
    }

    fn need<T>(&self, value: Option<T>, what: &'static str) -> Result<T, DecodeError> {
        value.ok_or(DecodeError::MissingInput {
            rule: self.config.rule,
            what,
        })
    }

    /// Checks that the rule's dependencies were supplied.
    pub fn validate(&self) -> Result<(), DecodeError> {
        self.config.validate()?;
        let rule = self.config.rule;
        if rule.calls_utility() {
            self.need(self.utility, "a utility")?;
        }
        if rule == Rule::Qe {
            self.need(self.qe, "a QE score table")?;
        }
        if rule.needs_memory() {
            self.need(self.memory, "a memory")?;
            self.need(self.s_x, "an input similarity")?;
        }
        if matches!(rule, Rule::Cbdt | Rule::MbrCbdt | Rule::PmbrCbdt) {
            self.need(self.s_y, "an output similarity")?;
        }
        Ok(())
    }

    pub fn decide(&self, req: &DecodeRequest<'_>) -> Result<Decision, DecodeError> {
        self.validate()?;
        let cands = req.candidates;
        cands.validate()?;
        let cfg = &self.config;
        let owned_refs;
        let refs = match req.pseudo_references {
            Some(r) => r,
            None => {
                owned_refs = PseudoReferenceSet::from_candidates(cands);
                &owned_refs
            }
        };
        match cfg.rule {
            Rule::Map => select_map(cands),
            Rule::Qe => select_qe(cands, self.need(self.qe, "a QE score table")?),
            Rule::Oracle => select_oracle(
                cands,
                self.need(req.reference, "a reference")?,
                self.need(self.utility, "a utility")?,
            ),
            Rule::Mbr => select_mbr(cands, refs, self.need(self.utility, "a utility")?),
            Rule::Pmbr => select_pmbr(cands, refs, self.need(self.utility, "a utility")?, cfg),
            Rule::CbdtNaive => select_cbdt_naive(
                cands,
                &cands.input,
                self.need(self.memory, "a memory")?,
                self.need(self.s_x, "an input similarity")?,
            ),
            Rule::Cbdt | Rule::MbrCbdt | Rule::PmbrCbdt => {
                let t0 = Instant::now();
                let retrieved = knn_retrieve(
                    &cands.input,
                    self.need(self.memory, "a memory")?,
                    cfg.k,
                    self.need(self.s_x, "an input similarity")?,
                )?;
                let knn_ns = nanos(t0);
                let s_y = self.need(self.s_y, "an output similarity")?;
                let mut d = match cfg.rule {
                    Rule::Cbdt => select_cbdt(cands, &retrieved, s_y, cfg),
                    Rule::MbrCbdt => select_mbr_cbdt(cands, refs, &retrieved, self.need(self.utility, "a utility")?, s_y, cfg),
                    _ => select_pmbr_cbdt(cands, refs, &retrieved, self.need(self.utility, "a utility")?, s_y, cfg),
                }?;
                d.timing.similarity_ns += knn_ns;
                Ok(d)
            }
        }
    }
}

#[cfg(test)]
mod tests;
