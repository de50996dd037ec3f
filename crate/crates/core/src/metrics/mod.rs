//! Utility functions u(h, y) over hypothesis/reference pairs.
//!
//! The built-in lexical metrics ([`Chrf`], [`SentenceBleu`]) report values in
//! `[0, 1]`. Neural metrics are evaluated elsewhere and enter through a
//! [`ScoreTable`].

mod bleu;
mod chrf;
mod table;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;

pub use bleu::{pairwise_bleu, sentence_bleu, SentenceBleu, Smoothing};
pub use chrf::{chrf, Chrf, ChrfConfig};
pub use table::{KeyPart, Keying, ScoreKey, ScoreTable};

/// A utility value. Built-in metrics stay in `[0, 1]`; reports multiply by 100.
pub type UtilityScore = f64;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("invalid metric config: {0}")]
    InvalidConfig(String),
    #[error("pairwise BLEU is undefined for {0} text(s); need at least 2")]
    TooFewTexts(usize),
    #[error("utility matrix needs nonempty {0}")]
    EmptyInput(&'static str),
    #[error("score table has no entry for {0}")]
    MissingKey(ScoreKey),
    #[error("score table line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown utility `{0}` (expected chrf, bleu or table:<path>)")]
    UnknownUtility(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything a utility may key on. Lexical metrics only read the two texts;
/// score tables may key on the input id and the positional indices instead.
#[derive(Debug, Clone, Copy)]
pub struct UtilityQuery<'a> {
    pub input_id: &'a str,
    pub hyp: &'a str,
    pub hyp_index: usize,
    pub reference: &'a str,
    pub ref_index: usize,
}

impl<'a> UtilityQuery<'a> {
    /// A text-only query with empty id and zero indices.
    pub fn texts(hyp: &'a str, reference: &'a str) -> Self {
        Self {
            input_id: "",
            hyp,
            hyp_index: 0,
            reference,
            ref_index: 0,
        }
    }
}

pub trait Utility: Send + Sync {
    /// Stable identifier, pinned into memories built with this utility.
    fn id(&self) -> &str;

    fn score(&self, query: &UtilityQuery<'_>) -> Result<UtilityScore, MetricError>;
}

impl<U: Utility + ?Sized> Utility for &U {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn score(&self, query: &UtilityQuery<'_>) -> Result<UtilityScore, MetricError> {
        (**self).score(query)
    }
}

impl<U: Utility + ?Sized> Utility for Box<U> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn score(&self, query: &UtilityQuery<'_>) -> Result<UtilityScore, MetricError> {
        (**self).score(query)
    }
}

impl<U: Utility + ?Sized> Utility for Arc<U> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn score(&self, query: &UtilityQuery<'_>) -> Result<UtilityScore, MetricError> {
        (**self).score(query)
    }
}

/// Resolves a utility name as used on the command line.
pub fn utility_from_name(name: &str) -> Result<Box<dyn Utility>, MetricError> {
    match name {
        "chrf" => Ok(Box::new(Chrf::default())),
        "bleu" => Ok(Box::new(SentenceBleu::default())),
        other => match other.strip_prefix("table:") {
            Some(path) => Ok(Box::new(ScoreTable::load(path)?)),
            None => Err(MetricError::UnknownUtility(other.to_string())),
        },
    }
}

/// Wraps a utility, counting calls and optionally sleeping on each one.
///
/// Used by the benchmark and by tests that check how many utility
/// evaluations a decision rule performs.
pub struct CountingUtility<U> {
    inner: U,
    calls: AtomicU64,
    delay: Option<Duration>,
}

impl<U: Utility> CountingUtility<U> {
    pub fn new(inner: U) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
            delay: None,
        }
    }

    pub fn with_delay(inner: U, delay: Duration) -> Self {
        Self {
            delay: Some(delay),
            ..Self::new(inner)
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl<U: Utility> Utility for CountingUtility<U> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn score(&self, query: &UtilityQuery<'_>) -> Result<UtilityScore, MetricError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(delay) = self.delay {
            std::thread::sleep(delay);
        }
        self.inner.score(query)
    }
}

/// Dense row-major matrix of utility values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_vec(rows, cols, vec![value; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Left-to-right mean of each row.
    pub fn row_means(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.row(i).iter().sum::<f64>() / self.cols as f64)
            .collect()
    }
}

/// Evaluates u(h_i, y_j) for every pair. Rows are computed in parallel, each
/// row left to right, so the result does not depend on the thread count.
pub fn utility_matrix<H, R, U>(
    input_id: &str,
    hypotheses: &[H],
    references: &[R],
    utility: &U,
) -> Result<Matrix, MetricError>
where
    H: AsRef<str> + Sync,
    R: AsRef<str> + Sync,
    U: Utility + ?Sized,
{
    if hypotheses.is_empty() {
        return Err(MetricError::EmptyInput("hypotheses"));
    }
    if references.is_empty() {
        return Err(MetricError::EmptyInput("references"));
    }
    let cols = references.len();
    let rows: Vec<Vec<f64>> = hypotheses
        .par_iter()
        .enumerate()
        .map(|(i, hyp)| {
            references
                .iter()
                .enumerate()
                .map(|(j, reference)| {
                    utility.score(&UtilityQuery {
                        input_id,
                        hyp: hyp.as_ref(),
                        hyp_index: i,
                        reference: reference.as_ref(),
                        ref_index: j,
                    })
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let data = rows.into_iter().flatten().collect();
    Ok(Matrix::from_vec(hypotheses.len(), cols, data))
}
