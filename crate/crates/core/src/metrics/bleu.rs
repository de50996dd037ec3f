use std::collections::HashMap;

use super::{MetricError, Utility, UtilityQuery, UtilityScore};

/// How zero clipped counts at orders above one are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Smoothing {
    None,
    /// Orders > 1 with zero matches use (0 + 1) / (total + 1).
    #[default]
    AddOne,
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], order: usize) -> HashMap<&'t [&'a str], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(order) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Sentence BLEU over whitespace tokens.
///
/// Zero unigram precision is never smoothed, so it forces a score of 0.
/// Two empty texts score 1; an empty hypothesis against a nonempty reference
/// scores 0.
pub fn sentence_bleu(hypothesis: &str, reference: &str, max_order: usize, smoothing: Smoothing) -> UtilityScore {
    let hyp: Vec<&str> = hypothesis.split_whitespace().collect();
    let reference: Vec<&str> = reference.split_whitespace().collect();
    if hyp.is_empty() {
        return if reference.is_empty() { 1.0 } else { 0.0 };
    }
    let max_order = max_order.max(1);

    let mut log_precision = 0.0;
    for order in 1..=max_order {
        let total = (hyp.len() + 1).saturating_sub(order);
        let hyp_counts = ngram_counts(&hyp, order);
        let ref_counts = ngram_counts(&reference, order);
        let matches: usize = hyp_counts
            .iter()
            .map(|(gram, &n)| n.min(ref_counts.get(gram).copied().unwrap_or(0)))
            .sum();
        let precision = if matches > 0 {
            matches as f64 / total as f64
        } else if order > 1 && smoothing == Smoothing::AddOne {
            1.0 / (total as f64 + 1.0)
        } else {
            return 0.0;
        };
        log_precision += precision.ln();
    }

    let (c, r) = (hyp.len() as f64, reference.len() as f64);
    let brevity = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    brevity * (log_precision / max_order as f64).exp()
}

/// Mean sentence BLEU over all ordered pairs (a, b) with a ≠ b by position.
pub fn pairwise_bleu<S: AsRef<str>>(set: &[S]) -> Result<f64, MetricError> {
    if set.len() < 2 {
        return Err(MetricError::TooFewTexts(set.len()));
    }
    let mut total = 0.0;
    for (i, a) in set.iter().enumerate() {
        for (j, b) in set.iter().enumerate() {
            if i != j {
                total += sentence_bleu(a.as_ref(), b.as_ref(), 4, Smoothing::AddOne);
            }
        }
    }
    let n = set.len() as f64;
    Ok(total / (n * (n - 1.0)))
}

/// Sentence BLEU as a [`Utility`].
#[derive(Debug, Clone)]
pub struct SentenceBleu {
    pub max_order: usize,
    pub smoothing: Smoothing,
}

impl Default for SentenceBleu {
    fn default() -> Self {
        Self {
            max_order: 4,
            smoothing: Smoothing::AddOne,
        }
    }
}

impl Utility for SentenceBleu {
    fn id(&self) -> &str {
        "bleu"
    }

    fn score(&self, query: &UtilityQuery<'_>) -> Result<UtilityScore, MetricError> {
        Ok(sentence_bleu(query.hyp, query.reference, self.max_order, self.smoothing))
    }
}
