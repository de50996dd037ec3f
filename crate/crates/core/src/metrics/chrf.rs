use std::collections::HashMap;

use super::{MetricError, Utility, UtilityQuery, UtilityScore};

/// Character n-gram F-score parameters. Word n-grams are not used.
#[derive(Debug, Clone, PartialEq)]
pub struct ChrfConfig {
    pub max_char_order: usize,
    pub beta: f64,
    pub strip_whitespace: bool,
}

impl Default for ChrfConfig {
    fn default() -> Self {
        Self {
            max_char_order: 6,
            beta: 2.0,
            strip_whitespace: true,
        }
    }
}

impl ChrfConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        if self.max_char_order < 1 {
            return Err(MetricError::InvalidConfig(
                "chrF max_char_order must be at least 1".into(),
            ));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(MetricError::InvalidConfig(format!(
                "chrF beta must be positive, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

fn chars(text: &str, strip: bool) -> Vec<char> {
    if strip {
        text.chars().filter(|c| !c.is_whitespace()).collect()
    } else {
        text.chars().collect()
    }
}

fn ngram_counts(text: &[char], order: usize) -> HashMap<&[char], usize> {
    let mut counts = HashMap::new();
    for gram in text.windows(order) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// chrF between a hypothesis and a reference, in `[0, 1]`.
///
/// Precision and recall are averaged over the orders where at least one side
/// has n-grams; an order where only one side has n-grams contributes zero to
/// both averages. Two empty strings score 1.
pub fn chrf(hypothesis: &str, reference: &str, cfg: &ChrfConfig) -> Result<UtilityScore, MetricError> {
    cfg.validate()?;
    let hyp = chars(hypothesis, cfg.strip_whitespace);
    let reference = chars(reference, cfg.strip_whitespace);

    let mut precision_sum = 0.0;
    let mut recall_sum = 0.0;
    let mut effective_order = 0usize;
    for order in 1..=cfg.max_char_order {
        let hyp_total = (hyp.len() + 1).saturating_sub(order);
        let ref_total = (reference.len() + 1).saturating_sub(order);
        if hyp_total == 0 && ref_total == 0 {
            continue;
        }
        effective_order += 1;
        if hyp_total == 0 || ref_total == 0 {
            continue;
        }
        let hyp_counts = ngram_counts(&hyp, order);
        let ref_counts = ngram_counts(&reference, order);
        let matches: usize = hyp_counts
            .iter()
            .map(|(gram, &n)| n.min(ref_counts.get(gram).copied().unwrap_or(0)))
            .sum();
        precision_sum += matches as f64 / hyp_total as f64;
        recall_sum += matches as f64 / ref_total as f64;
    }

    if effective_order == 0 {
        return Ok(1.0);
    }
    let precision = precision_sum / effective_order as f64;
    let recall = recall_sum / effective_order as f64;
    let beta2 = cfg.beta * cfg.beta;
    let denom = beta2 * precision + recall;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((1.0 + beta2) * precision * recall / denom)
}

/// chrF as a [`Utility`].
#[derive(Debug, Clone, Default)]
pub struct Chrf {
    cfg: ChrfConfig,
}

impl Chrf {
    pub fn new(cfg: ChrfConfig) -> Result<Self, MetricError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ChrfConfig {
        &self.cfg
    }
}

impl Utility for Chrf {
    fn id(&self) -> &str {
        "chrf"
    }

    fn score(&self, query: &UtilityQuery<'_>) -> Result<UtilityScore, MetricError> {
        chrf(query.hyp, query.reference, &self.cfg)
    }
}
