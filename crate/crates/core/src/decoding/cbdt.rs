use std::collections::HashMap;

use crate::memory::{dedup_key, Memory, RetrievedMemory, Segment};
use crate::similarity::{hypothesis_key, tempered_normalize, Item, Similarity, SimilarityError};

use super::{check_finite, CandidateSet, DecodeError};

/// Exact-match score: Σ over memory triplets of s(x, x̃)·[h = h̃]·r̃, where
/// equality is taken on [`dedup_key`]. `s` must stay within [0, 1].
pub fn cbdt_naive_scores<S: Similarity + ?Sized>(
    cands: &CandidateSet,
    query: &Segment,
    memory: &Memory,
    s: &S,
) -> Result<Vec<f64>, DecodeError> {
    cands.validate()?;
    let inputs: Vec<Item> = memory.groups.iter().map(|g| g.input.item()).collect();
    let sims = s.score_batch(&[query.item()], &inputs)?;
    let mut totals: HashMap<String, f64> = cands.hypotheses.iter().map(|h| (dedup_key(&h.text), 0.0)).collect();
    for (g, &sim) in memory.groups.iter().zip(&sims) {
        if !(0.0..=1.0).contains(&sim) {
            return Err(DecodeError::SimilarityOutOfRange {
                example: g.example_id().to_string(),
                value: sim,
            });
        }
        for e in &g.entries {
            if let Some(t) = totals.get_mut(&dedup_key(&e.hypothesis)) {
                *t += sim * e.reward;
            }
        }
    }
    Ok(cands.hypotheses.iter().map(|h| totals[&dedup_key(&h.text)]).collect())
}

/// Relaxed score. The input-side weight is a tempered softmax over every
/// retrieved triplet (a group's similarity appears once per entry); the
/// output-side weight is a tempered softmax over the entries of one group.
///
/// Current hypotheses are keyed `"<input id>:<index>"`, memorized ones
/// `"<example id>:<position in group>"`.
pub fn cbdt_scores<S: Similarity + ?Sized>(
    cands: &CandidateSet,
    retrieved: &RetrievedMemory<'_>,
    s_y: &S,
    tau_x: f64,
    tau_y: f64,
) -> Result<Vec<f64>, DecodeError> {
    cands.validate()?;
    if retrieved.is_empty() {
        return Err(DecodeError::EmptyRetrieved);
    }
    if !(tau_y > 0.0 && tau_y.is_finite()) {
        return Err(SimilarityError::NonPositiveTemperature(tau_y).into());
    }

    let per_triplet: Vec<f64> = retrieved
        .groups
        .iter()
        .flat_map(|g| std::iter::repeat_n(g.similarity, g.group.entries.len()))
        .collect();
    let w_x = tempered_normalize(&per_triplet, tau_x)?.weights;

    let hyp_keys: Vec<String> = (0..cands.len()).map(|i| hypothesis_key(&cands.input.id, i)).collect();
    let queries: Vec<Item> = cands
        .hypotheses
        .iter()
        .zip(&hyp_keys)
        .map(|(h, k)| Item::text(k, &h.text))
        .collect();

    let mut scores = vec![0.0; cands.len()];
    let mut offset = 0;
    for g in &retrieved.groups {
        let entries = &g.group.entries;
        if entries.is_empty() {
            continue;
        }
        let mem_keys: Vec<String> = (0..entries.len()).map(|j| hypothesis_key(g.group.example_id(), j)).collect();
        let memorized: Vec<Item> = entries
            .iter()
            .zip(&mem_keys)
            .map(|(e, k)| Item::text(k, &e.hypothesis))
            .collect();
        let sims = s_y.score_batch(&queries, &memorized)?;
        for (i, row) in sims.chunks(entries.len()).enumerate() {
            let w_y = tempered_normalize(row, tau_y)?.weights;
            for (j, e) in entries.iter().enumerate() {
                scores[i] += w_x[offset + j] * w_y[j] * e.reward;
            }
        }
        offset += entries.len();
    }
    check_finite("cbdt", &scores)?;
    Ok(scores)
}
