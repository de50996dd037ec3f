use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::memory::{MemoryEntry, MemoryGroup, RetrievedGroup};
use crate::metrics::{chrf, Chrf, ChrfConfig, CountingUtility, Keying, Matrix, MetricError, ScoreKey, KeyPart};
use crate::similarity::{hypothesis_key, Item, SimilarityTable};

struct MatrixUtility(Matrix);

impl Utility for MatrixUtility {
    fn id(&self) -> &str {
        "matrix"
    }
    fn score(&self, q: &UtilityQuery<'_>) -> Result<f64, MetricError> {
        Ok(self.0.get(q.hyp_index, q.ref_index))
    }
}

struct Affine<U>(U, f64, f64);

impl<U: Utility> Utility for Affine<U> {
    fn id(&self) -> &str {
        "affine"
    }
    fn score(&self, q: &UtilityQuery<'_>) -> Result<f64, MetricError> {
        Ok(self.1 * self.0.score(q)? + self.2)
    }
}

struct ExactMatch;

impl Utility for ExactMatch {
    fn id(&self) -> &str {
        "exact"
    }
    fn score(&self, q: &UtilityQuery<'_>) -> Result<f64, MetricError> {
        Ok(if q.hyp == q.reference { 1.0 } else { 0.0 })
    }
}

fn cands(texts: &[&str]) -> CandidateSet {
    CandidateSet::from_texts(Segment::text("q", "query"), texts.iter().copied())
}

fn group(id: &str, entries: &[(&str, f64)]) -> MemoryGroup {
    MemoryGroup {
        input: Segment::text(id, format!("input {id}")),
        entries: entries
            .iter()
            .map(|&(h, r)| MemoryEntry {
                hypothesis: h.to_string(),
                reward: r,
            })
            .collect(),
    }
}

fn memory(groups: Vec<MemoryGroup>) -> Memory {
    Memory {
        groups,
        h_cap: 16,
        utility_id: "chrf".into(),
        provenance: Default::default(),
    }
}

fn retrieved<'m>(mem: &'m Memory, sims: &[f64]) -> RetrievedMemory<'m> {
    RetrievedMemory::from_parts(
        mem.groups
            .iter()
            .zip(sims)
            .map(|(group, &similarity)| RetrievedGroup { group, similarity })
            .collect(),
    )
}

/// Random s_Y over every (current hypothesis, memorized hypothesis) key pair.
fn random_sy(c: &CandidateSet, mem: &Memory, rng: &mut impl Rng) -> SimilarityTable {
    let mut t = SimilarityTable::new("sy");
    for i in 0..c.len() {
        for g in &mem.groups {
            for j in 0..g.entries.len() {
                t.insert(hypothesis_key(&c.input.id, i), hypothesis_key(g.example_id(), j), rng.gen_range(0.0..1.0));
            }
        }
    }
    t
}

/// Both softmaxes written out by hand.
fn cbdt_oracle(c: &CandidateSet, r: &RetrievedMemory<'_>, s_y: &SimilarityTable, tau_x: f64, tau_y: f64) -> Vec<f64> {
    let mut z_x = 0.0;
    for g in &r.groups {
        for _ in &g.group.entries {
            z_x += (g.similarity / tau_x).exp();
        }
    }
    let sy = |i: usize, g: &MemoryGroup, j: usize| {
        s_y.score(
            Item::new(&hypothesis_key(&c.input.id, i), None),
            Item::new(&hypothesis_key(g.example_id(), j), None),
        )
        .unwrap()
    };
    (0..c.len())
        .map(|i| {
            let mut total = 0.0;
            for g in &r.groups {
                let z_y: f64 = (0..g.group.entries.len()).map(|j| (sy(i, g.group, j) / tau_y).exp()).sum();
                for (j, e) in g.group.entries.iter().enumerate() {
                    let wx = (g.similarity / tau_x).exp() / z_x;
                    let wy = (sy(i, g.group, j) / tau_y).exp() / z_y;
                    total += wx * wy * e.reward;
                }
            }
            total
        })
        .collect()
}

fn scan_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 0..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

#[test]
fn map_rule() {
    let mut c = cands(&["a", "b"]);
    c.hypotheses[0].logprob = -1.0;
    c.hypotheses[1].logprob = -2.0;
    assert_eq!(select_map(&c).unwrap().chosen_index, 0);
    c.hypotheses[1].logprob = -1.0;
    assert_eq!(select_map(&c).unwrap().chosen_index, 0);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let mut c = cands(&["a", "b", "c", "d", "e", "f"]);
        for h in &mut c.hypotheses {
            h.logprob = -rng.gen_range(0.0..10.0);
        }
        let lp: Vec<f64> = c.hypotheses.iter().map(|h| h.logprob).collect();
        let d = select_map(&c).unwrap();
        assert_eq!(d.chosen_index, scan_argmax(&lp));
        assert_eq!(d.chosen_text, c.hypotheses[d.chosen_index].text);
        assert_eq!(d.scores["map"], lp);
    }
}

#[test]
fn candidate_validation() {
    assert!(matches!(select_map(&cands(&[])), Err(DecodeError::EmptyCandidates(_))));
    let mut c = cands(&["a"]);
    c.hypotheses[0].logprob = f64::NAN;
    assert!(matches!(select_map(&c), Err(DecodeError::NonFiniteLogprob { index: 0, .. })));
}

#[test]
fn qe_rule() {
    let c = cands(&["a", "b", "c"]);
    let mut t = ScoreTable::new(Keying::Index, "qe");
    for (i, s) in [0.2, 0.9, 0.1].into_iter().enumerate() {
        t.insert(
            ScoreKey {
                input_id: "q".into(),
                hyp: KeyPart::Index(i),
                reference: None,
            },
            s,
        );
    }
    assert_eq!(select_qe(&c, &t).unwrap().chosen_index, 1);

    let mut flat = ScoreTable::new(Keying::Text, "qe");
    for h in ["a", "b", "c"] {
        flat.insert(
            ScoreKey {
                input_id: "q".into(),
                hyp: KeyPart::Text(h.into()),
                reference: None,
            },
            0.5,
        );
    }
    assert_eq!(select_qe(&c, &flat).unwrap().chosen_index, 0);

    let partial = ScoreTable::new(Keying::Text, "qe");
    let err = select_qe(&c, &partial).unwrap_err().to_string();
    assert!(err.contains("hyp=\"a\""), "{err}");
}

#[test]
fn qe_random_table_matches_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = cands(&["a", "b", "c", "d", "e"]);
    for _ in 0..10 {
        let mut t = ScoreTable::new(Keying::Index, "qe");
        let scores: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
        for (i, &s) in scores.iter().enumerate() {
            t.insert(
                ScoreKey {
                    input_id: "q".into(),
                    hyp: KeyPart::Index(i),
                    reference: None,
                },
                s,
            );
        }
        assert_eq!(select_qe(&c, &t).unwrap().chosen_index, scan_argmax(&scores));
    }
}

#[test]
fn oracle_rule() {
    let u = Chrf::default();
    let c = cands(&["the cat", "a dog sat here", "the cat sat"]);
    assert_eq!(select_oracle(&c, "a dog sat here", &u).unwrap().chosen_index, 1);
    assert_eq!(select_oracle(&cands(&["x"]), "y", &u).unwrap().chosen_index, 0);

    let hyps = ["one two", "two three", "the quick fox", "a quick brown fox", "brown", "fox quick", "jumps", "the fox"];
    let reference = "the quick brown fox";
    let scores: Vec<f64> = hyps.iter().map(|h| chrf(h, reference, &ChrfConfig::default()).unwrap()).collect();
    let d = select_oracle(&cands(&hyps), reference, &u).unwrap();
    assert_eq!(d.chosen_index, scan_argmax(&scores));
    assert_eq!(d.scores["oracle"], scores);
}

#[test]
fn mbr_scores_match_matrix_oracle() {
    let u = Chrf::default();
    let hyps = ["the cat sat", "a cat sat down", "dogs run", "the cat"];
    let refs: Vec<String> = ["the cat sat", "cat sat", "a dog runs", "the cats", "sat", "the cat sat down"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let got = mbr_scores(&cands(&hyps), &PseudoReferenceSet::new(refs.clone()), &u).unwrap();
    for (i, h) in hyps.iter().enumerate() {
        let want: f64 = refs.iter().map(|r| chrf(h, r, &ChrfConfig::default()).unwrap()).sum::<f64>() / 6.0;
        assert!((got[i] - want).abs() < 1e-12);
    }

    let one = PseudoReferenceSet::new(vec!["cat sat".into()]);
    let two = PseudoReferenceSet::new(vec!["cat sat".into(), "cat sat".into()]);
    let a = mbr_scores(&cands(&hyps), &one, &u).unwrap();
    for (i, h) in hyps.iter().enumerate() {
        assert_eq!(a[i], chrf(h, "cat sat", &ChrfConfig::default()).unwrap());
    }
    assert_eq!(a, mbr_scores(&cands(&hyps), &two, &u).unwrap());
    assert!(matches!(
        mbr_scores(&cands(&hyps), &PseudoReferenceSet::default(), &u),
        Err(DecodeError::EmptyPseudoReferences)
    ));
}

#[test]
fn mbr_affine_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let (h, y) = (rng.gen_range(2..8), rng.gen_range(1..8));
        let m = Matrix::from_vec(h, y, (0..h * y).map(|_| rng.gen_range(0.0..1.0)).collect());
        let (a, b) = (rng.gen_range(0.01..10.0), rng.gen_range(-5.0..5.0));
        let texts: Vec<String> = (0..h).map(|i| i.to_string()).collect();
        let c = CandidateSet::from_texts(Segment::opaque("q"), texts);
        let refs = PseudoReferenceSet::new((0..y).map(|j| j.to_string()).collect());
        let base = mbr_scores(&c, &refs, &MatrixUtility(m.clone())).unwrap();
        let moved = mbr_scores(&c, &refs, &Affine(MatrixUtility(m), a, b)).unwrap();
        assert_eq!(argmax(&base), argmax(&moved));
    }
}

#[test]
fn naive_cbdt() {
    let mem = memory(vec![group("m1", &[("the cat", 0.7)])]);
    let mut s = SimilarityTable::new("sx");
    s.insert("q", "m1", 1.0);
    let got = cbdt_naive_scores(&cands(&["the cat", "a dog"]), &Segment::text("q", "query"), &mem, &s).unwrap();
    assert_eq!(got, vec![0.7, 0.0]);

    s.insert("q", "m1", 1.5);
    assert!(matches!(
        cbdt_naive_scores(&cands(&["the cat"]), &Segment::text("q", "query"), &mem, &s),
        Err(DecodeError::SimilarityOutOfRange { .. })
    ));
}

#[test]
fn naive_cbdt_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pool = ["a", "b", "c", "d", "e"];
    for _ in 0..20 {
        // 10 triplets over 4 groups of sizes 1..=4
        let sizes = [1, 2, 3, 4];
        let groups: Vec<MemoryGroup> = sizes
            .iter()
            .enumerate()
            .map(|(g, &n)| {
                let mut texts = pool.to_vec();
                let entries: Vec<(&str, f64)> = (0..n)
                    .map(|_| (texts.remove(rng.gen_range(0..texts.len())), rng.gen_range(0.0..1.0)))
                    .collect();
                group(&format!("m{g}"), &entries)
            })
            .collect();
        let mem = memory(groups);
        let mut s = SimilarityTable::new("sx");
        let sims: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
        for (g, &v) in sims.iter().enumerate() {
            s.insert("q", format!("m{g}"), v);
        }
        let c = cands(&["a", "c", "z"]);
        let got = cbdt_naive_scores(&c, &Segment::text("q", "query"), &mem, &s).unwrap();
        for (i, h) in c.hypotheses.iter().enumerate() {
            let mut want = 0.0;
            for (g, grp) in mem.groups.iter().enumerate() {
                for e in &grp.entries {
                    if e.hypothesis == h.text {
                        want += sims[g] * e.reward;
                    }
                }
            }
            assert!((got[i] - want).abs() < 1e-12);
        }
        assert_eq!(got[2], 0.0);
    }
}

#[test]
fn naive_cbdt_with_zero_one_utility_counts_reference_matches() {
    // Each group holds its reference among the hypotheses; with the 0-1
    // utility the reward is 1 exactly on the reference.
    let refs = ["the cat", "a dog", "the cat"];
    let hyp_sets = [vec!["the cat", "a cat"], vec!["a dog", "the cat"], vec!["cat", "the cat"]];
    let groups: Vec<MemoryGroup> = refs
        .iter()
        .zip(&hyp_sets)
        .enumerate()
        .map(|(g, (r, hs))| {
            let entries: Vec<(&str, f64)> = hs
                .iter()
                .map(|h| (*h, ExactMatch.score(&UtilityQuery::texts(h, r)).unwrap()))
                .collect();
            group(&format!("m{g}"), &entries)
        })
        .collect();
    let mem = memory(groups);
    let sims = [0.9, 0.4, 0.25];
    let mut s = SimilarityTable::new("sx");
    for (g, &v) in sims.iter().enumerate() {
        s.insert("q", format!("m{g}"), v);
    }
    let c = cands(&["the cat", "a dog", "a cat"]);
    let got = cbdt_naive_scores(&c, &Segment::text("q", "query"), &mem, &s).unwrap();
    let want: Vec<f64> = c
        .hypotheses
        .iter()
        .map(|h| refs.iter().zip(&sims).filter(|(r, _)| **r == h.text).map(|(_, s)| s).sum())
        .collect();
    assert_eq!(want, vec![0.9 + 0.25, 0.4, 0.0]);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn relaxed_cbdt_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = cands(&["h0", "h1", "h2", "h3"]);
    let mem = memory(vec![
        group("g0", &[("x", rng.gen()), ("y", rng.gen())]),
        group("g1", &[("x", rng.gen()), ("z", rng.gen()), ("w", rng.gen())]),
        group("g2", &[("v", rng.gen())]),
    ]);
    let sims: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
    let r = retrieved(&mem, &sims);
    let sy = random_sy(&c, &mem, &mut rng);
    let got = cbdt_scores(&c, &r, &sy, 0.1, 0.1).unwrap();
    let want = cbdt_oracle(&c, &r, &sy, 0.1, 0.1);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-9, "{g} vs {w}");
    }
}

#[test]
fn relaxed_cbdt_input_mass_per_triplet() {
    // Equal raw similarities give every triplet 1/4 of the input-side mass;
    // the output-side softmax then averages within each group, so the three
    // reward-1 entries together contribute 3 · 1/4 · 1/3.
    let c = cands(&["h"]);
    let mem = memory(vec![group("a", &[("x", 1.0), ("y", 1.0), ("z", 1.0)]), group("b", &[("w", 0.0)])]);
    let mut sy = SimilarityTable::new("sy");
    for (g, n) in [("a", 3), ("b", 1)] {
        for j in 0..n {
            sy.insert("q:0", hypothesis_key(g, j), 0.5);
        }
    }
    let got = cbdt_scores(&c, &retrieved(&mem, &[0.3, 0.3]), &sy, 0.01, 0.01).unwrap();
    assert!((got[0] - 0.25).abs() < 1e-12);
}

#[test]
fn relaxed_cbdt_degenerate_memories() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let c = cands(&["h0", "h1", "h2"]);
    let mem = memory(vec![group("g", &[("x", 0.37)])]);
    let sy = random_sy(&c, &mem, &mut rng);
    for v in cbdt_scores(&c, &retrieved(&mem, &[0.2]), &sy, 0.01, 0.01).unwrap() {
        assert!((v - 0.37).abs() < 1e-9);
    }

    let mem = memory((0..5).map(|g| group(&format!("g{g}"), &[("x", 0.6)])).collect());
    let sims: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
    let sy = random_sy(&c, &mem, &mut rng);
    for v in cbdt_scores(&c, &retrieved(&mem, &sims), &sy, 0.01, 0.05).unwrap() {
        assert!((v - 0.6).abs() < 1e-9);
    }

    let empty = RetrievedMemory::from_parts(vec![]);
    assert!(matches!(cbdt_scores(&c, &empty, &sy, 0.1, 0.1), Err(DecodeError::EmptyRetrieved)));
    assert!(cbdt_scores(&c, &retrieved(&mem, &sims), &sy, 0.0, 0.1).is_err());
    assert!(cbdt_scores(&c, &retrieved(&mem, &sims), &sy, 0.1, -1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relaxed_cbdt_agrees_with_oracle(seed in any::<u64>(), h in 1usize..=8, sizes in proptest::collection::vec(1usize..=4, 1..=4), tau_x in 0.05f64..2.0, tau_y in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let texts: Vec<String> = (0..h).map(|i| format!("h{i}")).collect();
        let c = CandidateSet::from_texts(Segment::text("q", "query"), texts);
        let mem = memory(sizes.iter().enumerate().map(|(g, &n)| {
            let entries: Vec<(String, f64)> = (0..n).map(|j| (format!("m{g}-{j}"), rng.gen_range(-1.0..1.0))).collect();
            let refs: Vec<(&str, f64)> = entries.iter().map(|(t, r)| (t.as_str(), *r)).collect();
            group(&format!("g{g}"), &refs)
        }).collect());
        let sims: Vec<f64> = (0..sizes.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sy = random_sy(&c, &mem, &mut rng);
        let r = retrieved(&mem, &sims);
        let got = cbdt_scores(&c, &r, &sy, tau_x, tau_y).unwrap();
        let want = cbdt_oracle(&c, &r, &sy, tau_x, tau_y);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-9);
        }
    }

    #[test]
    fn minmax_bounds(scores in proptest::collection::vec(-1e6f64..1e6, 1..20)) {
        let n = minmax_normalize(&scores);
        prop_assert!(n.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let constant = scores.iter().all(|&s| s == scores[0]);
        if constant {
            prop_assert!(n.iter().all(|&v| v == 0.5));
        } else {
            prop_assert!(n.contains(&0.0) && n.contains(&1.0));
        }
    }

    #[test]
    fn lambda_endpoints(seed in any::<u64>(), h in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Matrix::from_vec(h, h, (0..h * h).map(|_| rng.gen_range(0.0..1.0)).collect());
        let c = CandidateSet::from_texts(Segment::text("q", "query"), (0..h).map(|i| format!("h{i}")));
        let refs = PseudoReferenceSet::from_candidates(&c);
        let mem = memory(vec![
            group("g0", &[("a", rng.gen()), ("b", rng.gen())]),
            group("g1", &[("c", rng.gen())]),
        ]);
        let sy = random_sy(&c, &mem, &mut rng);
        let r = retrieved(&mem, &[rng.gen(), rng.gen()]);
        let u = MatrixUtility(m);
        let mbr = select_mbr(&c, &refs, &u).unwrap().chosen_index;
        let cbdt = select_cbdt(&c, &r, &sy, &DecisionConfig::default()).unwrap().chosen_index;
        for (lambda, want) in [(0.0, mbr), (1.0, cbdt)] {
            let cfg = DecisionConfig { lambda, tau_x: 0.1, tau_y: 0.1, ..Default::default() };
            let pure = if lambda == 0.0 { mbr } else { select_cbdt(&c, &r, &sy, &cfg).unwrap().chosen_index };
            let mixed = select_mbr_cbdt(&c, &refs, &r, &u, &sy, &cfg).unwrap().chosen_index;
            prop_assert_eq!(mixed, pure);
            if lambda == 0.0 {
                prop_assert_eq!(mixed, want);
            }
        }
    }
}

#[test]
fn minmax_examples() {
    assert_eq!(minmax_normalize(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
    assert_eq!(minmax_normalize(&[7.0, 7.0]), vec![0.5, 0.5]);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let v: Vec<f64> = (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    for (got, x) in minmax_normalize(&v).iter().zip(&v) {
        assert!((got - (x - lo) / (hi - lo)).abs() < 1e-15);
    }
}

#[test]
fn mixture_picks_compromise() {
    // mbr prefers 0, cbdt prefers 2, hypothesis 1 is second on both.
    let mbr = [1.0, 0.8, 0.0];
    let cbdt = [0.0, 0.8, 1.0];
    let mixed = mix_scores(&mbr, &cbdt, 0.5);
    assert_eq!(mixed, vec![0.5, 0.8, 0.5]);
    assert_eq!(argmax(&mixed), 1);

    let c = cands(&["h0", "h1", "h2"]);
    let refs = PseudoReferenceSet::new(vec!["r".into()]);
    let u = MatrixUtility(Matrix::from_vec(3, 1, mbr.to_vec()));
    let mem = memory(vec![group("g", &[("a", 0.0), ("b", 1.0)])]);
    // hypothesis i sits near "b" with similarity cbdt[i]
    let mut sy = SimilarityTable::new("sy");
    for (i, &s) in cbdt.iter().enumerate() {
        sy.insert(hypothesis_key("q", i), "g:0", 0.0);
        sy.insert(hypothesis_key("q", i), "g:1", s);
    }
    let r = retrieved(&mem, &[1.0]);
    let cfg = DecisionConfig {
        tau_y: 1.0,
        ..Default::default()
    };
    let d = select_mbr_cbdt(&c, &refs, &r, &u, &sy, &cfg).unwrap();
    let want_cbdt = cbdt_oracle(&c, &r, &sy, cfg.tau_x, cfg.tau_y);
    let want = mix_scores(&mbr, &want_cbdt, 0.5);
    assert_eq!(d.chosen_index, scan_argmax(&want));
    assert_eq!(d.chosen_index, 1);
    assert_eq!(d.scores.keys().collect::<Vec<_>>(), vec!["cbdt", "mbr", "mbr_cbdt"]);
    assert_eq!(argmax(&d.scores["mbr"]), 0);
    assert_eq!(argmax(&d.scores["cbdt"]), 2);
}

#[test]
fn config_validation() {
    assert!(DecisionConfig::default().validate().is_ok());
    let bad = [
        DecisionConfig { tau_x: 0.0, ..Default::default() },
        DecisionConfig { tau_y: -1.0, ..Default::default() },
        DecisionConfig { lambda: 1.5, ..Default::default() },
        DecisionConfig { k: 0, ..Default::default() },
        DecisionConfig {
            pmbr: PmbrConfig { rank: 0, ..Default::default() },
            ..Default::default()
        },
        DecisionConfig {
            pmbr: PmbrConfig { sample_rate: 0.0, ..Default::default() },
            ..Default::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(DecodeError::InvalidConfig(_))), "{cfg:?}");
    }
}

#[test]
fn rule_names_round_trip() {
    for r in Rule::ALL {
        assert_eq!(r.as_str().parse::<Rule>().unwrap(), r);
        assert_eq!(serde_json::to_string(&r).unwrap(), format!("\"{}\"", r.as_str()));
    }
    assert!("beam".parse::<Rule>().is_err());
}

fn random_matrix_cands(h: usize, y: usize, rng: &mut impl Rng) -> (CandidateSet, PseudoReferenceSet, Matrix) {
    let m = Matrix::from_vec(h, y, (0..h * y).map(|_| rng.gen_range(0.0..1.0)).collect());
    let c = CandidateSet::from_texts(Segment::opaque("q"), (0..h).map(|i| format!("h{i}")));
    let refs = PseudoReferenceSet::new((0..y).map(|j| format!("r{j}")).collect());
    (c, refs, m)
}

#[test]
fn pmbr_full_rate_reproduces_mbr() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (c, refs, m) = random_matrix_cands(12, 9, &mut rng);
    let u = MatrixUtility(m);
    let exact = mbr_scores(&c, &refs, &u).unwrap();
    let cfg = PmbrConfig {
        rank: 9,
        sample_rate: 1.0,
        ..Default::default()
    };
    let got = pmbr_scores(&c, &refs, &u, &cfg, 3).unwrap();
    for (g, e) in got.iter().zip(&exact) {
        assert!((g - e).abs() < 1e-4);
    }
}

#[test]
fn pmbr_constant_utility() {
    let c = CandidateSet::from_texts(Segment::opaque("q"), (0..40).map(|i| format!("h{i}")));
    let refs = PseudoReferenceSet::from_candidates(&c);
    let u = MatrixUtility(Matrix::filled(40, 40, 0.42));
    for (rate, rank) in [(1.0 / 8.0, 1), (0.25, 8), (0.5, 3), (1.0, 2)] {
        let cfg = PmbrConfig {
            rank,
            sample_rate: rate,
            ..Default::default()
        };
        for v in pmbr_scores(&c, &refs, &u, &cfg, 11).unwrap() {
            assert!((v - 0.42).abs() < 1e-6, "rate {rate} rank {rank}: {v}");
        }
    }
}

#[test]
fn pmbr_rank_two_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 64;
    let a: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect();
    let b: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect();
    let mut m = Matrix::filled(n, n, 0.0);
    for i in 0..n {
        for j in 0..n {
            m.set(i, j, a[i][0] * b[j][0] + a[i][1] * b[j][1]);
        }
    }
    let exact = m.row_means();
    let c = CandidateSet::from_texts(Segment::opaque("q"), (0..n).map(|i| format!("h{i}")));
    let refs = PseudoReferenceSet::from_candidates(&c);
    let cfg = PmbrConfig {
        rank: 2,
        sample_rate: 0.25,
        ..Default::default()
    };
    let got = pmbr_scores(&c, &refs, &MatrixUtility(m), &cfg, 5).unwrap();
    assert_eq!(argmax(&got), argmax(&exact));
}

#[test]
fn pmbr_calls_utility_once_per_sampled_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (c, refs, m) = random_matrix_cands(32, 32, &mut rng);
    let u = CountingUtility::new(MatrixUtility(m));
    let cfg = PmbrConfig {
        sample_rate: 1.0 / 8.0,
        ..Default::default()
    };
    pmbr_scores(&c, &refs, &u, &cfg, 1).unwrap();
    let sample = pmbr_sample(32, 32, cfg.sample_rate, 1, cfg.max_resample).unwrap();
    assert_eq!(sample.cells.len(), 128);
    assert_eq!(u.calls(), 128);
    assert_eq!(sample_size(32, 32, 1.0 / 64.0), 16);
    assert_eq!(sample_size(3, 3, 0.01), 1);
    assert_eq!(sample_size(3, 3, 1.0), 9);
}

#[test]
fn pmbr_sampling_is_seeded_and_covers() {
    let a = pmbr_sample(20, 30, 0.2, 7, 100).unwrap();
    let b = pmbr_sample(20, 30, 0.2, 7, 100).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.cells, pmbr_sample(20, 30, 0.2, 8, 100).unwrap().cells);
    let mut rows = vec![false; 20];
    let mut cols = vec![false; 30];
    for &(i, j) in &a.cells {
        rows[i] = true;
        cols[j] = true;
    }
    assert!(rows.into_iter().chain(cols).all(|x| x));
    assert!(a.cells.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn pmbr_degenerate_sampling() {
    let err = pmbr_sample(16, 16, 1.0 / 64.0, 0, 100).unwrap_err();
    assert!(matches!(err, DecodeError::DegenerateSampling { .. }));
    assert!(err.to_string().contains("higher sample rate"));
}

#[test]
fn pmbr_cbdt_endpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (c, refs, m) = random_matrix_cands(8, 8, &mut rng);
    let u = MatrixUtility(m);
    let mem = memory(vec![group("g0", &[("a", 0.3), ("b", 0.9)]), group("g1", &[("c", 0.5)])]);
    let sy = random_sy(&c, &mem, &mut rng);
    let r = retrieved(&mem, &[0.4, 0.6]);
    let base = DecisionConfig {
        tau_x: 0.1,
        tau_y: 0.1,
        ..Default::default()
    };
    let one = DecisionConfig {
        lambda: 1.0,
        pmbr: PmbrConfig {
            sample_rate: 0.5,
            ..Default::default()
        },
        ..base
    };
    assert_eq!(
        select_pmbr_cbdt(&c, &refs, &r, &u, &sy, &one).unwrap().chosen_index,
        select_cbdt(&c, &r, &sy, &one).unwrap().chosen_index
    );
    let full = DecisionConfig {
        pmbr: PmbrConfig {
            rank: 8,
            sample_rate: 1.0,
            ..Default::default()
        },
        ..base
    };
    let p = select_pmbr_cbdt(&c, &refs, &r, &u, &sy, &full).unwrap();
    let m = select_mbr_cbdt(&c, &refs, &r, &u, &sy, &full).unwrap();
    assert_eq!(p.chosen_index, m.chosen_index);
    assert_eq!(p.scores["pmbr"], m.scores["mbr"]);
}

#[test]
fn pmbr_cbdt_default_config_matches_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (c, refs, m) = random_matrix_cands(64, 64, &mut rng);
    let u = MatrixUtility(m);
    let mem = memory((0..6).map(|g| group(&format!("g{g}"), &[("a", rng.gen()), ("b", rng.gen())])).collect());
    let sy = random_sy(&c, &mem, &mut rng);
    let sims: Vec<f64> = (0..6).map(|_| rng.gen()).collect();
    let r = retrieved(&mem, &sims);
    let cfg = DecisionConfig {
        pmbr: PmbrConfig {
            sample_rate: 1.0 / 16.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let d = select_pmbr_cbdt(&c, &refs, &r, &u, &sy, &cfg).unwrap();
    let pmbr = pmbr_scores(&c, &refs, &u, &cfg.pmbr, cfg.seed).unwrap();
    let cbdt = cbdt_oracle(&c, &r, &sy, cfg.tau_x, cfg.tau_y);
    assert_eq!(d.scores["pmbr"], pmbr);
    for (a, b) in d.scores["cbdt"].iter().zip(&cbdt) {
        assert!((a - b).abs() < 1e-9);
    }
    assert_eq!(d.chosen_index, scan_argmax(&d.scores["pmbr_cbdt"]));
}

fn decoder_fixture() -> (CandidateSet, Memory, SimilarityTable) {
    let c = cands(&["the cat sat", "a cat sat", "the dog ran", "cats sit"]);
    let mem = memory(vec![
        group("m0", &[("the cat sat", 0.9), ("a cat", 0.4)]),
        group("m1", &[("dogs ran", 0.2)]),
    ]);
    let mut sx = SimilarityTable::new("sx");
    sx.insert("q", "m0", 0.8);
    sx.insert("q", "m1", 0.1);
    (c, mem, sx)
}

#[test]
fn decoder_cost_independence_and_determinism() {
    let (c, mem, sx) = decoder_fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let sy = random_sy(&c, &mem, &mut rng);
    let u = CountingUtility::new(Chrf::default());
    let req = DecodeRequest {
        candidates: &c,
        pseudo_references: None,
        reference: Some("the cat sat"),
    };
    let mut calls = HashMap::new();
    for rule in Rule::ALL {
        if rule == Rule::Qe {
            continue;
        }
        let mut dec = Decoder::new(DecisionConfig {
            rule,
            pmbr: PmbrConfig {
                sample_rate: 0.5,
                rank: 2,
                ..Default::default()
            },
            ..Default::default()
        });
        dec.utility = Some(&u);
        dec.memory = Some(&mem);
        dec.s_x = Some(&sx);
        dec.s_y = Some(&sy);
        u.reset();
        let first = dec.decide(&req).unwrap();
        calls.insert(rule, u.calls());
        let strip = |d: Decision| Decision { timing: Timing::default(), ..d };
        let first = strip(first);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let second = strip(pool.install(|| dec.decide(&req)).unwrap());
        assert_eq!(first, second, "{rule}");
        assert_eq!(first.chosen_text, c.hypotheses[first.chosen_index].text);
        assert!(first.scores.values().all(|s| s.len() == c.len()));
    }
    assert_eq!(calls[&Rule::Cbdt], 0);
    assert_eq!(calls[&Rule::CbdtNaive], 0);
    assert_eq!(calls[&Rule::Map], 0);
    assert_eq!(calls[&Rule::Mbr], 16);
    assert_eq!(calls[&Rule::MbrCbdt], 16);
    assert_eq!(calls[&Rule::Pmbr], 8);
    assert_eq!(calls[&Rule::Oracle], 4);
}

#[test]
fn decoder_reports_missing_dependencies() {
    let (c, mem, _) = decoder_fixture();
    let req = DecodeRequest {
        candidates: &c,
        pseudo_references: None,
        reference: None,
    };
    let mut dec = Decoder::new(DecisionConfig {
        rule: Rule::Cbdt,
        ..Default::default()
    });
    dec.memory = Some(&mem);
    assert!(matches!(dec.decide(&req), Err(DecodeError::MissingInput { .. })));
    let dec = Decoder::new(DecisionConfig {
        rule: Rule::Oracle,
        ..Default::default()
    });
    assert!(matches!(dec.decide(&req), Err(DecodeError::MissingInput { .. })));
}
