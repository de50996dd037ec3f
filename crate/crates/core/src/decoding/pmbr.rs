//! Sampled MBR: evaluate the utility on a random subset of matrix cells and
//! fill in the rest with a low-rank model `a_ij ≈ u_i · v_j`, optionally plus
//! a global offset, fitted by alternating least squares.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::metrics::{Matrix, Utility, UtilityQuery};

use super::{check_finite, CandidateSet, DecodeError, PmbrConfig, PseudoReferenceSet};

/// Observed cells of a `rows × cols` matrix in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PmbrSample {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<(usize, usize)>,
    /// Draws needed before every row and column was covered.
    pub attempts: usize,
}

/// Number of cells sampled at `rate`: ceil(rate · cells), at least one.
pub fn sample_size(rows: usize, cols: usize, rate: f64) -> usize {
    let cells = rows * cols;
    ((rate * cells as f64).ceil() as usize).clamp(1, cells)
}

/// Draws cells uniformly without replacement, redrawing until every row and
/// column holds at least one cell.
pub fn pmbr_sample(rows: usize, cols: usize, rate: f64, seed: u64, max_resample: usize) -> Result<PmbrSample, DecodeError> {
    let m = sample_size(rows, cols, rate);
    let attempts = max_resample + 1;
    let degenerate = DecodeError::DegenerateSampling { rate, attempts };
    if m < rows.max(cols) {
        return Err(degenerate);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 1..=attempts {
        let mut flat = index::sample(&mut rng, rows * cols, m).into_vec();
        flat.sort_unstable();
        let mut row_seen = vec![false; rows];
        let mut col_seen = vec![false; cols];
        for &c in &flat {
            row_seen[c / cols] = true;
            col_seen[c % cols] = true;
        }
        if row_seen.iter().all(|&b| b) && col_seen.iter().all(|&b| b) {
            return Ok(PmbrSample {
                rows,
                cols,
                cells: flat.into_iter().map(|c| (c / cols, c % cols)).collect(),
                attempts: attempt,
            });
        }
    }
    Err(degenerate)
}

struct Fit {
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    mu: f64,
    objective: f64,
}

fn residual_sums(by_row: &[Vec<(usize, f64)>], u: &DMatrix<f64>, v: &DMatrix<f64>, mu: f64) -> (f64, f64) {
    let mut sum = 0.0;
    let mut squares = 0.0;
    for (i, cells) in by_row.iter().enumerate() {
        for &(j, a) in cells {
            let e = a - mu - u.row(i).dot(&v.row(j));
            sum += e;
            squares += e * e;
        }
    }
    (sum, squares)
}

/// ALS on Σ (a − μ − u_i·v_j)² + l2·(‖U‖² + ‖V‖²). With `mu` given, μ is
/// reset to the mean residual after every sweep; otherwise it stays 0.
fn fit(by_row: &[Vec<(usize, f64)>], by_col: &[Vec<(usize, f64)>], mut u: DMatrix<f64>, mut v: DMatrix<f64>, mu: Option<f64>, cfg: &PmbrConfig) -> Fit {
    let count: usize = by_row.iter().map(Vec::len).sum();
    let mut m = mu.unwrap_or(0.0);
    for _ in 0..cfg.iterations {
        solve_factors(&mut u, &v, by_row, m, cfg.l2);
        solve_factors(&mut v, &u, by_col, m, cfg.l2);
        if mu.is_some() {
            m += residual_sums(by_row, &u, &v, m).0 / count as f64;
        }
    }
    let sse = residual_sums(by_row, &u, &v, m).1;
    let objective = sse + cfg.l2 * (u.norm_squared() + v.norm_squared());
    Fit { u, v, mu: m, objective }
}

/// Completes a partially observed matrix. Observed cells are kept as given;
/// the others come from the fitted model. Every row and column must hold at
/// least one observation.
///
/// Two fits share the factor initialization: plain U·Vᵀ, and U·Vᵀ plus a
/// global offset μ started at the observed mean. The lower objective wins.
/// The first recovers exactly low-rank matrices, the second constant ones
/// despite the ridge shrinkage.
pub fn complete_low_rank(rows: usize, cols: usize, observed: &[(usize, usize, f64)], cfg: &PmbrConfig, seed: u64) -> Matrix {
    let r = cfg.rank;
    let mut by_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); rows];
    let mut by_col: Vec<Vec<(usize, f64)>> = vec![Vec::new(); cols];
    for &(i, j, a) in observed {
        by_row[i].push((j, a));
        by_col[j].push((i, a));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut init = |n: usize| DMatrix::<f64>::from_fn(n, r, |_, _| cfg.init_scale * rng.sample::<f64, _>(StandardNormal));
    let u = init(rows);
    let v = init(cols);
    let mean = observed.iter().map(|o| o.2).sum::<f64>() / observed.len() as f64;
    let zero = fit(&by_row, &by_col, u.clone(), v.clone(), None, cfg);
    let centered = fit(&by_row, &by_col, u, v, Some(mean), cfg);
    let best = if centered.objective < zero.objective { centered } else { zero };

    let mut out = Matrix::filled(rows, cols, 0.0);
    for i in 0..rows {
        for j in 0..cols {
            out.set(i, j, best.mu + best.u.row(i).dot(&best.v.row(j)));
        }
    }
    for &(i, j, a) in observed {
        out.set(i, j, a);
    }
    out
}

/// Ridge solve of each row of `target` against the fixed factors `other`.
fn solve_factors(target: &mut DMatrix<f64>, other: &DMatrix<f64>, obs: &[Vec<(usize, f64)>], mu: f64, l2: f64) {
    let r = target.ncols();
    let mut gram = DMatrix::<f64>::zeros(r, r);
    let mut rhs = DVector::<f64>::zeros(r);
    for (i, cells) in obs.iter().enumerate() {
        gram.fill_with_identity();
        gram *= l2;
        rhs.fill(0.0);
        for &(j, a) in cells {
            for p in 0..r {
                let fp = other[(j, p)];
                rhs[p] += fp * (a - mu);
                for q in 0..r {
                    gram[(p, q)] += fp * other[(j, q)];
                }
            }
        }
        let x = match gram.clone().cholesky() {
            Some(c) => c.solve(&rhs),
            // l2 = 0 with too few observations: least-norm solution
            None => gram.clone().pseudo_inverse(1e-12).map(|p| p * &rhs).unwrap_or_else(|_| DVector::zeros(r)),
        };
        for p in 0..r {
            target[(i, p)] = x[p];
        }
    }
}

/// Row means of the completed utility matrix. The utility is called exactly
/// once per sampled cell.
pub fn pmbr_scores<U: Utility + ?Sized>(
    cands: &CandidateSet,
    refs: &PseudoReferenceSet,
    u: &U,
    cfg: &PmbrConfig,
    seed: u64,
) -> Result<Vec<f64>, DecodeError> {
    cands.validate()?;
    if refs.is_empty() {
        return Err(DecodeError::EmptyPseudoReferences);
    }
    if cfg.rank == 0 || !(cfg.sample_rate > 0.0 && cfg.sample_rate <= 1.0) {
        return Err(DecodeError::InvalidConfig("pmbr needs rank >= 1 and a sample rate in (0, 1]".into()));
    }
    let (rows, cols) = (cands.len(), refs.len());
    let sample = pmbr_sample(rows, cols, cfg.sample_rate, seed, cfg.max_resample)?;
    let observed = sample
        .cells
        .par_iter()
        .map(|&(i, j)| {
            let value = u.score(&UtilityQuery {
                input_id: &cands.input.id,
                hyp: &cands.hypotheses[i].text,
                hyp_index: i,
                reference: &refs.texts[j],
                ref_index: j,
            })?;
            Ok((i, j, value))
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| DecodeError::Utility {
            input: cands.input.id.clone(),
            source,
        })?;
    let scores = complete_low_rank(rows, cols, &observed, cfg, seed).row_means();
    check_finite("pmbr", &scores)?;
    Ok(scores)
}
