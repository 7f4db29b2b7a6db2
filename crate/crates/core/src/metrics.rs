//! Detection metrics: AUROC via rank statistics, FPR at a target TPR, and
//! the combined `AUROC - FPR95` selection score.
//!
//! ID samples are the positive class; a sample is declared ID when its score
//! is `>= λ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TPR: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auroc: f64,
    pub fpr95: f64,
    pub lambda: f64,
    pub combined: f64,
}

fn check_non_empty(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() {
        return Err(Error::Empty("no ID scores"));
    }
    if ood.is_empty() {
        return Err(Error::Empty("no OOD scores"));
    }
    Ok(())
}

/// Probability that a random ID score beats a random OOD score, ties
/// counting one half. Mann-Whitney U with average ranks, O((n+m) log(n+m)).
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_non_empty(id_scores, ood_scores)?;
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut id_rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j share their average
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let n_id = all[i..j].iter().filter(|(_, is_id)| *is_id).count();
        id_rank_sum += avg_rank * n_id as f64;
        i = j;
    }

    let n = id_scores.len() as f64;
    let m = ood_scores.len() as f64;
    let u = id_rank_sum - n * (n + 1.0) / 2.0;
    Ok((u / (n * m)).clamp(0.0, 1.0))
}

/// Exhaustive O(n·m) pairwise AUROC. Reference implementation for tests and
/// small inputs.
pub fn auroc_oracle(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_non_empty(id_scores, ood_scores)?;
    let mut wins = 0.0;
    for &a in id_scores {
        for &b in ood_scores {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (id_scores.len() as f64 * ood_scores.len() as f64))
}

/// Returns `(fpr, λ)` where λ is the largest ID score such that at least
/// `tpr_target` of ID scores are `>= λ`, and fpr is the share of OOD scores
/// `>= λ`.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr_target: f64) -> Result<(f64, f64)> {
    check_non_empty(id_scores, ood_scores)?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "tpr target must lie in (0, 1], got {tpr_target}"
        )));
    }
    let mut id = id_scores.to_vec();
    id.sort_by(|a, b| b.total_cmp(a));
    let n = id.len() as f64;

    let mut lambda = id[id.len() - 1];
    let mut i = 0;
    while i < id.len() {
        let mut j = i + 1;
        while j < id.len() && id[j] == id[i] {
            j += 1;
        }
        // j scores are >= id[i]
        if j as f64 / n >= tpr_target {
            lambda = id[i];
            break;
        }
        i = j;
    }

    let false_pos = ood_scores.iter().filter(|&&s| s >= lambda).count();
    Ok((false_pos as f64 / ood_scores.len() as f64, lambda))
}

pub fn eval_pair(id_scores: &[f64], ood_scores: &[f64]) -> Result<EvalResult> {
    let auroc = auroc(id_scores, ood_scores)?;
    let (fpr95, lambda) = fpr_at_tpr(id_scores, ood_scores, DEFAULT_TPR)?;
    Ok(EvalResult {
        auroc,
        fpr95,
        lambda,
        combined: auroc - fpr95,
    })
}
