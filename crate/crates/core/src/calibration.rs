//! Fitting ATLI parameters: per-rank standardization, per-rank signs, and
//! the effective rank set `M` chosen by how well each rank separates
//! training logits from pseudo-OOD logits.
//!
//! Ranks are 1-based throughout the public API (rank 1 is the maximum
//! logit); vectors indexed by rank store rank `i` at position `i - 1`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{auroc, eval_pair};
use crate::tensor_io::SortedLogitMatrix;

/// Standard deviations below this are treated as a constant column.
pub const SIGMA_FLOOR: f64 = 1e-12;
pub const DEFAULT_P: f64 = 0.10;
/// Default number of training rows used for calibration.
pub const DEFAULT_D: usize = 100_000;
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StandardizationStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sigma_clamped: Vec<bool>,
    pub n_fit: usize,
}

impl StandardizationStats {
    /// `(x - μ_i) / σ_i` for a single sorted row.
    pub fn standardize_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mu.iter().zip(&self.sigma))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

/// One `±1` entry per rank. Rank 1 is always `+1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignVector(pub Vec<i8>);

impl SignVector {
    pub fn all_positive(n_classes: usize) -> Self {
        SignVector(vec![1; n_classes])
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }
}

/// Which signs to plug into the score; `Adaptive` keeps the calibrated ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    Adaptive,
    AllPositive,
    AllNegative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtliParams {
    pub n_classes: usize,
    pub stats: StandardizationStats,
    pub signs: SignVector,
    /// Sorted, 1-based, never contains rank 1.
    pub m_set: Vec<usize>,
    pub p: f64,
    pub pseudo_mu: Vec<f64>,
    pub rank_scores: Vec<f64>,
    pub seed: u64,
    pub d_used: usize,
}

/// Sorted training logits (already subsampled to D rows) and sorted
/// pseudo-OOD logits.
#[derive(Debug, Clone)]
pub struct CalibrationInput {
    train_sorted: SortedLogitMatrix,
    pseudo_sorted: SortedLogitMatrix,
    seed: u64,
}

impl CalibrationInput {
    pub fn new(train_sorted: SortedLogitMatrix, pseudo_sorted: SortedLogitMatrix) -> Result<Self> {
        if train_sorted.n_classes() != pseudo_sorted.n_classes() {
            return Err(Error::ClassMismatch {
                expected: train_sorted.n_classes(),
                found: pseudo_sorted.n_classes(),
            });
        }
        Ok(CalibrationInput {
            train_sorted,
            pseudo_sorted,
            seed: 0,
        })
    }

    /// Like [`CalibrationInput::new`] but keeps a seeded uniform subsample of
    /// at most `d` training rows.
    pub fn subsampled(
        train_sorted: &SortedLogitMatrix,
        pseudo_sorted: SortedLogitMatrix,
        d: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut input = Self::new(train_sorted.subsample(d, seed)?, pseudo_sorted)?;
        input.seed = seed;
        Ok(input)
    }

    pub fn train(&self) -> &SortedLogitMatrix {
        &self.train_sorted
    }

    pub fn pseudo(&self) -> &SortedLogitMatrix {
        &self.pseudo_sorted
    }
}

/// Mean of every rank column.
pub fn rank_means(sorted: &SortedLogitMatrix) -> Vec<f64> {
    let c = sorted.n_classes();
    let mut sums = vec![0.0; c];
    for r in 0..sorted.n_samples() {
        for (s, x) in sums.iter_mut().zip(sorted.row(r)) {
            *s += x;
        }
    }
    let n = sorted.n_samples() as f64;
    sums.into_iter().map(|s| s / n).collect()
}

/// Per-rank mean and population standard deviation of the training logits.
pub fn fit_standardization(train_sorted: &SortedLogitMatrix) -> Result<StandardizationStats> {
    let n = train_sorted.n_samples();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "standardization needs at least 2 samples, got {n}"
        )));
    }
    let mu = rank_means(train_sorted);
    let mut sq = vec![0.0; mu.len()];
    for r in 0..n {
        for ((acc, x), m) in sq.iter_mut().zip(train_sorted.row(r)).zip(&mu) {
            let d = x - m;
            *acc += d * d;
        }
    }
    let mut sigma_clamped = vec![false; mu.len()];
    let sigma = sq
        .into_iter()
        .zip(sigma_clamped.iter_mut())
        .map(|(s, clamped)| {
            let sd = (s / n as f64).sqrt();
            if sd < SIGMA_FLOOR {
                *clamped = true;
                1.0
            } else {
                sd
            }
        })
        .collect();
    Ok(StandardizationStats {
        mu,
        sigma,
        sigma_clamped,
        n_fit: n,
    })
}

/// `+1` where the training mean is at least the pseudo-OOD mean, else `-1`.
pub fn signs_from_means(train_mu: &[f64], pseudo_mu: &[f64]) -> SignVector {
    let mut signs: Vec<i8> = train_mu
        .iter()
        .zip(pseudo_mu)
        .map(|(m, mp)| if m >= mp { 1 } else { -1 })
        .collect();
    if let Some(first) = signs.first_mut() {
        *first = 1;
    }
    SignVector(signs)
}

pub fn determine_signs(
    train_sorted: &SortedLogitMatrix,
    pseudo_sorted: &SortedLogitMatrix,
) -> Result<SignVector> {
    check_same_c(train_sorted, pseudo_sorted)?;
    Ok(signs_from_means(
        &rank_means(train_sorted),
        &rank_means(pseudo_sorted),
    ))
}

/// `AUROC - FPR95` of every rank column, with training rows as ID and
/// pseudo-OOD rows as OOD, after multiplying both columns by the rank's sign.
pub fn per_rank_detection_scores(
    train_sorted: &SortedLogitMatrix,
    pseudo_sorted: &SortedLogitMatrix,
    signs: &SignVector,
) -> Result<Vec<f64>> {
    check_same_c(train_sorted, pseudo_sorted)?;
    if signs.0.len() != train_sorted.n_classes() {
        return Err(Error::ClassMismatch {
            expected: train_sorted.n_classes(),
            found: signs.0.len(),
        });
    }
    (1..=train_sorted.n_classes())
        .into_par_iter()
        .map(|rank| {
            let s = signs.0[rank - 1] as f64;
            let id: Vec<f64> = train_sorted
                .rank_column(rank)
                .into_iter()
                .map(|x| s * x)
                .collect();
            let ood: Vec<f64> = pseudo_sorted
                .rank_column(rank)
                .into_iter()
                .map(|x| s * x)
                .collect();
            eval_pair(&id, &ood).map(|r| r.combined)
        })
        .collect()
}

/// `round(p · C)` clipped to `[0, C - 1]`.
pub fn m_size(p: f64, n_classes: usize) -> usize {
    ((p * n_classes as f64).round() as usize).min(n_classes.saturating_sub(1))
}

/// The `round(p·C)` ranks in `2..=C` with the highest scores. Equal scores
/// prefer the smaller rank. Returned ascending.
pub fn select_m(rank_scores: &[f64], p: f64, n_classes: usize) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "p must lie in [0, 1], got {p}"
        )));
    }
    if rank_scores.len() != n_classes {
        return Err(Error::ClassMismatch {
            expected: n_classes,
            found: rank_scores.len(),
        });
    }
    let mut candidates: Vec<usize> = (2..=n_classes).collect();
    candidates.sort_by(|&a, &b| {
        rank_scores[b - 1]
            .total_cmp(&rank_scores[a - 1])
            .then(a.cmp(&b))
    });
    candidates.truncate(m_size(p, n_classes));
    candidates.sort_unstable();
    Ok(candidates)
}

/// Full setup phase with sign-oriented rank scores.
pub fn calibrate(input: &CalibrationInput, p: f64) -> Result<AtliParams> {
    calibrate_with(input, p, true)
}

/// Setup phase. With `orient = false` the rank scores used for selecting `M`
/// are computed on raw (unsigned) columns.
pub fn calibrate_with(input: &CalibrationInput, p: f64, orient: bool) -> Result<AtliParams> {
    let train = &input.train_sorted;
    let pseudo = &input.pseudo_sorted;
    let n_classes = train.n_classes();

    let stats = fit_standardization(train)?;
    let pseudo_mu = rank_means(pseudo);
    let signs = signs_from_means(&stats.mu, &pseudo_mu);
    let rank_scores = if orient {
        per_rank_detection_scores(train, pseudo, &signs)?
    } else {
        per_rank_detection_scores(train, pseudo, &SignVector::all_positive(n_classes))?
    };
    let m_set = select_m(&rank_scores, p, n_classes)?;

    Ok(AtliParams {
        n_classes,
        d_used: train.n_samples(),
        stats,
        signs,
        m_set,
        p,
        pseudo_mu,
        rank_scores,
        seed: input.seed,
    })
}

impl AtliParams {
    /// Same calibration with `M` reselected for a different fraction.
    pub fn with_p(&self, p: f64) -> Result<AtliParams> {
        Ok(AtliParams {
            m_set: select_m(&self.rank_scores, p, self.n_classes)?,
            p,
            ..self.clone()
        })
    }

    /// Same calibration with the rank signs forced (rank 1 stays `+1`).
    pub fn with_sign_mode(&self, mode: SignMode) -> AtliParams {
        let forced = match mode {
            SignMode::Adaptive => return self.clone(),
            SignMode::AllPositive => 1,
            SignMode::AllNegative => -1,
        };
        let mut signs = vec![forced; self.n_classes];
        signs[0] = 1;
        AtliParams {
            signs: SignVector(signs),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.n_classes;
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if c < 2 {
            return bad(format!("n_classes must be >= 2, got {c}"));
        }
        for (name, len) in [
            ("mu", self.stats.mu.len()),
            ("sigma", self.stats.sigma.len()),
            ("sigma_clamped", self.stats.sigma_clamped.len()),
            ("signs", self.signs.0.len()),
            ("pseudo_mu", self.pseudo_mu.len()),
            ("rank_scores", self.rank_scores.len()),
        ] {
            if len != c {
                return bad(format!("{name} has length {len}, expected {c}"));
            }
        }
        if !(0.0..=1.0).contains(&self.p) {
            return bad(format!("p = {} outside [0, 1]", self.p));
        }
        if self.signs.0.iter().any(|s| *s != 1 && *s != -1) {
            return bad("signs must be +1 or -1".into());
        }
        if self.signs.0[0] != 1 {
            return bad("sign of rank 1 must be +1".into());
        }
        if self
            .stats
            .sigma
            .iter()
            .any(|s| !(s.is_finite() && *s > 0.0))
        {
            return bad("sigma entries must be positive and finite".into());
        }
        if self.stats.mu.iter().any(|m| !m.is_finite()) {
            return bad("mu entries must be finite".into());
        }
        if let Some(&r) = self.m_set.iter().find(|&&r| r < 2 || r > c) {
            return bad(format!(
                "m_set contains rank {r}, allowed ranks are 2..={c}"
            ));
        }
        if self.m_set.windows(2).any(|w| w[0] >= w[1]) {
            return bad("m_set must be strictly increasing".into());
        }
        let expected = m_size(self.p, c);
        if self.m_set.len() != expected {
            return bad(format!(
                "|m_set| = {} but round(p * C) = {expected} for p = {}, C = {c}",
                self.m_set.len(),
                self.p
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(&ParamsFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<AtliParams> {
        let file: ParamsFile = serde_json::from_str(text)?;
        if file.version != PARAMS_VERSION {
            return Err(Error::InvalidParams(format!(
                "unsupported params version {}",
                file.version
            )));
        }
        let params = AtliParams::from(file);
        params.validate()?;
        Ok(params)
    }
}

pub fn save_params(params: &AtliParams, path: &Path) -> Result<()> {
    fs::write(path, params.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<AtliParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    AtliParams::from_json(&text)
}

/// On-disk layout of calibrated parameters.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    version: u32,
    n_classes: usize,
    p: f64,
    m_set: Vec<usize>,
    signs: Vec<i8>,
    mu: Vec<f64>,
    sigma: Vec<f64>,
    sigma_clamped: Vec<bool>,
    pseudo_mu: Vec<f64>,
    rank_scores: Vec<f64>,
    seed: u64,
    d_used: usize,
}

impl From<&AtliParams> for ParamsFile {
    fn from(p: &AtliParams) -> Self {
        ParamsFile {
            version: PARAMS_VERSION,
            n_classes: p.n_classes,
            p: p.p,
            m_set: p.m_set.clone(),
            signs: p.signs.0.clone(),
            mu: p.stats.mu.clone(),
            sigma: p.stats.sigma.clone(),
            sigma_clamped: p.stats.sigma_clamped.clone(),
            pseudo_mu: p.pseudo_mu.clone(),
            rank_scores: p.rank_scores.clone(),
            seed: p.seed,
            d_used: p.d_used,
        }
    }
}

impl From<ParamsFile> for AtliParams {
    fn from(f: ParamsFile) -> Self {
        AtliParams {
            n_classes: f.n_classes,
            stats: StandardizationStats {
                mu: f.mu,
                sigma: f.sigma,
                sigma_clamped: f.sigma_clamped,
                n_fit: f.d_used,
            },
            signs: SignVector(f.signs),
            m_set: f.m_set,
            p: f.p,
            pseudo_mu: f.pseudo_mu,
            rank_scores: f.rank_scores,
            seed: f.seed,
            d_used: f.d_used,
        }
    }
}

/// One row of the per-rank analysis table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankAnalysisRow {
    pub rank: usize,
    /// AUROC of the raw rank column, no sign applied.
    pub raw_auroc: f64,
    pub sign: i8,
    /// `AUROC - FPR95` after orienting by `sign`.
    pub oriented_score: f64,
}

/// Per-rank separability of two sorted logit sets (ID first).
pub fn rank_analysis(
    id_sorted: &SortedLogitMatrix,
    ood_sorted: &SortedLogitMatrix,
) -> Result<Vec<RankAnalysisRow>> {
    let signs = determine_signs(id_sorted, ood_sorted)?;
    let oriented = per_rank_detection_scores(id_sorted, ood_sorted, &signs)?;
    (1..=id_sorted.n_classes())
        .into_par_iter()
        .map(|rank| {
            Ok(RankAnalysisRow {
                rank,
                raw_auroc: auroc(&id_sorted.rank_column(rank), &ood_sorted.rank_column(rank))?,
                sign: signs.0[rank - 1],
                oriented_score: oriented[rank - 1],
            })
        })
        .collect()
}

fn check_same_c(a: &SortedLogitMatrix, b: &SortedLogitMatrix) -> Result<()> {
    if a.n_classes() != b.n_classes() {
        return Err(Error::ClassMismatch {
            expected: a.n_classes(),
            found: b.n_classes(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::{Matrix, Provenance};

    fn sorted(rows: &[&[f64]]) -> SortedLogitMatrix {
        SortedLogitMatrix::from_presorted(Matrix::from_rows(rows).unwrap(), Provenance::Train)
            .unwrap()
    }

    #[test]
    fn standardization_examples() {
        let stats = fit_standardization(&sorted(&[&[5.0, 1.0], &[5.0, 3.0]])).unwrap();
        assert_eq!(stats.mu, vec![5.0, 2.0]);
        assert_eq!(stats.sigma, vec![1.0, 1.0]);
        assert_eq!(stats.sigma_clamped, vec![true, false]);
        assert_eq!(stats.n_fit, 2);

        let stats = fit_standardization(&sorted(&[&[5.0, 0.0], &[5.0, 0.0], &[5.0, 0.0]])).unwrap();
        assert_eq!(stats.mu[0], 5.0);
        assert_eq!(stats.sigma[0], 1.0);
        assert!(stats.sigma_clamped[0]);

        assert!(fit_standardization(&sorted(&[&[1.0, 0.0]])).is_err());
    }

    #[test]
    fn sign_rule_examples() {
        let s = signs_from_means(&[9.0, 0.5, 0.1, 0.4], &[1.0, 0.3, 0.9, 0.4]);
        assert_eq!(s.0, vec![1, 1, -1, 1]);
        // rank 1 is forced positive even when its mean is lower
        assert_eq!(signs_from_means(&[0.0, 0.0], &[1.0, 1.0]).0, vec![1, -1]);
    }

    #[test]
    fn determine_signs_rejects_class_mismatch() {
        let a = sorted(&[&[2.0, 1.0]]);
        let b = sorted(&[&[3.0, 2.0, 1.0]]);
        assert!(matches!(
            determine_signs(&a, &b),
            Err(Error::ClassMismatch { .. })
        ));
    }

    #[test]
    fn per_rank_score_examples() {
        // rank 2: train {2,3}, pseudo {0,1}
        let train = sorted(&[&[10.0, 2.0], &[10.0, 3.0]]);
        let pseudo = sorted(&[&[10.0, 0.0], &[10.0, 1.0]]);
        let s = per_rank_detection_scores(&train, &pseudo, &SignVector(vec![1, 1])).unwrap();
        assert_eq!(s[1], 1.0);
        // rank 1: identical constant columns
        assert_eq!(s[0], -0.5);

        // rank 2: train {0,1}, pseudo {2,3}; sign rule flips it
        let train = sorted(&[&[10.0, 0.0], &[10.0, 1.0]]);
        let pseudo = sorted(&[&[10.0, 2.0], &[10.0, 3.0]]);
        let signs = determine_signs(&train, &pseudo).unwrap();
        assert_eq!(signs.0, vec![1, -1]);
        let s = per_rank_detection_scores(&train, &pseudo, &signs).unwrap();
        assert_eq!(s[1], 1.0);
    }

    #[test]
    fn select_m_examples() {
        assert!(select_m(&[0.0; 10], 0.0, 10).unwrap().is_empty());

        let mut scores = vec![5.0, 0.9, 0.1, 0.8, 0.0, -0.1, -0.2, -0.3, -0.4, -0.5];
        assert_eq!(select_m(&scores, 0.2, 10).unwrap(), vec![2, 4]);
        // rank 1 never selected even with the top score
        scores[0] = 100.0;
        assert!(!select_m(&scores, 1.0, 10).unwrap().contains(&1));
        assert_eq!(select_m(&scores, 1.0, 10).unwrap().len(), 9);

        assert_eq!(m_size(0.10, 1000), 100);
        assert_eq!(select_m(&vec![0.0; 1000], 0.10, 1000).unwrap().len(), 100);

        assert!(select_m(&scores, 1.1, 10).is_err());
        assert!(select_m(&scores, -0.1, 10).is_err());
    }

    #[test]
    fn select_m_ties_prefer_small_ranks() {
        assert_eq!(select_m(&[0.0; 6], 0.5, 6).unwrap(), vec![2, 3, 4]);
    }

    #[test]
    fn params_validation() {
        let train = sorted(&[&[3.0, 2.0, 1.0], &[4.0, 2.5, 0.0], &[5.0, 1.0, 0.5]]);
        let pseudo = sorted(&[&[2.0, 1.9, 1.8], &[1.0, 0.5, 0.2]]);
        let input = CalibrationInput::new(train, pseudo).unwrap();
        let params = calibrate(&input, 0.34).unwrap();
        assert_eq!(params.m_set.len(), 1);
        params.validate().unwrap();

        let mut bad = params.clone();
        bad.m_set = vec![1];
        assert!(bad.validate().is_err());

        let mut bad = params.clone();
        bad.m_set = vec![];
        assert!(bad.validate().is_err());

        let mut bad = params.clone();
        bad.signs.0[0] = -1;
        assert!(bad.validate().is_err());

        let mut bad = params.clone();
        bad.stats.sigma[1] = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sign_modes_and_p_reselection() {
        let train = sorted(&[&[3.0, 2.0, 1.0], &[4.0, 2.5, 0.0], &[5.0, 1.0, 0.5]]);
        let pseudo = sorted(&[&[2.0, 1.9, 1.8], &[1.0, 0.5, 0.2]]);
        let params = calibrate(&CalibrationInput::new(train, pseudo).unwrap(), 1.0).unwrap();
        assert_eq!(
            params.with_sign_mode(SignMode::AllNegative).signs.0,
            vec![1, -1, -1]
        );
        assert_eq!(
            params.with_sign_mode(SignMode::AllPositive).signs.0,
            vec![1, 1, 1]
        );
        assert_eq!(params.with_sign_mode(SignMode::Adaptive), params);
        let p0 = params.with_p(0.0).unwrap();
        assert!(p0.m_set.is_empty());
        assert_eq!(p0.rank_scores, params.rank_scores);
    }

    #[test]
    fn rank_analysis_finds_separating_rank() {
        // rank 3 separates perfectly, ranks 1-2 are identical
        let id = sorted(&[&[5.0, 4.0, 3.0], &[5.0, 4.0, 3.5]]);
        let ood = sorted(&[&[5.0, 4.0, 1.0], &[5.0, 4.0, 0.5]]);
        let rows = rank_analysis(&id, &ood).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].raw_auroc, 1.0);
        assert_eq!(rows[0].raw_auroc, 0.5);
        assert_eq!(rows[2].oriented_score, 1.0);
    }
}
