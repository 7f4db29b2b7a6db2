//! Scoring functions. Every score is oriented so that higher means more
//! in-distribution.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::calibration::AtliParams;
use crate::error::{Error, Result};
use crate::tensor_io::{LogitMatrix, SortedLogitMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method", content = "rank")]
pub enum Method {
    Msp,
    MaxLogit,
    Energy,
    Atli,
    RankK(usize),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Msp => f.write_str("msp"),
            Method::MaxLogit => f.write_str("maxlogit"),
            Method::Energy => f.write_str("energy"),
            Method::Atli => f.write_str("atli"),
            Method::RankK(k) => write!(f, "rank_{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub values: Vec<f64>,
    pub method: Method,
}

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Energy temperature, strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(t: f64) -> Result<Self> {
        if t > 0.0 && t.is_finite() {
            Ok(Temperature(t))
        } else {
            Err(Error::InvalidArgument(format!(
                "temperature must be a positive finite number, got {t}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature(1.0)
    }
}

fn row_max(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `log Σ exp(x)` evaluated around the maximum.
pub fn logsumexp(row: &[f64]) -> f64 {
    let m = row_max(row);
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Maximum softmax probability, `exp(max) / Σ exp`.
pub fn score_msp(logits: &LogitMatrix) -> ScoreVector {
    let values = logits
        .iter_rows()
        .map(|row| {
            let m = row_max(row);
            1.0 / row.iter().map(|&x| (x - m).exp()).sum::<f64>()
        })
        .collect();
    ScoreVector {
        values,
        method: Method::Msp,
    }
}

pub fn score_maxlogit(logits: &LogitMatrix) -> ScoreVector {
    ScoreVector {
        values: logits.iter_rows().map(row_max).collect(),
        method: Method::MaxLogit,
    }
}

/// `T · log Σ exp(f / T)`.
pub fn score_energy(logits: &LogitMatrix, temp: Temperature) -> ScoreVector {
    let t = temp.value();
    let mut scaled = Vec::with_capacity(logits.n_classes());
    let values = logits
        .iter_rows()
        .map(|row| {
            scaled.clear();
            scaled.extend(row.iter().map(|&x| x / t));
            t * logsumexp(&scaled)
        })
        .collect();
    ScoreVector {
        values,
        method: Method::Energy,
    }
}

/// The k-th largest logit (1-based `k`).
pub fn score_rank_k(sorted: &SortedLogitMatrix, k: usize) -> Result<ScoreVector> {
    if k == 0 || k > sorted.n_classes() {
        return Err(Error::InvalidArgument(format!(
            "rank {k} outside 1..={}",
            sorted.n_classes()
        )));
    }
    Ok(ScoreVector {
        values: sorted.rank_column(k),
        method: Method::RankK(k),
    })
}

/// Standardized top-1 logit plus the sign-weighted mean of the standardized
/// logits at the calibrated ranks.
pub fn score_atli(sorted: &SortedLogitMatrix, params: &AtliParams) -> Result<ScoreVector> {
    let c = params.n_classes;
    if sorted.n_classes() != c {
        return Err(Error::ClassMismatch {
            expected: c,
            found: sorted.n_classes(),
        });
    }
    if let Some(&bad) = params.m_set.iter().find(|&&i| i < 2 || i > c) {
        return Err(Error::InvalidParams(format!(
            "rank set contains {bad}, must lie in 2..={c}"
        )));
    }
    let mu = &params.stats.mu;
    let sigma = &params.stats.sigma;
    let signs = &params.signs.0;
    let m_size = params.m_set.len() as f64;

    let values = (0..sorted.n_samples())
        .map(|r| {
            let row = sorted.row(r);
            let top1 = (row[0] - mu[0]) / sigma[0];
            if params.m_set.is_empty() {
                return top1;
            }
            let integrated = neumaier_sum(params.m_set.iter().map(|&i| {
                let k = i - 1;
                signs[k] as f64 * (row[k] - mu[k]) / sigma[k]
            }));
            top1 + integrated / m_size
        })
        .collect();
    Ok(ScoreVector {
        values,
        method: Method::Atli,
    })
}

/// Compensated summation; the result does not depend on term order beyond
/// a few ulps.
pub(crate) fn neumaier_sum(terms: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in terms {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{AtliParams, SignVector, StandardizationStats};
    use crate::tensor_io::{sort_logits_desc, Matrix, Provenance};

    fn logits(rows: &[&[f64]]) -> LogitMatrix {
        LogitMatrix::from_rows(rows).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn msp_examples() {
        let s = score_msp(&logits(&[&[0.0; 4]]));
        assert!(close(s.values[0], 0.25, 1e-15));
        let s = score_msp(&logits(&[&[0.0, 3f64.ln()], &[1000.0, 0.0], &[-3.0, 7.5]]));
        assert!(close(s.values[0], 0.75, 1e-15));
        assert!(close(s.values[1], 1.0, 1e-12));
        assert!(s.values.iter().all(|v| *v > 0.0 && *v <= 1.0));
    }

    #[test]
    fn maxlogit_examples() {
        let s = score_maxlogit(&logits(&[
            &[1.0, 3.0, 2.0],
            &[-5.0, -2.0, -9.0],
            &[2.0, 1.0, 3.0],
        ]));
        assert_eq!(s.values, vec![3.0, -2.0, 3.0]);
    }

    #[test]
    fn energy_examples() {
        let one = Temperature::default();
        let s = score_energy(&logits(&[&[0.0, 0.0]]), one);
        assert!(close(s.values[0], 2f64.ln(), 1e-15));
        let s = score_energy(&logits(&[&[1.0, 2.0, 3.0]]), one);
        let direct = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!(close(s.values[0], direct, 1e-14));
        assert!(close(s.values[0], 3.407606, 1e-6));

        let s = score_energy(&logits(&[&[0.0, 0.0]]), Temperature::new(2.0).unwrap());
        assert!(close(s.values[0], 2.0 * 2f64.ln(), 1e-15));
        assert!(close(s.values[0], 1.386294, 1e-6));

        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
    }

    #[test]
    fn energy_does_not_overflow() {
        let s = score_energy(&logits(&[&[1000.0, 1000.0]]), Temperature::default());
        assert!(close(s.values[0], 1000.0 + 2f64.ln(), 1e-10));
    }

    #[test]
    fn rank_k_examples() {
        let sorted = sort_logits_desc(&logits(&[&[1.0, 3.0, 2.0]]), Provenance::Test);
        assert_eq!(score_rank_k(&sorted, 1).unwrap().values, vec![3.0]);
        assert_eq!(score_rank_k(&sorted, 3).unwrap().values, vec![1.0]);
        assert!(score_rank_k(&sorted, 4).is_err());
        assert!(score_rank_k(&sorted, 0).is_err());
    }

    fn params(mu: Vec<f64>, sigma: Vec<f64>, signs: Vec<i8>, m_set: Vec<usize>) -> AtliParams {
        let c = mu.len();
        AtliParams {
            n_classes: c,
            stats: StandardizationStats {
                sigma_clamped: vec![false; c],
                n_fit: 2,
                mu,
                sigma,
            },
            signs: SignVector(signs),
            p: m_set.len() as f64 / c as f64,
            m_set,
            pseudo_mu: vec![0.0; c],
            rank_scores: vec![0.0; c],
            seed: 0,
            d_used: 2,
        }
    }

    #[test]
    fn atli_examples() {
        let sorted = SortedLogitMatrix::from_presorted(
            Matrix::from_rows(&[[3.0, 1.5]]).unwrap(),
            Provenance::Test,
        )
        .unwrap();

        let empty = params(vec![2.0, 1.0], vec![1.0, 0.5], vec![1, 1], vec![]);
        assert_eq!(score_atli(&sorted, &empty).unwrap().values, vec![1.0]);

        let plus = params(vec![2.0, 1.0], vec![1.0, 0.5], vec![1, 1], vec![2]);
        assert!(close(
            score_atli(&sorted, &plus).unwrap().values[0],
            2.0,
            1e-15
        ));

        let minus = params(vec![2.0, 1.0], vec![1.0, 0.5], vec![1, -1], vec![2]);
        assert!(close(
            score_atli(&sorted, &minus).unwrap().values[0],
            0.0,
            1e-15
        ));
    }

    #[test]
    fn atli_rejects_bad_params() {
        let sorted = SortedLogitMatrix::from_presorted(
            Matrix::from_rows(&[[3.0, 1.5, 1.0]]).unwrap(),
            Provenance::Test,
        )
        .unwrap();
        let wrong_c = params(vec![2.0, 1.0], vec![1.0, 0.5], vec![1, 1], vec![]);
        assert!(matches!(
            score_atli(&sorted, &wrong_c),
            Err(Error::ClassMismatch { .. })
        ));
        let has_top1 = params(vec![0.0; 3], vec![1.0; 3], vec![1; 3], vec![1]);
        assert!(score_atli(&sorted, &has_top1).is_err());
        let too_big = params(vec![0.0; 3], vec![1.0; 3], vec![1; 3], vec![4]);
        assert!(score_atli(&sorted, &too_big).is_err());
    }

    #[test]
    fn neumaier_is_order_insensitive() {
        let terms = [1e16, 1.0, -1e16, 3.0, 1e-3];
        let fwd = neumaier_sum(terms);
        let rev = neumaier_sum(terms.iter().rev().copied());
        assert!(close(fwd, 4.001, 1e-12));
        assert!(close(fwd, rev, 1e-12));
    }

    #[test]
    fn method_tags() {
        assert_eq!(Method::MaxLogit.to_string(), "maxlogit");
        assert_eq!(Method::RankK(7).to_string(), "rank_7");
    }
}
