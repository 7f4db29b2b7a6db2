//! Pseudo-OOD synthesis from training data.
//!
//! Two generators are combined: Mixup of training samples from different
//! classes at a fixed ratio of one half (stays near the data), and samples
//! drawn from the low-likelihood region of a single Gaussian fitted to all
//! penultimate features (lies outside the data). Feature samples become
//! logits through the model's linear head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::NormalStream;
use crate::tensor_io::{
    apply_head, DatasetBundle, FeatureMatrix, LabelVector, LinearHead, LogitMatrix, Matrix,
};

pub const MIXUP_LAMBDA: f64 = 0.5;
pub const DEFAULT_EPSILON_SCALE: f64 = 1e-6;

const MIXUP_STREAM: u64 = 1;
const VOS_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoConfig {
    pub n_total: usize,
    /// Share of `n_total` produced by Mixup; the rest comes from the
    /// Gaussian sampler.
    pub mix_fraction: f64,
    pub vos_oversample: usize,
    pub vos_quantile: f64,
    pub epsilon_scale: f64,
    /// Upper bound on the candidate pool drawn by the Gaussian sampler.
    pub max_candidates: usize,
    pub seed: u64,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        PseudoConfig {
            n_total: 100_000,
            mix_fraction: 0.5,
            vos_oversample: 10,
            vos_quantile: 0.10,
            epsilon_scale: DEFAULT_EPSILON_SCALE,
            max_candidates: 50_000_000,
            seed: 0,
        }
    }
}

impl PseudoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_total == 0 {
            return Err(Error::InvalidArgument("n_total must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mix_fraction) {
            return Err(Error::InvalidArgument(format!(
                "mix_fraction must lie in [0, 1], got {}",
                self.mix_fraction
            )));
        }
        if self.vos_oversample == 0 {
            return Err(Error::InvalidArgument("vos_oversample must be >= 1".into()));
        }
        if !(self.vos_quantile > 0.0 && self.vos_quantile < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "vos_quantile must lie in (0, 1), got {}",
                self.vos_quantile
            )));
        }
        if !(self.epsilon_scale >= 0.0 && self.epsilon_scale.is_finite()) {
            return Err(Error::InvalidArgument("epsilon_scale must be >= 0".into()));
        }
        Ok(())
    }

    /// Rows produced by Mixup, `round(mix_fraction · n_total)`.
    pub fn n_mix(&self) -> usize {
        (self.mix_fraction * self.n_total as f64).round() as usize
    }

    /// Candidate pool size for `n` kept samples: large enough for both the
    /// oversampling factor and the quantile cut.
    pub fn pool_size(&self, n: usize) -> Result<usize> {
        let by_oversample = n.checked_mul(self.vos_oversample);
        let by_quantile = (n as f64 / self.vos_quantile).ceil();
        let pool = by_oversample
            .filter(|_| by_quantile < usize::MAX as f64)
            .map(|a| a.max(by_quantile as usize));
        match pool {
            Some(p) if p <= self.max_candidates => Ok(p),
            _ => Err(Error::InvalidArgument(format!(
                "{n} samples with oversample {} / quantile {} exceed the candidate budget of {}",
                self.vos_oversample, self.vos_quantile, self.max_candidates
            ))),
        }
    }
}

/// Single Gaussian over feature space with a lower-triangular factor of the
/// shrunk covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    pub mean: Vec<f64>,
    pub covariance: Matrix,
    /// `chol · cholᵀ = covariance + epsilon · I`.
    pub chol: Matrix,
    pub epsilon: f64,
    log_det: f64,
}

impl GaussianModel {
    /// Builds a model from explicit parameters.
    pub fn from_parts(mean: Vec<f64>, covariance: Matrix, epsilon: f64) -> Result<Self> {
        let d = mean.len();
        if covariance.rows() != d || covariance.cols() != d {
            return Err(Error::Shape(format!(
                "covariance is {}x{}, mean has length {d}",
                covariance.rows(),
                covariance.cols()
            )));
        }
        let mut shrunk = covariance.clone();
        for i in 0..d {
            shrunk.row_mut(i)[i] += epsilon;
        }
        let chol = cholesky(&shrunk).map_err(|pivot| Error::Factorization {
            pivot,
            epsilon,
            suggested: if epsilon > 0.0 { epsilon * 100.0 } else { 1e-6 },
        })?;
        let log_det = 2.0 * (0..d).map(|i| chol.get(i, i).ln()).sum::<f64>();
        Ok(GaussianModel {
            mean,
            covariance,
            chol,
            epsilon,
            log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log-density of a point whose whitened offset `chol⁻¹(z - mean)` has
    /// squared norm `mahalanobis_sq`.
    fn log_density_from_mahalanobis(&self, mahalanobis_sq: f64) -> f64 {
        let d = self.dim() as f64;
        -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + self.log_det + mahalanobis_sq)
    }
}

/// In-place-free Cholesky factorization; `Err(pivot)` if the matrix is not
/// numerically positive definite.
pub fn cholesky(a: &Matrix) -> std::result::Result<Matrix, usize> {
    let d = a.rows();
    let mut l = Matrix::zeros(d, d);
    for j in 0..d {
        let mut diag = a.get(j, j);
        for k in 0..j {
            diag -= l.get(j, k) * l.get(j, k);
        }
        if !(diag > 0.0 && diag.is_finite()) {
            return Err(j);
        }
        let ljj = diag.sqrt();
        l.row_mut(j)[j] = ljj;
        for i in j + 1..d {
            let mut s = a.get(i, j);
            let (li, lj) = (l.row(i), l.row(j));
            for k in 0..j {
                s -= li[k] * lj[k];
            }
            l.row_mut(i)[j] = s / ljj;
        }
    }
    Ok(l)
}

/// Mean and population covariance of the features, with `epsilon_scale`
/// times the average variance added to the diagonal.
pub fn fit_gaussian(features: &FeatureMatrix, epsilon_scale: f64) -> Result<GaussianModel> {
    let n = features.n_samples();
    let d = features.dim();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "fitting a Gaussian needs at least 2 samples, got {n}"
        )));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, x) in mean.iter_mut().zip(features.row(r)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for r in 0..n {
        for ((c, x), m) in centered.iter_mut().zip(features.row(r)).zip(&mean) {
            *c = x - m;
        }
        for i in 0..d {
            let ci = centered[i];
            let row = cov.row_mut(i);
            for j in 0..=i {
                row[j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = cov.get(i, j) / n as f64;
            cov.row_mut(i)[j] = v;
            cov.row_mut(j)[i] = v;
        }
    }
    let avg_var = (0..d).map(|i| cov.get(i, i)).sum::<f64>() / d as f64;
    let epsilon = epsilon_scale * if avg_var > 0.0 { avg_var } else { 1.0 };
    GaussianModel::from_parts(mean, cov, epsilon)
}

pub fn log_density(model: &GaussianModel, z: &[f64]) -> Result<f64> {
    let d = model.dim();
    if z.len() != d {
        return Err(Error::Shape(format!(
            "point has dimension {}, model has {d}",
            z.len()
        )));
    }
    // forward substitution: chol · y = z - mean
    let mut y = vec![0.0; d];
    for i in 0..d {
        let li = model.chol.row(i);
        let mut s = z[i] - model.mean[i];
        for k in 0..i {
            s -= li[k] * y[k];
        }
        y[i] = s / li[i];
    }
    let maha: f64 = y.iter().map(|v| v * v).sum();
    Ok(model.log_density_from_mahalanobis(maha))
}

/// Deterministic, randomly addressable pool of Gaussian candidates.
#[derive(Debug, Clone)]
pub struct CandidatePool<'a> {
    model: &'a GaussianModel,
    seed: u64,
}

impl<'a> CandidatePool<'a> {
    pub fn new(model: &'a GaussianModel, seed: u64) -> Self {
        CandidatePool { model, seed }
    }

    /// u64 draws consumed per candidate (two per normal pair).
    fn stride(&self) -> u64 {
        (self.model.dim().div_ceil(2) * 2) as u64
    }

    fn whitened(&self, k: usize, u: &mut [f64]) {
        let mut stream = NormalStream::new(self.seed, VOS_STREAM);
        stream.seek(k as u64 * self.stride());
        stream.fill_normal(u);
    }

    /// Candidate `k`: `mean + chol · u` with `u` standard normal.
    pub fn candidate(&self, k: usize) -> Vec<f64> {
        let d = self.model.dim();
        let mut u = vec![0.0; d];
        self.whitened(k, &mut u);
        (0..d)
            .map(|i| {
                let li = self.model.chol.row(i);
                self.model.mean[i] + (0..=i).map(|j| li[j] * u[j]).sum::<f64>()
            })
            .collect()
    }

    /// Log-density of candidate `k`. Since `z - mean = chol · u`, the
    /// Mahalanobis term is `|u|²`.
    pub fn candidate_log_density(&self, k: usize) -> f64 {
        let mut u = vec![0.0; self.model.dim()];
        self.whitened(k, &mut u);
        self.model
            .log_density_from_mahalanobis(u.iter().map(|v| v * v).sum())
    }
}

/// Result of low-likelihood sampling, with enough detail to audit the
/// selection.
#[derive(Debug, Clone)]
pub struct LowLikelihoodDraw {
    pub samples: FeatureMatrix,
    /// Pool index of each kept row, ascending.
    pub kept: Vec<usize>,
    /// Log-density of every pool candidate.
    pub pool_log_density: Vec<f64>,
}

/// Draws a candidate pool and keeps the `n` least likely candidates.
pub fn draw_low_likelihood(
    model: &GaussianModel,
    n: usize,
    cfg: &PseudoConfig,
) -> Result<LowLikelihoodDraw> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    let pool_size = cfg.pool_size(n)?;
    let pool = CandidatePool::new(model, cfg.seed);
    let pool_log_density: Vec<f64> = (0..pool_size)
        .into_par_iter()
        .map(|k| pool.candidate_log_density(k))
        .collect();

    let mut order: Vec<usize> = (0..pool_size).collect();
    let by_density = |a: &usize, b: &usize| {
        pool_log_density[*a]
            .total_cmp(&pool_log_density[*b])
            .then(a.cmp(b))
    };
    if n < pool_size {
        order.select_nth_unstable_by(n - 1, by_density);
    }
    let mut kept = order[..n].to_vec();
    kept.sort_unstable();

    let rows: Vec<Vec<f64>> = kept.par_iter().map(|&k| pool.candidate(k)).collect();
    Ok(LowLikelihoodDraw {
        samples: FeatureMatrix::new(Matrix::from_rows(&rows)?)?,
        kept,
        pool_log_density,
    })
}

pub fn sample_low_likelihood(
    model: &GaussianModel,
    n: usize,
    cfg: &PseudoConfig,
) -> Result<FeatureMatrix> {
    draw_low_likelihood(model, n, cfg).map(|d| d.samples)
}

/// Mixed rows and the source pair of each.
#[derive(Debug, Clone, PartialEq)]
pub struct MixupBatch {
    pub mixed: Matrix,
    pub pairs: Vec<(usize, usize)>,
}

/// `n` midpoints `0.5·a + 0.5·b` of row pairs with different labels. The
/// first row is uniform over all rows, the second uniform over rows of other
/// classes.
pub fn mixup_pairs(
    inputs: &Matrix,
    labels: &LabelVector,
    n: usize,
    seed: u64,
) -> Result<MixupBatch> {
    if labels.len() != inputs.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            inputs.rows()
        )));
    }
    if labels.distinct_count() < 2 {
        return Err(Error::Labels(
            "mixup needs at least two distinct classes".into(),
        ));
    }
    let labels = labels.as_slice();
    let total = labels.len();

    // rows grouped by label; each label owns a contiguous range of `grouped`
    let mut grouped: Vec<usize> = (0..total).collect();
    grouped.sort_by_key(|&i| labels[i]);
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut range = vec![(0usize, 0usize); n_labels];
    let mut start = 0;
    while start < total {
        let label = labels[grouped[start]];
        let mut end = start;
        while end < total && labels[grouped[end]] == label {
            end += 1;
        }
        range[label] = (start, end);
        start = end;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(MIXUP_STREAM);
    let m = inputs.cols();
    let mut mixed = Vec::with_capacity(n * m);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let a = rng.gen_range(0..total as u64) as usize;
        let (lo, hi) = range[labels[a]];
        let k = rng.gen_range(0..(total - (hi - lo)) as u64) as usize;
        let b = grouped[if k < lo { k } else { k + (hi - lo) }];
        mixed.extend(
            inputs
                .row(a)
                .iter()
                .zip(inputs.row(b))
                .map(|(x, y)| MIXUP_LAMBDA * x + MIXUP_LAMBDA * y),
        );
        pairs.push((a, b));
    }
    Ok(MixupBatch {
        mixed: Matrix::new(n, m, mixed)?,
        pairs,
    })
}

/// Where the Mixup share of the pseudo-OOD set comes from.
pub enum MixupSource<'a> {
    /// Mix raw inputs and run them through an in-process model.
    Forward {
        inputs: &'a Matrix,
        forward: &'a (dyn Fn(&[f64]) -> Vec<f64> + Sync),
    },
    /// Logits of mixed inputs computed elsewhere; the first rows are used.
    External(&'a LogitMatrix),
    /// Mix penultimate features instead of inputs and apply the head. Only
    /// an approximation for models that are not linear in their input.
    FeatureFallback,
    None,
}

/// Training-side data the generator draws from.
#[derive(Debug, Clone, Copy)]
pub struct TrainingView<'a> {
    pub features: Option<&'a FeatureMatrix>,
    pub labels: Option<&'a LabelVector>,
    pub head: Option<&'a LinearHead>,
}

impl DatasetBundle {
    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView {
            features: self.train_features.as_ref(),
            labels: self.train_labels.as_ref(),
            head: self.head.as_ref(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PseudoOod {
    /// Mixup rows first, then Gaussian rows.
    pub logits: LogitMatrix,
    pub n_mix: usize,
    pub n_vos: usize,
    pub mix_pairs: Vec<(usize, usize)>,
}

pub fn generate_pseudo_logits(
    train: TrainingView<'_>,
    mixup: MixupSource<'_>,
    cfg: &PseudoConfig,
) -> Result<PseudoOod> {
    cfg.validate()?;
    let n_mix = cfg.n_mix();
    let n_vos = cfg.n_total - n_mix;

    let labels = || {
        train
            .labels
            .ok_or_else(|| Error::InvalidArgument("mixup requires training labels".into()))
    };
    let head = || {
        train
            .head
            .ok_or_else(|| Error::InvalidArgument("a linear head is required".into()))
    };
    let features = || {
        train
            .features
            .ok_or_else(|| Error::InvalidArgument("training features are required".into()))
    };

    let mut parts: Vec<Matrix> = Vec::new();
    let mut mix_pairs = Vec::new();
    if n_mix > 0 {
        let mixed_logits = match mixup {
            MixupSource::Forward { inputs, forward } => {
                let batch = mixup_pairs(inputs, labels()?, n_mix, cfg.seed)?;
                let rows: Vec<Vec<f64>> = (0..n_mix)
                    .into_par_iter()
                    .map(|r| forward(batch.mixed.row(r)))
                    .collect();
                mix_pairs = batch.pairs;
                Matrix::from_rows(&rows)?
            }
            MixupSource::External(logits) => {
                if logits.n_samples() < n_mix {
                    return Err(Error::Shape(format!(
                        "{n_mix} mixed rows requested, external file has {}",
                        logits.n_samples()
                    )));
                }
                let idx: Vec<usize> = (0..n_mix).collect();
                logits.matrix().select_rows(&idx)
            }
            MixupSource::FeatureFallback => {
                let batch = mixup_pairs(features()?.matrix(), labels()?, n_mix, cfg.seed)?;
                mix_pairs = batch.pairs;
                apply_head(&FeatureMatrix::new(batch.mixed)?, head()?)?.into_matrix()
            }
            MixupSource::None => {
                return Err(Error::InvalidArgument(
                    "mixup share requires a forward function or externally mixed logits".into(),
                ))
            }
        };
        parts.push(mixed_logits);
    }
    if n_vos > 0 {
        let (features, head) = (features()?, head()?);
        if features.dim() != head.dim() {
            return Err(Error::Shape(format!(
                "head expects {} features, got {}",
                head.dim(),
                features.dim()
            )));
        }
        let model = fit_gaussian(features, cfg.epsilon_scale)?;
        let sampled = sample_low_likelihood(&model, n_vos, cfg)?;
        parts.push(apply_head(&sampled, head)?.into_matrix());
    }
    if let [first, rest @ ..] = parts.as_slice() {
        if let Some(other) = rest.iter().find(|m| m.cols() != first.cols()) {
            return Err(Error::ClassMismatch {
                expected: first.cols(),
                found: other.cols(),
            });
        }
    }
    let refs: Vec<&Matrix> = parts.iter().collect();
    Ok(PseudoOod {
        logits: LogitMatrix::new(Matrix::vstack(&refs)?)?,
        n_mix,
        n_vos,
        mix_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(rows: &[&[f64]]) -> FeatureMatrix {
        FeatureMatrix::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn fit_gaussian_examples() {
        let g = fit_gaussian(
            &feats(&[&[0.0, 0.0], &[2.0, 0.0], &[0.0, 2.0], &[2.0, 2.0]]),
            0.0,
        )
        .unwrap();
        assert_eq!(g.mean, vec![1.0, 1.0]);
        assert_eq!(g.covariance.as_slice(), &[1.0, 0.0, 0.0, 1.0]);

        let g = fit_gaussian(&feats(&[&[0.0], &[2.0]]), 0.0).unwrap();
        assert_eq!(g.mean, vec![1.0]);
        assert_eq!(g.covariance.as_slice(), &[1.0]);
    }

    #[test]
    fn degenerate_features_need_shrinkage() {
        let line = feats(&[&[0.0, 0.0], &[1.0, 1.0], &[2.0, 2.0], &[3.0, 3.0]]);
        assert!(matches!(
            fit_gaussian(&line, 0.0),
            Err(Error::Factorization { .. })
        ));
        let g = fit_gaussian(&line, DEFAULT_EPSILON_SCALE).unwrap();
        assert!(g.chol.as_slice().iter().all(|v| v.is_finite()));
        assert!(g.epsilon > 0.0);
    }

    #[test]
    fn log_density_examples() {
        let g = GaussianModel::from_parts(vec![0.0], Matrix::from_rows(&[[1.0]]).unwrap(), 0.0)
            .unwrap();
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((log_density(&g, &[0.0]).unwrap() + half_log_2pi).abs() < 1e-15);
        assert!((log_density(&g, &[0.0]).unwrap() + 0.918939).abs() < 1e-6);
        assert!((log_density(&g, &[2.0]).unwrap() + half_log_2pi + 2.0).abs() < 1e-15);
        assert!(log_density(&g, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn mixup_midpoint() {
        let inputs = Matrix::from_rows(&[[0.0, 2.0], [2.0, 0.0]]).unwrap();
        let labels = LabelVector::new(vec![0, 1], 2).unwrap();
        let batch = mixup_pairs(&inputs, &labels, 4, 3).unwrap();
        for r in 0..4 {
            assert_eq!(batch.mixed.row(r), &[1.0, 1.0]);
        }
    }

    #[test]
    fn mixup_needs_two_classes() {
        let inputs = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let labels = LabelVector::new(vec![1, 1], 2).unwrap();
        assert!(matches!(
            mixup_pairs(&inputs, &labels, 1, 0),
            Err(Error::Labels(_))
        ));
    }

    #[test]
    fn pool_size_respects_budget() {
        let cfg = PseudoConfig::default();
        assert_eq!(cfg.pool_size(100).unwrap(), 1000);
        let cfg = PseudoConfig {
            vos_quantile: 0.05,
            ..PseudoConfig::default()
        };
        assert_eq!(cfg.pool_size(100).unwrap(), 2000);
        let cfg = PseudoConfig {
            max_candidates: 999,
            ..PseudoConfig::default()
        };
        assert!(cfg.pool_size(100).is_err());
        let cfg = PseudoConfig {
            vos_oversample: usize::MAX,
            ..PseudoConfig::default()
        };
        assert!(cfg.pool_size(2).is_err());
    }

    #[test]
    fn candidate_density_matches_direct_density() {
        let cov = Matrix::from_rows(&[[2.0, 0.3, 0.0], [0.3, 1.0, 0.2], [0.0, 0.2, 0.5]]).unwrap();
        let g = GaussianModel::from_parts(vec![1.0, -1.0, 0.5], cov, 0.0).unwrap();
        let pool = CandidatePool::new(&g, 11);
        for k in 0..50 {
            let direct = log_density(&g, &pool.candidate(k)).unwrap();
            assert!((direct - pool.candidate_log_density(k)).abs() < 1e-10);
        }
    }

    #[test]
    fn generation_counts() {
        let features = feats(&[&[0.0, 1.0], &[1.0, 0.0], &[2.0, 2.0], &[-1.0, 0.5]]);
        let labels = LabelVector::new(vec![0, 1, 0, 1], 2).unwrap();
        let head = LinearHead::new(
            Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(),
            vec![0.0, 0.0],
        )
        .unwrap();
        let view = TrainingView {
            features: Some(&features),
            labels: Some(&labels),
            head: Some(&head),
        };
        let cfg = PseudoConfig {
            n_total: 10,
            seed: 4,
            ..PseudoConfig::default()
        };
        let out = generate_pseudo_logits(view, MixupSource::FeatureFallback, &cfg).unwrap();
        assert_eq!((out.n_mix, out.n_vos, out.logits.n_samples()), (5, 5, 10));

        let cfg0 = PseudoConfig {
            mix_fraction: 0.0,
            ..cfg.clone()
        };
        let out = generate_pseudo_logits(view, MixupSource::None, &cfg0).unwrap();
        assert_eq!((out.n_mix, out.n_vos), (0, 10));

        let cfg1 = PseudoConfig {
            mix_fraction: 1.0,
            ..cfg.clone()
        };
        let no_features = TrainingView {
            features: None,
            ..view
        };
        let forward = |x: &[f64]| x.to_vec();
        let out = generate_pseudo_logits(
            no_features,
            MixupSource::Forward {
                inputs: features.matrix(),
                forward: &forward,
            },
            &cfg1,
        )
        .unwrap();
        assert_eq!((out.n_mix, out.n_vos), (10, 0));

        assert!(generate_pseudo_logits(view, MixupSource::None, &cfg).is_err());
        assert!(generate_pseudo_logits(no_features, MixupSource::FeatureFallback, &cfg0).is_err());
    }
}
