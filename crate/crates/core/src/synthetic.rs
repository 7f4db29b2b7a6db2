//! Model-free end-to-end benchmark.
//!
//! A C-class Gaussian mixture stands in for image data and multinomial
//! logistic regression stands in for the network, so penultimate features
//! are the raw inputs. OOD sets come in several flavours, including one
//! (`deflated_midrank`) where only the middle of the sorted logit vector
//! differs from ID data.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate_with, AtliParams, CalibrationInput, SignMode};
use crate::error::{Error, Result};
use crate::metrics::{eval_pair, EvalResult};
use crate::pseudo_ood::{generate_pseudo_logits, MixupSource, PseudoConfig, TrainingView};
use crate::rng::NormalStream;
use crate::scores::{score_atli, score_energy, score_maxlogit, score_msp, Temperature};
use crate::tensor_io::{
    apply_head, sort_logits_desc, FeatureMatrix, LabelVector, LinearHead, LogitMatrix, Matrix,
    Provenance,
};

const DATA_STREAM: u64 = 10;
const HELD_OUT_CLUSTERS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodKind {
    /// ID-like clusters translated by a fixed offset.
    ShiftedMean,
    /// ID cluster centres with inflated noise.
    ScaledCov,
    /// New clusters on the same sphere, away from every training mean.
    HeldOutClusters,
    /// Fresh ID samples whose mid-rank logits are pulled towards the
    /// runner-up after the forward pass; top-1 and top-2 logits are untouched.
    DeflatedMidrank,
}

impl OodKind {
    pub const ALL: [OodKind; 4] = [
        OodKind::ShiftedMean,
        OodKind::ScaledCov,
        OodKind::HeldOutClusters,
        OodKind::DeflatedMidrank,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OodKind::ShiftedMean => "shifted_mean",
            OodKind::ScaledCov => "scaled_cov",
            OodKind::HeldOutClusters => "held_out_clusters",
            OodKind::DeflatedMidrank => "deflated_midrank",
        }
    }
}

impl fmt::Display for OodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OodKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown OOD kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub id_test_per_class: usize,
    pub n_ood: usize,
    /// Radius of the sphere the class means are placed on.
    pub class_sep: f64,
    pub ood_kinds: Vec<OodKind>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Sorted ranks `[lo, hi]` (1-based, inclusive) touched by
    /// `deflated_midrank`, as fractions of C.
    pub deflate_window: (f64, f64),
    /// Mid-rank logits keep this share of their gap to the runner-up.
    pub deflate_keep: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_classes: 20,
            input_dim: 32,
            train_per_class: 200,
            id_test_per_class: 50,
            n_ood: 1000,
            class_sep: 6.0,
            ood_kinds: OodKind::ALL.to_vec(),
            epochs: 200,
            learning_rate: 0.5,
            l2: 1e-3,
            deflate_window: (0.15, 0.75),
            deflate_keep: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n_classes < 3 {
            return bad("synthetic benchmark needs at least 3 classes");
        }
        if self.input_dim == 0
            || self.train_per_class == 0
            || self.id_test_per_class == 0
            || self.n_ood == 0
        {
            return bad("dimension and sample counts must be >= 1");
        }
        if !(self.class_sep > 0.0 && self.class_sep.is_finite()) {
            return bad("class_sep must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.l2 < 0.0 {
            return bad("learning rate must be positive and l2 non-negative");
        }
        let (lo, hi) = self.deflate_window;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return bad("deflate_window must satisfy 0 <= lo <= hi <= 1");
        }
        if !(0.0..=1.0).contains(&self.deflate_keep) {
            return bad("deflate_keep must lie in [0, 1]");
        }
        Ok(())
    }

    fn trainer(&self) -> TrainerConfig {
        TrainerConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            l2: self.l2,
            ..TrainerConfig::default()
        }
    }

    /// Ranks touched by `deflated_midrank`, never the top two.
    pub fn deflate_ranks(&self) -> (usize, usize) {
        let c = self.n_classes as f64;
        let lo = ((self.deflate_window.0 * c).round() as usize).max(3);
        let hi = ((self.deflate_window.1 * c).round() as usize).clamp(lo, self.n_classes);
        (lo, hi)
    }
}

/// Generated inputs. Features equal inputs for the linear model.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub class_means: Matrix,
    pub train_x: Matrix,
    pub train_y: LabelVector,
    pub test_x: Matrix,
    pub test_y: LabelVector,
    /// Inputs per OOD kind. For `deflated_midrank` these are fresh ID draws;
    /// the deflation happens on their logits.
    pub ood_x: Vec<(OodKind, Matrix)>,
    pub held_out_means: Matrix,
}

fn random_unit(stream: &mut NormalStream, dim: usize) -> Vec<f64> {
    loop {
        let v = stream.normal_vec(dim);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Draws `n` points: centre chosen uniformly from `means`, then
/// `centre + offset + scale · noise`.
fn draw_around(
    stream: &mut NormalStream,
    means: &Matrix,
    n: usize,
    offset: &[f64],
    scale: f64,
) -> Matrix {
    let dim = means.cols();
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let c = ((stream.uniform() * means.rows() as f64) as usize).min(means.rows() - 1);
        let noise = stream.normal_vec(dim);
        data.extend(
            means
                .row(c)
                .iter()
                .zip(offset)
                .zip(noise)
                .map(|((m, o), e)| m + o + scale * e),
        );
    }
    Matrix::new(n, dim, data).expect("sized buffer")
}

fn draw_per_class(
    stream: &mut NormalStream,
    means: &Matrix,
    per_class: usize,
) -> (Matrix, Vec<usize>) {
    let dim = means.cols();
    let mut data = Vec::with_capacity(means.rows() * per_class * dim);
    let mut labels = Vec::with_capacity(means.rows() * per_class);
    for c in 0..means.rows() {
        for _ in 0..per_class {
            let noise = stream.normal_vec(dim);
            data.extend(means.row(c).iter().zip(noise).map(|(m, e)| m + e));
            labels.push(c);
        }
    }
    (
        Matrix::new(labels.len(), dim, data).expect("sized buffer"),
        labels,
    )
}

pub fn gen_dataset(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let (c, dim) = (cfg.n_classes, cfg.input_dim);
    let mut stream = NormalStream::new(cfg.seed, DATA_STREAM);

    let means: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            random_unit(&mut stream, dim)
                .into_iter()
                .map(|x| x * cfg.class_sep)
                .collect()
        })
        .collect();
    let class_means = Matrix::from_rows(&means)?;

    let (train_x, train_y) = draw_per_class(&mut stream, &class_means, cfg.train_per_class);
    let (test_x, test_y) = draw_per_class(&mut stream, &class_means, cfg.id_test_per_class);

    let min_gap = cfg.class_sep / 2.0;
    let mut held_out = Vec::with_capacity(HELD_OUT_CLUSTERS);
    let mut attempts = 0;
    while held_out.len() < HELD_OUT_CLUSTERS {
        attempts += 1;
        let candidate: Vec<f64> = random_unit(&mut stream, dim)
            .into_iter()
            .map(|x| x * cfg.class_sep)
            .collect();
        if means.iter().all(|m| distance(m, &candidate) >= min_gap) || attempts > 10_000 {
            held_out.push(candidate);
        }
    }
    let held_out_means = Matrix::from_rows(&held_out)?;

    let zero = vec![0.0; dim];
    let shift: Vec<f64> = random_unit(&mut stream, dim)
        .into_iter()
        .map(|x| x * cfg.class_sep / 2.0)
        .collect();
    let mut ood_x = Vec::with_capacity(cfg.ood_kinds.len());
    for &kind in &cfg.ood_kinds {
        let x = match kind {
            OodKind::ShiftedMean => draw_around(&mut stream, &class_means, cfg.n_ood, &shift, 1.0),
            OodKind::ScaledCov => draw_around(&mut stream, &class_means, cfg.n_ood, &zero, 2.5),
            OodKind::HeldOutClusters => {
                draw_around(&mut stream, &held_out_means, cfg.n_ood, &zero, 1.0)
            }
            OodKind::DeflatedMidrank => {
                draw_around(&mut stream, &class_means, cfg.n_ood, &zero, 1.0)
            }
        };
        ood_x.push((kind, x));
    }

    Ok(SyntheticData {
        class_means,
        train_y: LabelVector::new(train_y, c)?,
        train_x,
        test_y: LabelVector::new(test_y, c)?,
        test_x,
        ood_x,
        held_out_means,
    })
}

/// Pulls sorted ranks `lo..=hi` of every row towards the runner-up logit:
/// `v ← v₂ - keep · (v₂ - v)`. Per-row order is preserved, and the top-1
/// and top-2 logits and everything below the window keep their values.
pub fn deflate_midrank(
    logits: &LogitMatrix,
    lo: usize,
    hi: usize,
    keep: f64,
) -> Result<LogitMatrix> {
    let c = logits.n_classes();
    if lo < 3 || hi < lo || hi > c {
        return Err(Error::InvalidArgument(format!(
            "deflation window {lo}..={hi} must satisfy 3 <= lo <= hi <= C = {c}"
        )));
    }
    let mut out = logits.matrix().clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let order = crate::tensor_io::descending_order(row);
        let runner_up = row[order[1]];
        for &cls in &order[lo - 1..hi] {
            row[cls] = runner_up - keep * (runner_up - row[cls]);
        }
    }
    LogitMatrix::new(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub max_halvings: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            epochs: 200,
            learning_rate: 0.5,
            l2: 1e-3,
            max_halvings: 40,
        }
    }
}

/// Gradient of the training loss in the shape of a head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    /// C x d, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub head: LinearHead,
    /// Loss before the first step and after every epoch.
    pub loss_history: Vec<f64>,
    pub final_learning_rate: f64,
}

/// Mean softmax cross-entropy plus `l2/2 · |W|²` (bias unpenalized), and its
/// gradient.
pub fn loss_and_gradient(
    head: &LinearHead,
    x: &Matrix,
    y: &LabelVector,
    l2: f64,
) -> Result<(f64, HeadGradient)> {
    check_training_shapes(head, x, y)?;
    let (c, d, n) = (head.n_classes(), head.dim(), x.rows());
    let mut grad_w = vec![0.0; c * d];
    let mut grad_b = vec![0.0; c];
    let mut loss = 0.0;
    let mut logits = vec![0.0; c];
    for (r, &label) in y.as_slice().iter().enumerate() {
        let xr = x.row(r);
        head.forward_row(xr, &mut logits);
        let lse = crate::scores::logsumexp(&logits);
        loss += lse - logits[label];
        for k in 0..c {
            let delta = (logits[k] - lse).exp() - if k == label { 1.0 } else { 0.0 };
            grad_b[k] += delta;
            let gw = &mut grad_w[k * d..(k + 1) * d];
            for (g, xv) in gw.iter_mut().zip(xr) {
                *g += delta * xv;
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    let mut penalty = 0.0;
    for k in 0..c {
        for (j, g) in grad_w[k * d..(k + 1) * d].iter_mut().enumerate() {
            let w = head.weight_row(k)[j];
            penalty += w * w;
            *g = *g * inv_n + l2 * w;
        }
    }
    grad_b.iter_mut().for_each(|g| *g *= inv_n);
    Ok((
        loss * inv_n + 0.5 * l2 * penalty,
        HeadGradient {
            weights: grad_w,
            bias: grad_b,
        },
    ))
}

pub fn training_loss(head: &LinearHead, x: &Matrix, y: &LabelVector, l2: f64) -> Result<f64> {
    loss_and_gradient(head, x, y, l2).map(|(l, _)| l)
}

fn check_training_shapes(head: &LinearHead, x: &Matrix, y: &LabelVector) -> Result<()> {
    if x.cols() != head.dim() {
        return Err(Error::Shape(format!(
            "inputs have {} columns, head expects {}",
            x.cols(),
            head.dim()
        )));
    }
    if x.rows() != y.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            y.len(),
            x.rows()
        )));
    }
    if let Some(&l) = y.as_slice().iter().find(|&&l| l >= head.n_classes()) {
        return Err(Error::Labels(format!(
            "label {l} >= {} classes",
            head.n_classes()
        )));
    }
    Ok(())
}

fn stepped(head: &LinearHead, grad: &HeadGradient, lr: f64) -> LinearHead {
    let mut next = head.clone();
    for (w, g) in next.weights_mut().iter_mut().zip(&grad.weights) {
        *w -= lr * g;
    }
    for (b, g) in next.bias_mut().iter_mut().zip(&grad.bias) {
        *b -= lr * g;
    }
    next
}

/// Full-batch gradient descent from an all-zero head. A step that would
/// raise the loss is retried with half the learning rate; the halved rate is
/// kept for later epochs.
pub fn train_classifier(
    x: &Matrix,
    y: &LabelVector,
    n_classes: usize,
    cfg: &TrainerConfig,
) -> Result<TrainingRun> {
    if x.rows() < n_classes {
        return Err(Error::InvalidArgument(format!(
            "need at least {n_classes} training rows, got {}",
            x.rows()
        )));
    }
    let mut head = LinearHead::zeros(n_classes, x.cols());
    let mut lr = cfg.learning_rate;
    let (mut loss, mut grad) = loss_and_gradient(&head, x, y, cfg.l2)?;
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    history.push(loss);

    for _ in 0..cfg.epochs {
        let mut halvings = 0;
        loop {
            let candidate = stepped(&head, &grad, lr);
            let (next_loss, next_grad) = loss_and_gradient(&candidate, x, y, cfg.l2)?;
            if next_loss <= loss {
                head = candidate;
                loss = next_loss;
                grad = next_grad;
                break;
            }
            halvings += 1;
            if halvings > cfg.max_halvings {
                return Err(Error::Divergence { halvings });
            }
            lr *= 0.5;
        }
        history.push(loss);
    }
    Ok(TrainingRun {
        head,
        loss_history: history,
        final_learning_rate: lr,
    })
}

pub fn accuracy(head: &LinearHead, x: &Matrix, y: &LabelVector) -> f64 {
    let mut logits = vec![0.0; head.n_classes()];
    let correct = y
        .as_slice()
        .iter()
        .enumerate()
        .filter(|(r, &label)| {
            head.forward_row(x.row(*r), &mut logits);
            crate::tensor_io::descending_order(&logits)[0] == label
        })
        .count();
    correct as f64 / y.len() as f64
}

/// Knobs of one benchmark run beyond the data configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkOptions {
    pub p: f64,
    /// Training rows used for calibration; `None` uses all of them.
    pub calibration_size: Option<usize>,
    /// Pseudo-OOD rows; `None` matches the calibration size.
    pub n_pseudo: Option<usize>,
    pub mix_fraction: f64,
    pub sign_mode: SignMode,
    pub orient: bool,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        BenchmarkOptions {
            p: crate::calibration::DEFAULT_P,
            calibration_size: None,
            n_pseudo: None,
            mix_fraction: 0.5,
            sign_mode: SignMode::Adaptive,
            orient: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub method: String,
    pub ood_dataset: String,
    #[serde(flatten)]
    pub result: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub rows: Vec<ReportRow>,
    pub params: AtliParams,
    pub id_accuracy: f64,
    pub loss_history: Vec<f64>,
    pub timings: Vec<StageTiming>,
    pub config: SyntheticConfig,
    pub options: BenchmarkOptions,
}

pub const REPORT_METHODS: [&str; 5] = ["msp", "maxlogit", "energy", "atli", "atli_p0"];

impl BenchmarkReport {
    pub fn row(&self, method: &str, ood_dataset: &str) -> Option<&EvalResult> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.ood_dataset == ood_dataset)
            .map(|r| &r.result)
    }

    /// Mean AUROC and FPR95 of a method over all OOD sets.
    pub fn average(&self, method: &str) -> Option<(f64, f64)> {
        let rows: Vec<_> = self.rows.iter().filter(|r| r.method == method).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|r| r.result.auroc).sum::<f64>() / n,
            rows.iter().map(|r| r.result.fpr95).sum::<f64>() / n,
        ))
    }

    /// Method x dataset table with percentages to two decimals, followed by
    /// one average row per method.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,ood_dataset,auroc,fpr95\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.2},{:.2}\n",
                r.method,
                r.ood_dataset,
                100.0 * r.result.auroc,
                100.0 * r.result.fpr95
            ));
        }
        for m in REPORT_METHODS {
            if let Some((a, f)) = self.average(m) {
                out.push_str(&format!("{m},average,{:.2},{:.2}\n", 100.0 * a, 100.0 * f));
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let params: serde_json::Value = serde_json::from_str(&self.params.to_json()?)?;
        let value = serde_json::json!({
            "config": self.config,
            "options": self.options,
            "id_accuracy": self.id_accuracy,
            "rows": self.rows,
            "params": params,
            "timings": self.timings,
        });
        Ok(serde_json::to_string_pretty(&value)?)
    }

    /// Everything except wall-clock timings, for reproducibility checks.
    pub fn same_results(&self, other: &BenchmarkReport) -> bool {
        self.rows == other.rows
            && self.params == other.params
            && self.id_accuracy == other.id_accuracy
            && self.loss_history == other.loss_history
    }
}

/// Trained model and every logit set of a benchmark configuration.
#[derive(Debug, Clone)]
pub struct PreparedBenchmark {
    pub config: SyntheticConfig,
    pub data: SyntheticData,
    pub training: TrainingRun,
    pub train_logits: LogitMatrix,
    pub id_test_logits: LogitMatrix,
    pub ood_logits: Vec<(String, LogitMatrix)>,
    pub id_accuracy: f64,
    pub timings: Vec<StageTiming>,
}

fn timed<T>(
    timings: &mut Vec<StageTiming>,
    stage: &str,
    f: impl FnOnce() -> Result<T>,
) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    timings.push(StageTiming {
        stage: stage.to_string(),
        seconds: start.elapsed().as_secs_f64(),
    });
    Ok(out)
}

/// Generates data, trains the classifier and computes all logits.
pub fn prepare(cfg: &SyntheticConfig) -> Result<PreparedBenchmark> {
    let mut timings = Vec::new();
    let data = timed(&mut timings, "generate", || gen_dataset(cfg))?;
    let training = timed(&mut timings, "train", || {
        train_classifier(&data.train_x, &data.train_y, cfg.n_classes, &cfg.trainer())
    })?;
    let head = &training.head;
    let forward = |x: &Matrix| apply_head(&FeatureMatrix::new(x.clone())?, head);

    let (train_logits, id_test_logits, ood_logits) = timed(&mut timings, "forward", || {
        let (lo, hi) = cfg.deflate_ranks();
        let ood = data
            .ood_x
            .iter()
            .map(|(kind, x)| {
                let logits = forward(x)?;
                let logits = match kind {
                    OodKind::DeflatedMidrank => deflate_midrank(&logits, lo, hi, cfg.deflate_keep)?,
                    _ => logits,
                };
                Ok((kind.name().to_string(), logits))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((forward(&data.train_x)?, forward(&data.test_x)?, ood))
    })?;
    let id_accuracy = accuracy(head, &data.test_x, &data.test_y);

    Ok(PreparedBenchmark {
        config: cfg.clone(),
        data,
        training,
        train_logits,
        id_test_logits,
        ood_logits,
        id_accuracy,
        timings,
    })
}

impl PreparedBenchmark {
    /// Pseudo-OOD logits: Mixup through the trained model plus Gaussian
    /// samples through its head.
    pub fn pseudo_logits(
        &self,
        n_total: usize,
        mix_fraction: f64,
        seed: u64,
    ) -> Result<LogitMatrix> {
        let head = &self.training.head;
        let features = FeatureMatrix::new(self.data.train_x.clone())?;
        let forward = |x: &[f64]| {
            let mut out = vec![0.0; head.n_classes()];
            head.forward_row(x, &mut out);
            out
        };
        let view = TrainingView {
            features: Some(&features),
            labels: Some(&self.data.train_y),
            head: Some(head),
        };
        let cfg = PseudoConfig {
            n_total,
            mix_fraction,
            seed,
            ..PseudoConfig::default()
        };
        let source = MixupSource::Forward {
            inputs: &self.data.train_x,
            forward: &forward,
        };
        Ok(generate_pseudo_logits(view, source, &cfg)?.logits)
    }

    pub fn calibrate(&self, opts: &BenchmarkOptions) -> Result<AtliParams> {
        let n_train = self.train_logits.n_samples();
        let d = opts.calibration_size.unwrap_or(n_train).min(n_train);
        let n_pseudo = opts.n_pseudo.unwrap_or(d);
        let seed = self.config.seed;
        let pseudo = self.pseudo_logits(n_pseudo, opts.mix_fraction, seed.wrapping_add(1))?;
        let train_sorted = sort_logits_desc(&self.train_logits, Provenance::Train);
        let input = CalibrationInput::subsampled(
            &train_sorted,
            sort_logits_desc(&pseudo, Provenance::Pseudo),
            d,
            seed,
        )?;
        Ok(calibrate_with(&input, opts.p, opts.orient)?.with_sign_mode(opts.sign_mode))
    }

    /// Scores every method on ID test data and each OOD set.
    pub fn evaluate(&self, params: &AtliParams) -> Result<Vec<ReportRow>> {
        let p0 = params.with_p(0.0)?;
        let score_all = |logits: &LogitMatrix| -> Result<Vec<(&'static str, Vec<f64>)>> {
            let sorted = sort_logits_desc(logits, Provenance::Test);
            Ok(vec![
                ("msp", score_msp(logits).values),
                ("maxlogit", score_maxlogit(logits).values),
                (
                    "energy",
                    score_energy(logits, Temperature::default()).values,
                ),
                ("atli", score_atli(&sorted, params)?.values),
                ("atli_p0", score_atli(&sorted, &p0)?.values),
            ])
        };
        let id_scores = score_all(&self.id_test_logits)?;
        let mut rows = Vec::new();
        for (name, logits) in &self.ood_logits {
            let ood_scores = score_all(logits)?;
            for ((method, id), (_, ood)) in id_scores.iter().zip(&ood_scores) {
                rows.push(ReportRow {
                    method: method.to_string(),
                    ood_dataset: name.clone(),
                    result: eval_pair(id, ood)?,
                });
            }
        }
        Ok(rows)
    }

    pub fn run(&self, opts: &BenchmarkOptions) -> Result<BenchmarkReport> {
        let mut timings = self.timings.clone();
        let params = timed(&mut timings, "calibrate", || self.calibrate(opts))?;
        let rows = timed(&mut timings, "evaluate", || self.evaluate(&params))?;
        Ok(BenchmarkReport {
            rows,
            params,
            id_accuracy: self.id_accuracy,
            loss_history: self.training.loss_history.clone(),
            timings,
            config: self.config.clone(),
            options: opts.clone(),
        })
    }
}

/// Train, generate pseudo-OOD, calibrate, score and evaluate in one go.
pub fn run_benchmark(cfg: &SyntheticConfig, opts: &BenchmarkOptions) -> Result<BenchmarkReport> {
    prepare(cfg)?.run(opts)
}
