use std::fs;
use std::path::{Path, PathBuf};

use atli_core::calibration::{
    calibrate_with, load_params, rank_analysis, save_params, CalibrationInput, SignMode, DEFAULT_D,
    DEFAULT_P,
};
use atli_core::metrics::{eval_pair, EvalResult};
use atli_core::pseudo_ood::{generate_pseudo_logits, MixupSource, PseudoConfig, TrainingView};
use atli_core::scores::{score_atli, score_energy, score_maxlogit, score_msp, Temperature};
use atli_core::synthetic::{run_benchmark, BenchmarkOptions, OodKind, SyntheticConfig};
use atli_core::tensor_io::{
    load_matrix_auto, save_matrix, save_vector, sort_logits_desc, FeatureMatrix, Format,
    LabelVector, LinearHead, LogitMatrix, Provenance,
};
use clap::{Args, ValueEnum};
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::Failure;

fn load_logits(path: &Path) -> Result<LogitMatrix, Failure> {
    Ok(LogitMatrix::new(load_matrix_auto(path)?)?)
}

fn load_scores(path: &Path) -> Result<Vec<f64>, Failure> {
    let m = load_matrix_auto(path)?;
    if m.cols() != 1 {
        return Err(Failure::contract(format!(
            "{} holds a {}x{} matrix, expected a score vector",
            path.display(),
            m.rows(),
            m.cols()
        )));
    }
    Ok(m.into_vec())
}

fn prepare_output(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
        }
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn finish(mut manifest: RunManifest, outputs: &[&Path]) -> Result<Vec<PathBuf>, Failure> {
    for p in outputs {
        manifest.output(p);
    }
    let manifest_path = manifest.finish()?;
    let mut written: Vec<PathBuf> = outputs.iter().map(|p| p.to_path_buf()).collect();
    written.push(manifest_path);
    Ok(written)
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    /// Training-set logits (N x C), .npy or .csv
    pub train_logits: PathBuf,
    /// Pseudo-OOD logits (M x C)
    pub pseudo_logits: PathBuf,
    /// Fraction of ranks kept in the integration set
    #[arg(long, default_value_t = DEFAULT_P)]
    pub p: f64,
    /// Number of training rows sampled for calibration
    #[arg(long, default_value_t = DEFAULT_D)]
    pub d: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Score ranks for selection on raw, unoriented columns
    #[arg(long)]
    pub no_orient: bool,
    /// Output parameter file (JSON)
    #[arg(long)]
    pub out: PathBuf,
}

pub fn calibrate(args: &CalibrateArgs) -> Result<Vec<PathBuf>, Failure> {
    let mut manifest = RunManifest::start("calibrate", args);
    manifest.input("train_logits", &args.train_logits)?;
    manifest.input("pseudo_logits", &args.pseudo_logits)?;
    manifest.seed("subsample", args.seed);

    let train = load_logits(&args.train_logits)?;
    let pseudo = load_logits(&args.pseudo_logits)?;
    if train.n_classes() != pseudo.n_classes() {
        return Err(Failure::contract(format!(
            "class count mismatch: train logits have shape ({}, {}), pseudo logits have shape ({}, {})",
            train.n_samples(),
            train.n_classes(),
            pseudo.n_samples(),
            pseudo.n_classes()
        )));
    }
    if args.d == 0 {
        return Err(Failure::contract("--d must be >= 1"));
    }
    let input = CalibrationInput::subsampled(
        &sort_logits_desc(&train, Provenance::Train),
        sort_logits_desc(&pseudo, Provenance::Pseudo),
        args.d,
        args.seed,
    )?;
    let params = calibrate_with(&input, args.p, !args.no_orient)?;
    manifest.n_classes = Some(params.n_classes);

    prepare_output(&args.out)?;
    save_params(&params, &args.out)?;
    finish(manifest, &[&args.out])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMethod {
    Msp,
    Maxlogit,
    Energy,
    Atli,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    /// Logits to score (N x C)
    pub logits: PathBuf,
    #[arg(long, value_enum)]
    pub method: ScoreMethod,
    /// Calibrated parameters, required for atli
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Energy temperature
    #[arg(long, default_value_t = 1.0)]
    pub temp: f64,
    /// Output score vector, .npy or .csv
    #[arg(long)]
    pub out: PathBuf,
}

pub fn score(args: &ScoreArgs) -> Result<Vec<PathBuf>, Failure> {
    let mut manifest = RunManifest::start("score", args);
    let format = Format::from_path(&args.out)?;
    let params = match (args.method, &args.params) {
        (ScoreMethod::Atli, None) => {
            return Err(Failure::contract("--method atli requires --params"));
        }
        (ScoreMethod::Atli, Some(path)) => {
            manifest.input("params", path)?;
            Some(load_params(path)?)
        }
        _ => None,
    };
    let temp = Temperature::new(args.temp)?;
    manifest.input("logits", &args.logits)?;
    let logits = load_logits(&args.logits)?;
    manifest.n_classes = Some(logits.n_classes());

    let scores = match args.method {
        ScoreMethod::Msp => score_msp(&logits),
        ScoreMethod::Maxlogit => score_maxlogit(&logits),
        ScoreMethod::Energy => score_energy(&logits, temp),
        ScoreMethod::Atli => {
            let params = params.expect("checked above");
            score_atli(&sort_logits_desc(&logits, Provenance::Test), &params)?
        }
    };

    prepare_output(&args.out)?;
    save_vector(scores.as_slice(), &args.out, format)?;
    finish(manifest, &[&args.out])
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// ID score vector
    pub id_scores: PathBuf,
    /// One or more OOD score vectors
    #[arg(required = true)]
    pub ood_scores: Vec<PathBuf>,
    /// Label for the method column
    #[arg(long, default_value = "score")]
    pub method: String,
    /// Output CSV table; a JSON table is written next to it
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct EvalRow {
    method: String,
    ood_dataset: String,
    auroc: f64,
    fpr95: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    combined: f64,
}

impl EvalRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{:.2},{:.2}\n",
            self.method,
            self.ood_dataset,
            100.0 * self.auroc,
            100.0 * self.fpr95
        )
    }
}

pub fn eval(args: &EvalArgs) -> Result<Vec<PathBuf>, Failure> {
    let mut manifest = RunManifest::start("eval", args);
    manifest.input("id_scores", &args.id_scores)?;
    let id = load_scores(&args.id_scores)?;

    let mut rows = Vec::with_capacity(args.ood_scores.len() + 1);
    for path in &args.ood_scores {
        manifest.input("ood_scores", path)?;
        let ood = load_scores(path)?;
        let r: EvalResult = eval_pair(&id, &ood)?;
        rows.push(EvalRow {
            method: args.method.clone(),
            ood_dataset: dataset_name(path),
            auroc: r.auroc,
            fpr95: r.fpr95,
            lambda: Some(r.lambda),
            combined: r.combined,
        });
    }
    let n = rows.len() as f64;
    let auroc = rows.iter().map(|r| r.auroc).sum::<f64>() / n;
    let fpr95 = rows.iter().map(|r| r.fpr95).sum::<f64>() / n;
    rows.push(EvalRow {
        method: args.method.clone(),
        ood_dataset: "average".into(),
        auroc,
        fpr95,
        lambda: None,
        combined: auroc - fpr95,
    });

    let mut csv = String::from("method,ood_dataset,auroc,fpr95\n");
    rows.iter().for_each(|r| csv.push_str(&r.csv_line()));
    let json_path = args.out.with_extension("json");
    let json = serde_json::to_string_pretty(&rows).map_err(|e| Failure::data(e.to_string()))?;

    prepare_output(&args.out)?;
    write_text(&args.out, &csv)?;
    write_text(&json_path, &json)?;
    print!("{csv}");
    finish(manifest, &[&args.out, &json_path])
}

#[derive(Debug, Args, Serialize)]
pub struct TopkArgs {
    /// ID logits
    pub id_logits: PathBuf,
    /// OOD logits
    pub ood_logits: PathBuf,
    /// Output CSV with one row per rank
    #[arg(long)]
    pub out: PathBuf,
}

pub fn topk_analysis(args: &TopkArgs) -> Result<Vec<PathBuf>, Failure> {
    let mut manifest = RunManifest::start("topk-analysis", args);
    manifest.input("id_logits", &args.id_logits)?;
    manifest.input("ood_logits", &args.ood_logits)?;
    let id = load_logits(&args.id_logits)?;
    let ood = load_logits(&args.ood_logits)?;
    let rows = rank_analysis(
        &sort_logits_desc(&id, Provenance::Test),
        &sort_logits_desc(&ood, Provenance::Test),
    )?;
    manifest.n_classes = Some(id.n_classes());

    let mut csv = String::from("rank,raw_auroc,sign,oriented_score\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.rank, r.raw_auroc, r.sign, r.oriented_score
        ));
    }
    prepare_output(&args.out)?;
    write_text(&args.out, &csv)?;
    finish(manifest, &[&args.out])
}

#[derive(Debug, Args, Serialize)]
pub struct PseudoGenArgs {
    /// Training penultimate features (N x d)
    #[arg(long)]
    pub features: PathBuf,
    /// Training labels, one integer per row
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Head weights (C x d)
    #[arg(long)]
    pub head_weights: PathBuf,
    /// Head bias (C)
    #[arg(long)]
    pub head_bias: PathBuf,
    /// Logits of input-space mixed samples produced elsewhere
    #[arg(long)]
    pub mixup_logits: Option<PathBuf>,
    /// Mix features instead of inputs (exact only for linear models)
    #[arg(long, conflicts_with = "mixup_logits")]
    pub feature_mixup: bool,
    /// Number of pseudo-OOD rows; defaults to the number of feature rows
    #[arg(long)]
    pub n_total: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub mix_fraction: f64,
    #[arg(long, default_value_t = 10)]
    pub oversample: usize,
    #[arg(long, default_value_t = 0.10)]
    pub quantile: f64,
    #[arg(long, default_value_t = atli_core::pseudo_ood::DEFAULT_EPSILON_SCALE)]
    pub epsilon_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output logits (.npy or .csv); a JSON sidecar is written next to it
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct PseudoSidecar<'a> {
    config: &'a PseudoConfig,
    mixup_source: &'static str,
    n_mix: usize,
    n_vos: usize,
    mix_pairs: &'a [(usize, usize)],
}

pub fn pseudo_gen(args: &PseudoGenArgs) -> Result<Vec<PathBuf>, Failure> {
    let mut manifest = RunManifest::start("pseudo-gen", args);
    let format = Format::from_path(&args.out)?;
    manifest.seed("pseudo", args.seed);
    manifest.input("features", &args.features)?;
    manifest.input("head_weights", &args.head_weights)?;
    manifest.input("head_bias", &args.head_bias)?;

    let features = FeatureMatrix::new(load_matrix_auto(&args.features)?)?;
    let bias = load_matrix_auto(&args.head_bias)?.into_vec();
    let head = LinearHead::new(load_matrix_auto(&args.head_weights)?, bias)?;
    let labels = match &args.labels {
        Some(path) => {
            manifest.input("labels", path)?;
            Some(LabelVector::from_matrix(
                &load_matrix_auto(path)?,
                head.n_classes(),
            )?)
        }
        None => None,
    };
    let external = match &args.mixup_logits {
        Some(path) => {
            manifest.input("mixup_logits", path)?;
            Some(load_logits(path)?)
        }
        None => None,
    };
    let (source, source_name) = match (&external, args.feature_mixup) {
        (Some(logits), _) => (MixupSource::External(logits), "external"),
        (None, true) => (MixupSource::FeatureFallback, "feature"),
        (None, false) => (MixupSource::None, "none"),
    };

    let cfg = PseudoConfig {
        n_total: args.n_total.unwrap_or(features.n_samples()),
        mix_fraction: args.mix_fraction,
        vos_oversample: args.oversample,
        vos_quantile: args.quantile,
        epsilon_scale: args.epsilon_scale,
        seed: args.seed,
        ..PseudoConfig::default()
    };
    let view = TrainingView {
        features: Some(&features),
        labels: labels.as_ref(),
        head: Some(&head),
    };
    let pseudo = generate_pseudo_logits(view, source, &cfg)?;
    manifest.n_classes = Some(pseudo.logits.n_classes());

    let sidecar_path = args.out.with_extension("json");
    let sidecar = PseudoSidecar {
        config: &cfg,
        mixup_source: source_name,
        n_mix: pseudo.n_mix,
        n_vos: pseudo.n_vos,
        mix_pairs: &pseudo.mix_pairs,
    };
    let sidecar_text =
        serde_json::to_string_pretty(&sidecar).map_err(|e| Failure::data(e.to_string()))?;

    prepare_output(&args.out)?;
    save_matrix(pseudo.logits.matrix(), &args.out, format)?;
    write_text(&sidecar_path, &sidecar_text)?;
    finish(manifest, &[&args.out, &sidecar_path])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SignArg {
    Adaptive,
    AllPositive,
    AllNegative,
}

impl From<SignArg> for SignMode {
    fn from(s: SignArg) -> Self {
        match s {
            SignArg::Adaptive => SignMode::Adaptive,
            SignArg::AllPositive => SignMode::AllPositive,
            SignArg::AllNegative => SignMode::AllNegative,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// OOD set to build; repeat for several, defaults to all
    #[arg(long = "ood-kind", value_parser = parse_ood_kind)]
    pub ood_kind: Vec<OodKind>,
    #[arg(long, default_value_t = DEFAULT_P)]
    pub p: f64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub l2: f64,
    /// Training rows used for calibration, defaults to all
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long, value_enum, default_value_t = SignArg::Adaptive)]
    pub signs: SignArg,
    /// Output CSV report; a JSON report is written next to it
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_ood_kind(s: &str) -> Result<OodKind, String> {
    s.parse().map_err(|e: atli_core::Error| e.to_string())
}

pub fn bench_synthetic(args: &BenchArgs) -> Result<Vec<PathBuf>, Failure> {
    let mut manifest = RunManifest::start("bench-synthetic", args);
    manifest.seed("data", args.seed);
    let cfg = SyntheticConfig {
        n_classes: args.classes,
        input_dim: args.dim,
        seed: args.seed,
        ood_kinds: if args.ood_kind.is_empty() {
            OodKind::ALL.to_vec()
        } else {
            args.ood_kind.clone()
        },
        epochs: args.epochs,
        learning_rate: args.lr,
        l2: args.l2,
        ..SyntheticConfig::default()
    };
    let opts = BenchmarkOptions {
        p: args.p,
        calibration_size: args.d,
        sign_mode: args.signs.into(),
        ..BenchmarkOptions::default()
    };
    let report = run_benchmark(&cfg, &opts)?;
    manifest.n_classes = Some(cfg.n_classes);

    let json_path = args.out.with_extension("json");
    let csv = report.to_csv();
    prepare_output(&args.out)?;
    write_text(&args.out, &csv)?;
    write_text(&json_path, &report.to_json()?)?;
    print!("{csv}");
    eprintln!("id accuracy {:.4}", report.id_accuracy);
    finish(manifest, &[&args.out, &json_path])
}
