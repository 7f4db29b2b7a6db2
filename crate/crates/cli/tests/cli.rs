use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn atli(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atli"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_csv(dir: &Path, name: &str, rows: &[Vec<f64>]) -> PathBuf {
    let text: String = rows
        .iter()
        .map(|r| {
            r.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
                + "\n"
        })
        .collect();
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn read_column(path: &Path) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.trim().parse().unwrap())
        .collect()
}

/// Deterministic pseudo-random logits without pulling in an RNG crate.
fn grid_logits(n: usize, c: usize, salt: u64) -> Vec<Vec<f64>> {
    let mut state = salt
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            (0..c)
                .map(|_| {
                    state = state
                        .wrapping_mul(6364136223846793005)
                        .wrapping_add(1442695040888963407);
                    ((state >> 33) % 2000) as f64 / 100.0 - 10.0
                })
                .collect()
        })
        .collect()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn calibrate_default_fraction_on_a_thousand_classes() {
    let dir = tempfile::tempdir().unwrap();
    write_csv(dir.path(), "train.csv", &grid_logits(30, 1000, 1));
    write_csv(dir.path(), "pseudo.csv", &grid_logits(20, 1000, 2));
    let out = atli(
        &[
            "calibrate",
            "train.csv",
            "pseudo.csv",
            "--out",
            "cal/params.json",
        ],
        dir.path(),
    );
    assert_ok(&out);
    let params = read_json(&dir.path().join("cal/params.json"));
    assert_eq!(params["m_set"].as_array().unwrap().len(), 100);
    assert_eq!(params["n_classes"], 1000);
    let manifest = read_json(&dir.path().join("cal/manifest.json"));
    assert_eq!(manifest["command"], "calibrate");
    assert_eq!(manifest["n_classes"], 1000);
    let digest = manifest["inputs"][0]["sha256"].as_str().unwrap();
    assert_eq!(digest.len(), 64);
    assert!(digest.chars().all(|c| c.is_ascii_hexdigit()));
}

#[test]
fn calibrate_records_subsample_size() {
    let dir = tempfile::tempdir().unwrap();
    write_csv(dir.path(), "train.csv", &grid_logits(5000, 4, 3));
    write_csv(dir.path(), "pseudo.csv", &grid_logits(100, 4, 4));
    let out = atli(
        &[
            "calibrate",
            "train.csv",
            "pseudo.csv",
            "--d",
            "1000",
            "--seed",
            "5",
            "--out",
            "params.json",
        ],
        dir.path(),
    );
    assert_ok(&out);
    let params = read_json(&dir.path().join("params.json"));
    assert_eq!(params["d_used"], 1000);
    assert_eq!(params["seed"], 5);
}

#[test]
fn calibrate_class_mismatch_is_a_contract_error() {
    let dir = tempfile::tempdir().unwrap();
    write_csv(dir.path(), "train.csv", &grid_logits(5, 10, 1));
    write_csv(dir.path(), "pseudo.csv", &grid_logits(4, 12, 2));
    let out = atli(
        &["calibrate", "train.csv", "pseudo.csv", "--out", "p.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("(5, 10)") && err.contains("(4, 12)"), "{err}");
    assert!(!dir.path().join("p.json").exists());
}

#[test]
fn malformed_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.csv"), "1,2\n3\n").unwrap();
    write_csv(dir.path(), "pseudo.csv", &grid_logits(4, 2, 2));
    let out = atli(
        &["calibrate", "bad.csv", "pseudo.csv", "--out", "p.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));

    fs::write(dir.path().join("trunc.npy"), b"\x93NUMPY\x01\x00").unwrap();
    let out = atli(
        &["score", "trunc.npy", "--method", "msp", "--out", "s.csv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));

    let out = atli(
        &["score", "missing.csv", "--method", "msp", "--out", "s.csv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn score_baselines() {
    let dir = tempfile::tempdir().unwrap();
    write_csv(dir.path(), "a.csv", &[vec![1.0, 3.0, 2.0]]);
    assert_ok(&atli(
        &[
            "score",
            "a.csv",
            "--method",
            "maxlogit",
            "--out",
            "s/max.csv",
        ],
        dir.path(),
    ));
    assert_eq!(read_column(&dir.path().join("s/max.csv")), vec![3.0]);
    let manifest = read_json(&dir.path().join("s/manifest.json"));
    assert_eq!(manifest["flags"]["method"], "maxlogit");

    write_csv(dir.path(), "z.csv", &[vec![0.0, 0.0]]);
    assert_ok(&atli(
        &[
            "score", "z.csv", "--method", "energy", "--temp", "1", "--out", "e.csv",
        ],
        dir.path(),
    ));
    let e = read_column(&dir.path().join("e.csv"));
    assert!((e[0] - 2f64.ln()).abs() < 1e-15);

    let out = atli(
        &[
            "score", "z.csv", "--method", "energy", "--temp", "0", "--out", "e.csv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn atli_needs_matching_params() {
    let dir = tempfile::tempdir().unwrap();
    write_csv(dir.path(), "x.csv", &grid_logits(10, 6, 9));
    let out = atli(
        &["score", "x.csv", "--method", "atli", "--out", "s.csv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));

    write_csv(dir.path(), "train.csv", &grid_logits(40, 5, 1));
    write_csv(dir.path(), "pseudo.csv", &grid_logits(40, 5, 2));
    assert_ok(&atli(
        &[
            "calibrate",
            "train.csv",
            "pseudo.csv",
            "--p",
            "0.4",
            "--out",
            "p.json",
        ],
        dir.path(),
    ));
    let out = atli(
        &[
            "score", "x.csv", "--method", "atli", "--params", "p.json", "--out", "s.csv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));

    assert_ok(&atli(
        &[
            "score",
            "train.csv",
            "--method",
            "atli",
            "--params",
            "p.json",
            "--out",
            "s.npy",
        ],
        dir.path(),
    ));
    assert!(dir.path().join("s.npy").exists());
}

#[test]
fn eval_tables() {
    let dir = tempfile::tempdir().unwrap();
    write_csv(dir.path(), "id.csv", &[vec![2.0], vec![3.0]]);
    write_csv(dir.path(), "far.csv", &[vec![0.0], vec![1.0]]);
    write_csv(dir.path(), "same.csv", &[vec![2.0], vec![3.0]]);
    let out = atli(
        &[
            "eval",
            "id.csv",
            "far.csv",
            "same.csv",
            "--method",
            "maxlogit",
            "--out",
            "t/table.csv",
        ],
        dir.path(),
    );
    assert_ok(&out);
    let csv = fs::read_to_string(dir.path().join("t/table.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,ood_dataset,auroc,fpr95");
    assert_eq!(lines[1], "maxlogit,far,100.00,0.00");
    assert_eq!(lines[2], "maxlogit,same,50.00,100.00");
    assert_eq!(lines[3], "maxlogit,average,75.00,50.00");
    assert_eq!(lines.len(), 4);

    let json = read_json(&dir.path().join("t/table.json"));
    let rows = json.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["auroc"], 1.0);
    assert_eq!(rows[0]["fpr95"], 0.0);
    assert_eq!(rows[1]["auroc"], 0.5);
    assert_eq!(rows[1]["fpr95"], 1.0);
    assert_eq!(rows[2]["auroc"], 0.75);
    assert_eq!(rows[2]["combined"], 0.25);

    fs::write(dir.path().join("empty.csv"), "").unwrap();
    let out = atli(
        &["eval", "id.csv", "empty.csv", "--out", "t2.csv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn topk_analysis_table() {
    let dir = tempfile::tempdir().unwrap();
    // rank 3 separates perfectly: ID rows have a high third value, OOD a low one
    let id: Vec<Vec<f64>> = (0..20)
        .map(|i| vec![10.0 + (i % 5) as f64, 8.0, 7.0 + 0.01 * i as f64, 1.0])
        .collect();
    let ood: Vec<Vec<f64>> = (0..20)
        .map(|i| vec![10.0 + (i % 3) as f64, 8.0, 2.0 + 0.01 * i as f64, 1.0])
        .collect();
    write_csv(dir.path(), "id.csv", &id);
    write_csv(dir.path(), "ood.csv", &ood);
    assert_ok(&atli(
        &["topk-analysis", "id.csv", "ood.csv", "--out", "ranks.csv"],
        dir.path(),
    ));
    let csv = fs::read_to_string(dir.path().join("ranks.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[2][0], "3");
    assert_eq!(rows[2][1].parse::<f64>().unwrap(), 1.0);

    assert_ok(&atli(
        &[
            "score", "id.csv", "--method", "maxlogit", "--out", "sid.csv",
        ],
        dir.path(),
    ));
    assert_ok(&atli(
        &[
            "score", "ood.csv", "--method", "maxlogit", "--out", "sood.csv",
        ],
        dir.path(),
    ));
    assert_ok(&atli(
        &["eval", "sid.csv", "sood.csv", "--out", "e.csv"],
        dir.path(),
    ));
    let eval = read_json(&dir.path().join("e.json"));
    assert_eq!(
        rows[0][1].parse::<f64>().unwrap(),
        eval[0]["auroc"].as_f64().unwrap()
    );
}

#[test]
fn pseudo_gen_writes_logits_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let features: Vec<Vec<f64>> = (0..30)
        .map(|i| vec![(i % 7) as f64, (i % 5) as f64 - 2.0, (i / 10) as f64])
        .collect();
    let labels: Vec<Vec<f64>> = (0..30).map(|i| vec![(i % 3) as f64]).collect();
    write_csv(dir.path(), "feat.csv", &features);
    write_csv(dir.path(), "labels.csv", &labels);
    write_csv(
        dir.path(),
        "w.csv",
        &[
            vec![1.0, 0.0, 0.5],
            vec![0.0, 1.0, -0.5],
            vec![-1.0, -1.0, 0.0],
        ],
    );
    write_csv(dir.path(), "b.csv", &[vec![0.0], vec![0.1], vec![-0.1]]);
    let args = [
        "pseudo-gen",
        "--features",
        "feat.csv",
        "--labels",
        "labels.csv",
        "--head-weights",
        "w.csv",
        "--head-bias",
        "b.csv",
        "--feature-mixup",
        "--n-total",
        "20",
        "--seed",
        "3",
        "--out",
        "out/pseudo.npy",
    ];
    assert_ok(&atli(&args, dir.path()));
    let first = fs::read(dir.path().join("out/pseudo.npy")).unwrap();
    let sidecar = read_json(&dir.path().join("out/pseudo.json"));
    assert_eq!(sidecar["n_mix"], 10);
    assert_eq!(sidecar["n_vos"], 10);
    assert_eq!(sidecar["config"]["seed"], 3);
    for pair in sidecar["mix_pairs"].as_array().unwrap() {
        let (a, b) = (
            pair[0].as_u64().unwrap() as usize,
            pair[1].as_u64().unwrap() as usize,
        );
        assert_ne!(a % 3, b % 3);
    }
    let manifests: Vec<_> = fs::read_dir(dir.path().join("out"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name() == "manifest.json")
        .collect();
    assert_eq!(manifests.len(), 1);

    assert_ok(&atli(&args, dir.path()));
    assert_eq!(fs::read(dir.path().join("out/pseudo.npy")).unwrap(), first);

    let no_source = [
        "pseudo-gen",
        "--features",
        "feat.csv",
        "--head-weights",
        "w.csv",
        "--head-bias",
        "b.csv",
        "--out",
        "x.npy",
    ];
    assert_eq!(atli(&no_source, dir.path()).status.code(), Some(2));
}

#[test]
fn bench_synthetic_small() {
    let dir = tempfile::tempdir().unwrap();
    let out = atli(
        &[
            "bench-synthetic",
            "--classes",
            "5",
            "--dim",
            "4",
            "--epochs",
            "30",
            "--seed",
            "2",
            "--ood-kind",
            "scaled_cov",
            "--ood-kind",
            "deflated_midrank",
            "--out",
            "bench/report.csv",
        ],
        dir.path(),
    );
    assert_ok(&out);
    let csv = fs::read_to_string(dir.path().join("bench/report.csv")).unwrap();
    for method in ["msp", "maxlogit", "energy", "atli", "atli_p0"] {
        assert!(csv.contains(&format!("{method},scaled_cov,")));
        assert!(csv.contains(&format!("{method},deflated_midrank,")));
        assert!(csv.contains(&format!("{method},average,")));
    }
    assert!(!csv.contains("held_out_clusters"));
    let json = read_json(&dir.path().join("bench/report.json"));
    assert_eq!(json["config"]["n_classes"], 5);
    assert!(json["params"]["m_set"].is_array());

    let bad = atli(
        &["bench-synthetic", "--ood-kind", "nope", "--out", "r.csv"],
        dir.path(),
    );
    assert_eq!(bad.status.code(), Some(2));
    let small = atli(
        &["bench-synthetic", "--classes", "2", "--out", "r.csv"],
        dir.path(),
    );
    assert_eq!(small.status.code(), Some(2));
}
