use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use elf_cli::checkpoint::{Checkpoint, Model};
use elf_cli::commands::load_model;
use elf_core::verify::quadrature_normalization;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tempfile::TempDir;

fn elf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elf"))
        .args(args)
        .env_remove("ELF_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_csv(path: &Path, rows: usize, cols: usize, scale: &[f64], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let header = (0..cols).map(|c| format!("c{c}")).collect::<Vec<_>>().join(",");
    let mut text = header + "\n";
    for _ in 0..rows {
        let row: Vec<String> = (0..cols)
            .map(|c| format!("{}", scale[c] * rng.sample::<f64, _>(StandardNormal) + c as f64))
            .collect();
        text += &row.join(",");
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

/// Untrained synthetic model: every layer is the identity.
fn identity_model(dir: &TempDir) -> PathBuf {
    let out = dir.path().join("id.ckpt");
    let r = elf(&["train", "--dataset", "checkerboard", "--steps", "0", "--elf-hidden", "4",
        "--hypernet-hidden", "8,8", "--eval-points", "10", "--out", p(&out)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    out
}

fn small_trained(dir: &TempDir, dataset: &str) -> PathBuf {
    let out = dir.path().join(format!("{dataset}.ckpt"));
    let r = elf(&["train", "--dataset", dataset, "--steps", "150", "--elf-hidden", "8",
        "--hypernet-hidden", "16,16", "--flows", "2", "--eval-points", "500", "--seed", "3", "--out", p(&out)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    out
}

fn mean_ll(text: &str, split: &str) -> f64 {
    let line = text.lines().find(|l| l.starts_with(split)).unwrap_or_else(|| panic!("no {split} line in {text}"));
    line.split_whitespace().nth(3).unwrap().parse().unwrap()
}

#[test]
fn missing_out_is_usage_error() {
    let r = elf(&["train", "--dataset", "eight-gaussians", "--steps", "1"]);
    assert_eq!(code(&r), 64);
    assert!(stderr(&r).contains("--out"));
}

#[test]
fn bad_flags_are_usage_errors() {
    assert_eq!(code(&elf(&["train", "--no-such-flag"])), 64);
    assert_eq!(code(&elf(&["train", "--dataset", "moons", "--out", "x"])), 64);
    assert_eq!(code(&elf(&["train", "--dataset", "checkerboard", "--lr", "-1", "--out", "x"])), 64);
    assert_eq!(code(&elf(&["train", "--dataset", "checkerboard", "--lr-schedule", "halve:", "--out", "x"])), 64);
    assert_eq!(code(&elf(&["frobnicate"])), 64);
    let r = Command::new(env!("CARGO_BIN_EXE_elf"))
        .args(["bench", "--hidden", "8,16,32", "--batch-sizes", "4,8", "--reps", "1"])
        .env("ELF_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&r), 64);
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    let out = dir.path().join("m.ckpt");
    fs::write(&cfg, format!("dataset = \"eight-gaussians\"\nflows = 2\nelf_hidden = 5\nsteps = 0\neval_points = 10\nout = \"{}\"\n", p(&out))).unwrap();
    let r = elf(&["train", "--config", p(&cfg), "--elf-hidden", "6"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let model = load_model(&out).unwrap();
    assert_eq!(model.config.flows, 2);
    assert_eq!(model.config.elf_hidden, 6);
    assert_eq!(model.config.hypernet_hidden, vec![128; 4]);
    assert_eq!(model.config.kappa, 0.99);

    fs::write(&cfg, "dataset = \"eight-gaussians\"\nlayers = 3\n").unwrap();
    assert_eq!(code(&elf(&["train", "--config", p(&cfg), "--out", p(&out)])), 64);
}

#[test]
fn paper_faithful_sets_unit_kappa() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("m.ckpt");
    let r = elf(&["train", "--dataset", "checkerboard", "--steps", "0", "--paper-faithful", "--elf-hidden", "3",
        "--hypernet-hidden", "4", "--eval-points", "5", "--out", p(&out)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert_eq!(load_model(&out).unwrap().config.kappa, 1.0);
}

#[test]
fn training_writes_checkpoint_metrics_and_summary() {
    let dir = TempDir::new().unwrap();
    let out = small_trained(&dir, "eight-gaussians");
    let metrics = fs::read_to_string(dir.path().join("eight-gaussians.ckpt.metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 150);
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["step", "loss", "lr", "grad_norm", "mean_lip", "frac_normalized"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eight-gaussians.ckpt.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps_run"], 150);
    assert_eq!(summary["splits"].as_array().unwrap().len(), 3);
    assert_eq!(load_model(&out).unwrap().step, 150);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let path = small_trained(&dir, "checkerboard");
    let bytes = fs::read(&path).unwrap();
    let model = Model::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(model.to_checkpoint().to_bytes(), bytes);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = elf_core::Tensor::from_vec(&[50, 2], (0..100).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
    let reloaded = load_model(&path).unwrap();
    let a = model.log_prob(&x).unwrap();
    let b = reloaded.log_prob(&x).unwrap();
    assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
}

#[test]
fn other_checkpoint_versions_are_refused() {
    let dir = TempDir::new().unwrap();
    let path = identity_model(&dir);
    let mut bytes = fs::read(&path).unwrap();
    bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
    fs::write(&path, bytes).unwrap();
    let r = elf(&["eval", "--model", p(&path), "-n", "10"]);
    assert_eq!(code(&r), 1);
    assert!(stderr(&r).contains("version 2"), "{}", stderr(&r));
}

#[test]
fn identity_model_scores_standard_normal_entropy() {
    let dir = TempDir::new().unwrap();
    let model = identity_model(&dir);
    let data = dir.path().join("normal.csv");
    write_csv(&data, 40_000, 2, &[1.0, 1.0], 5);
    // column c has mean c, so shift it back
    let text = fs::read_to_string(&data).unwrap();
    let mut shifted = String::from("a,b\n");
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        shifted += &format!("{},{}\n", v[0], v[1] - 1.0);
    }
    fs::write(&data, shifted).unwrap();
    let r = elf(&["eval", "--model", p(&model), "--data", p(&data)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let ll = mean_ll(&stdout(&r), "data");
    let expected = -(2.0 * PI).ln() - 1.0;
    assert!((ll - expected).abs() < 0.02, "{ll} vs {expected}");
}

#[test]
fn eval_is_repeatable() {
    let dir = TempDir::new().unwrap();
    let model = small_trained(&dir, "checkerboard");
    let a = elf(&["eval", "--model", p(&model), "-n", "3000"]);
    let b = elf(&["eval", "--model", p(&model), "-n", "3000"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    for split in ["train", "val", "test"] {
        assert!(mean_ll(&stdout(&a), split).is_finite());
    }
}

#[test]
fn csv_results_are_in_original_units() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("t.csv");
    let scale = [10.0, 0.5, 3.0];
    write_csv(&data, 2000, 3, &scale, 1);
    let out = dir.path().join("t.ckpt");
    let r = elf(&["train", "--csv", p(&data), "--steps", "0", "--elf-hidden", "4", "--hypernet-hidden", "8", "--out", p(&out)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let model = load_model(&out).unwrap();
    let std = model.standardizer.clone().unwrap();
    for (s, want) in std.std.iter().zip(scale) {
        assert!((s / want - 1.0).abs() < 0.1);
    }

    // identity flow on standardized data: log N(z) − Σ ln σ
    let r = elf(&["eval", "--model", p(&out), "--data", p(&data)]);
    let ll = mean_ll(&stdout(&r), "data");
    let text = fs::read_to_string(&data).unwrap();
    let mut total = 0.0;
    let mut n = 0.0;
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        for c in 0..3 {
            let z = (v[c] - std.mean[c]) / std.std[c];
            total += -0.5 * z * z - 0.5 * (2.0 * PI).ln() - std.std[c].ln();
        }
        n += 1.0;
    }
    assert!((ll - total / n).abs() < 1e-5, "{ll} vs {}", total / n);

    let r = elf(&["density-grid", "--model", p(&out), "--resolution", "4"]);
    assert_eq!(code(&r), 1);
    assert!(stderr(&r).contains("2-dim"));
}

#[test]
fn sampling_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let model = small_trained(&dir, "eight-gaussians");
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for out in [&a, &b] {
        let r = elf(&["sample", "--model", p(&model), "-n", "300", "--seed", "4", "--fp-max-iters", "5000", "--out", p(out)]);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
        assert!(stderr(&r).contains("mean fixed-point iterations"));
    }
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    assert_eq!(String::from_utf8(bytes).unwrap().lines().count(), 301);
}

#[test]
fn identity_samples_are_standard_normal() {
    let dir = TempDir::new().unwrap();
    let model = identity_model(&dir);
    let r = elf(&["sample", "--model", p(&model), "-n", "4000", "--seed", "1"]);
    assert_eq!(code(&r), 0);
    let text = stdout(&r);
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|s| s.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4000);
    for c in 0..2 {
        let mean = rows.iter().map(|r| r[c]).sum::<f64>() / 4000.0;
        let var = rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / 3999.0;
        assert!(mean.abs() < 0.06 && (var - 1.0).abs() < 0.08, "{mean} {var}");
    }
}

#[test]
fn sampling_reports_non_convergence() {
    let dir = TempDir::new().unwrap();
    let model = small_trained(&dir, "checkerboard");
    let r = elf(&["sample", "--model", p(&model), "-n", "200", "--fp-max-iters", "1"]);
    assert_eq!(code(&r), 3);
    assert!(stderr(&r).contains("failing sample indices: 0,"), "{}", stderr(&r));
}

#[test]
fn density_grid_shape_and_peak() {
    let dir = TempDir::new().unwrap();
    let model = identity_model(&dir);
    let out = dir.path().join("g.csv");
    let r = elf(&["density-grid", "--model", p(&model), "--range", "4", "--resolution", "400", "--out", p(&out)]);
    assert_eq!(code(&r), 0);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next(), Some("x1,x2,log_density"));
    assert_eq!(text.lines().count(), 160_001);

    let r = elf(&["density-grid", "--model", p(&model), "--range", "3", "--resolution", "61"]);
    let (mut best, mut at) = (f64::NEG_INFINITY, (0.0, 0.0));
    for line in stdout(&r).lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        if v[2] > best {
            best = v[2];
            at = (v[0], v[1]);
        }
    }
    assert!(at.0.abs() < 1e-12 && at.1.abs() < 1e-12);
    assert!((best + (2.0 * PI).ln()).abs() < 1e-12);
}

#[test]
fn trained_density_integrates_to_one() {
    let dir = TempDir::new().unwrap();
    let model = load_model(&small_trained(&dir, "eight-gaussians")).unwrap();
    let mass = quadrature_normalization(&model.stack, (-8.0, 8.0), 400).unwrap();
    assert!((mass - 1.0).abs() < 0.01, "{mass}");
}

#[test]
fn check_without_model_runs_constructions() {
    let r = elf(&["check"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let lines: Vec<serde_json::Value> = stdout(&r).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!lines.is_empty());
    assert!(lines.iter().all(|l| l["name"].as_str().unwrap().starts_with("construction") && l["pass"] == true));
}

#[test]
fn check_random_and_trained_models() {
    let r = elf(&["check", "--random", "--dims", "3", "--seed", "2"]);
    assert_eq!(code(&r), 0, "{}{}", stdout(&r), stderr(&r));
    for name in ["random-autoregressive-mask", "random-logdet", "random-lipschitz", "random-round-trip"] {
        assert!(stdout(&r).contains(name), "{name}");
    }
    let dir = TempDir::new().unwrap();
    let model = small_trained(&dir, "eight-gaussians");
    let r = elf(&["check", "--model", p(&model), "--fp-max-iters", "20000", "--fp-tol", "1e-10"]);
    assert_eq!(code(&r), 0, "{}{}", stdout(&r), stderr(&r));
}

#[test]
fn bench_prints_fits() {
    let r = elf(&["--threads", "1", "bench", "--hidden", "8,16,32", "--batch", "8", "--batch-sizes", "4,8", "--reps", "1"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let text = stdout(&r);
    assert!(text.contains("threads 1"));
    assert!(text.contains("R² ="));
}
