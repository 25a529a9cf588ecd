//! The `evprop` binary and the run driver behind it.

use std::path::Path;
use std::process::Command;

use evprop::baselines::Variant;
use evprop::cli::{cmd_eval, cmd_sensitivity, cmd_train, exit_code, RunConfig};
use evprop::Error;
use tempfile::TempDir;

const SMALL: &str = r#"
seed = 5
[benchmark]
kind = "ambiguous_blobs"
n_train = 240
n_test = 90
[train]
lr = 0.1
epochs = 8
[adapt]
lr = 0.2
es_iterations = 2
l2_iterations = 3
[sweep]
iterations = [0, 2]
alphas = [0.0, 1.0, 100.0]
lrs = [0.2]
"#;

fn small(dir: &Path, extra: &str) -> RunConfig {
    let mut cfg = RunConfig::from_toml(&format!("{SMALL}{extra}")).unwrap();
    cfg.output_dir = dir.to_path_buf();
    cfg
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_evprop"))
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(str::to_string)
        .collect()
}

#[test]
fn train_twice_gives_identical_snapshots() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let st = bin()
            .args(["--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .arg("train")
            .output()
            .unwrap();
        assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
        bytes.push(std::fs::read(out.join("snapshot.evps")).unwrap());
        assert!(out.join("history.csv.digest").exists());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn eval_writes_every_table() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    for verb in ["train", "eval", "sensitivity", "gen-data"] {
        let st = bin()
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .arg(verb)
            .output()
            .unwrap();
        assert!(st.status.success(), "{verb}: {}", String::from_utf8_lossy(&st.stderr));
    }
    assert_eq!(rows(&out.join("metrics.csv")).len(), Variant::ALL.len());
    assert_eq!(rows(&out.join("sweep_iterations.csv")).len(), 2);
    assert_eq!(rows(&out.join("sweep_alpha.csv")).len(), 3);
    assert_eq!(rows(&out.join("sensitivity.csv")).len(), 2 * 3);
    assert_eq!(rows(&out.join("traces_bp-es.csv")).len() % 90, 0);
    let test = std::fs::read_to_string(out.join("test.txt")).unwrap();
    assert_eq!(test.lines().count(), 90);
}

#[test]
fn zero_epochs_still_produce_a_snapshot() {
    let dir = TempDir::new().unwrap();
    let cfg = small(dir.path(), "").clone();
    let cfg = RunConfig {
        train: evprop::training::TrainConfig { epochs: 0, ..cfg.train },
        ..cfg
    };
    let trained = cmd_train(&cfg).unwrap();
    assert!(trained.history.is_empty());
    assert!(dir.path().join("snapshot.evps").exists());
}

#[test]
fn sweeps_have_expected_shape() {
    let dir = TempDir::new().unwrap();
    let cfg = small(dir.path(), "");
    let trained = cmd_train(&cfg).unwrap();
    let out = cmd_eval(&cfg, &trained).unwrap();

    let with_evidence = Variant::ALL.iter().filter(|v| v.uses_evidence()).count();
    assert_eq!(out.noise_rows.len(), 4 * with_evidence);

    let devs: Vec<f64> = out.alpha_rows.iter().map(|r| r.mean_weight_deviation).collect();
    assert!(devs.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{devs:?}");

    // T = 0 reproduces the multi-task row.
    let mtl = out.results.iter().find(|r| r.variant == Variant::Mtl).unwrap();
    let t0 = out.iteration_rows.iter().find(|r| r.iterations == 0).unwrap();
    assert_eq!(t0.report, mtl.report);
}

#[test]
fn single_point_sensitivity_matches_eval_row() {
    let dir = TempDir::new().unwrap();
    let cfg = small(dir.path(), "");
    let cfg = RunConfig {
        sweep: evprop::cli::SweepSection {
            iterations: vec![cfg.adapt.l2_iterations],
            alphas: vec![cfg.adapt.alpha],
            lrs: vec![cfg.adapt.lr],
            ..cfg.sweep.clone()
        },
        ..cfg
    };
    let trained = cmd_train(&cfg).unwrap();
    let grid = cmd_sensitivity(&cfg, &trained).unwrap();
    let eval = cmd_eval(&cfg, &trained).unwrap();
    let l2 = eval.results.iter().find(|r| r.variant == Variant::BpL2).unwrap();
    assert_eq!(grid.len(), 1);
    assert_eq!(grid[0].report, l2.report);
}

#[test]
fn mtl_only_run_gives_one_row_and_no_evidence_sweeps() {
    let dir = TempDir::new().unwrap();
    let cfg = small(dir.path(), "");
    let cfg = RunConfig {
        variants: vec![Variant::Mtl],
        ..cfg
    };
    let trained = cmd_train(&cfg).unwrap();
    let out = cmd_eval(&cfg, &trained).unwrap();
    assert_eq!(out.results.len(), 1);
    assert_eq!(rows(&dir.path().join("metrics.csv")).len(), 1);
    assert!(out.noise_rows.is_empty() && out.iteration_rows.is_empty());
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let bad = write_config(dir.path(), "unknown_key = 3\n");
    let st = bin().arg("--config").arg(&bad).arg("train").output().unwrap().status;
    assert_eq!(st.code(), Some(2));

    // A tampered snapshot fails its checksum.
    let good = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    assert!(bin()
        .arg("--config")
        .arg(&good)
        .arg("--out")
        .arg(&out)
        .arg("train")
        .status()
        .unwrap()
        .success());
    let snap = out.join("snapshot.evps");
    let mut bytes = std::fs::read(&snap).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&snap, bytes).unwrap();
    let st = bin()
        .arg("--config")
        .arg(&good)
        .arg("--out")
        .arg(&out)
        .arg("eval")
        .output()
        .unwrap()
        .status;
    assert_eq!(st.code(), Some(1));

    assert_eq!(exit_code(&Error::Config("x".into())), 2);
    assert_eq!(
        exit_code(&Error::Diverged {
            epoch: 0,
            step: 0,
            term: "loss".into(),
            value: f64::NAN
        }),
        3
    );
    assert_eq!(exit_code(&Error::Integrity("x".into())), 1);
}
