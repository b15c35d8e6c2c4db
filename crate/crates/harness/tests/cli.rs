//! The `auxdistill` binary and the files it leaves behind.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use auxdistill_harness::audit::audit_run;
use auxdistill_harness::config::{ExperimentConfig, Overrides};
use auxdistill_harness::run::{load_metrics, run_experiment};

fn auxdistill(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_auxdistill"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn error_kind(out: &Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    let v: serde_json::Value =
        serde_json::from_str(line).unwrap_or_else(|_| panic!("structured error line, got {stderr}"));
    assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()));
    v["error"].as_str().unwrap().to_string()
}

fn quick(method: &str, alpha: f64, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply(&Overrides {
        method: Some(method.parse().unwrap()),
        alpha: Some(alpha),
        rounds: Some(2),
        seed: Some(3),
        out: Some(out.to_path_buf()),
        ..Default::default()
    });
    cfg
}

#[test]
fn successful_run_exits_zero_and_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = auxdistill(
        &[
            "run", "--method", "feddf+p", "--alpha", "0.5", "--rounds", "2", "--out", "o",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let records = load_metrics(dir.path().join("o/feddf_p_alpha0.5_seed0.jsonl")).unwrap();
    assert_eq!(records.iter().map(|r| r.round).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert!(records
        .iter()
        .all(|r| r.method == "FedDF+P" && r.alpha == 0.5 && r.wall_ms.is_none()));
    assert!(records[1..].iter().all(|r| r.mean_distill_loss.is_some()));
    assert!(dir.path().join("o/feddf_p_alpha0.5_seed0_model_p0.json").is_file());
}

#[test]
fn invalid_settings_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["run", "--method", "fedaux", "--alpha=-1"],
        vec!["run", "--method", "fedsgd"],
        vec!["run", "--method", "fedavg", "--participation", "1.5"],
        vec!["run", "--method", "fedaux", "--epsilon", "0"],
        vec!["run"],
    ] {
        let out = auxdistill(&args, dir.path());
        assert_eq!(
            out.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert_eq!(error_kind(&out), "config", "{args:?}");
    }
    let out = auxdistill(&["audit", "--method", "feddf"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "argument");
}

#[test]
fn missing_aux_data_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("noaux.toml"),
        r#"
method = "feddf"

[data.train]
source = "synthetic"
n = 200
spec = { kind = "two_moons", noise = 0.1 }

[data.test]
source = "synthetic"
n = 50
seed = 1
spec = { kind = "two_moons", noise = 0.1 }
"#,
    )
    .unwrap();
    let out = auxdistill(&["run", "--config", "noaux.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "config");
    // FedAVG does not need public data.
    let out = auxdistill(
        &["run", "--config", "noaux.toml", "--method", "fedavg", "--rounds", "1"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unreadable_inputs_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = auxdistill(&["run", "--config", "absent.toml"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_kind(&out), "io");

    fs::write(dir.path().join("train.csv"), "x0,x1,label\n0.5,oops,1\n").unwrap();
    fs::write(
        dir.path().join("bad.toml"),
        r#"
method = "fedavg"
[data.train]
source = "csv"
path = "train.csv"
[data.test]
source = "csv"
path = "train.csv"
"#,
    )
    .unwrap();
    let out = auxdistill(&["run", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn output_names_encode_method_alpha_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut stems = Vec::new();
    for method in ["fedavg", "feddf+p", "fedaux"] {
        for alpha in [0.01, 100.0] {
            let cfg = quick(method, alpha, dir.path());
            let artifacts = run_experiment(&cfg).unwrap();
            let name = artifacts.metrics.file_name().unwrap().to_string_lossy().into_owned();
            assert_eq!(artifacts.scores.is_some(), method == "fedaux");
            assert_eq!(artifacts.extractors.len(), usize::from(method == "fedaux"));
            stems.push(name);
        }
    }
    assert_eq!(
        stems,
        [
            "fedavg_alpha0.01_seed3.jsonl",
            "fedavg_alpha100_seed3.jsonl",
            "feddf_p_alpha0.01_seed3.jsonl",
            "feddf_p_alpha100_seed3.jsonl",
            "fedaux_alpha0.01_seed3.jsonl",
            "fedaux_alpha100_seed3.jsonl",
        ]
    );
    for stem in &stems {
        assert!(dir.path().join(stem).is_file());
    }
}

#[test]
fn repeated_cli_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut contents = Vec::new();
    for out_dir in ["a", "b"] {
        let out = auxdistill(
            &[
                "run", "--method", "fedaux", "--rounds", "2", "--seed", "9", "--out", out_dir,
            ],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        contents.push(fs::read(dir.path().join(out_dir).join("fedaux_alpha1_seed9.jsonl")).unwrap());
        contents.push(fs::read(dir.path().join(out_dir).join("fedaux_alpha1_seed9_scores.csv")).unwrap());
    }
    assert_eq!(contents[0], contents[2]);
    assert_eq!(contents[1], contents[3]);
}

#[test]
fn audit_reads_back_fedaux_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick("fedaux", 0.1, dir.path());
    run_experiment(&cfg).unwrap();
    let (entries, path) = audit_run(&cfg, 3).unwrap();
    assert_eq!(entries.len(), cfg.federation.n_clients * 5);
    assert!(entries
        .iter()
        .all(|e| e.neighbor_indices.len() <= 3 && !e.neighbor_indices.is_empty()));
    let table = fs::read_to_string(&path).unwrap();
    assert_eq!(table.lines().count(), entries.len() + 1);

    let out = auxdistill(
        &[
            "audit", "--method", "fedaux", "--alpha", "0.1", "--rounds", "2", "--seed", "3", "--k", "2", "--out",
        ],
        dir.path(),
    );
    // `--out` without a value is rejected by the argument parser.
    assert_eq!(out.status.code(), Some(2));
    let out = auxdistill(
        &[
            "audit", "--method", "fedaux", "--alpha", "0.1", "--rounds", "2", "--seed", "3", "--k", "2", "--out", ".",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn density_report_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = auxdistill(&["density-report", "--out", "d"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.matches("pearson r =").count(), 3);
    assert!(dir.path().join("d/density_report.csv").is_file());
}
