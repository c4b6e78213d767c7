use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fedkd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedkd"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn fedkd")
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
}

const SMALL: &str = "rounds = 3\nclients = 3\npublic_size = 40\n\n[data]\nsamples = 500\n\n[server.teacher]\nepochs = 3\n";

#[test]
fn score_reproduces_the_dirichlet_rows() {
    let dir = tempfile::tempdir().unwrap();
    let input = data("cifar10_dirichlet.csv");
    let out = fedkd(&["score", "--input", input.to_str().unwrap()], dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("method,distribution,arch,acc,loss,cpu,mem,comm,res,pqs,ces,ues")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 14);
    let row = rows
        .iter()
        .find(|r| r[0] == "FedKD-NAS" && r[2] == "MobileNetV2")
        .unwrap();
    let got: Vec<f64> = row[8..].iter().map(|v| v.parse().unwrap()).collect();
    for (g, want) in got.iter().zip([0.7092, 1.0, 44.4882, 62.7298]) {
        assert!((g - want).abs() < 5e-3, "{g} vs {want}");
    }
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    for out in ["a", "b"] {
        let o = fedkd(
            &[
                "simulate", "--config", "c.toml", "--seed", "0", "--out", out,
            ],
            dir.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in [
        "rounds.jsonl",
        "summary.json",
        "composite.csv",
        "config.toml",
    ] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    let rounds = fs::read_to_string(dir.path().join("a/rounds.jsonl")).unwrap();
    assert_eq!(rounds.lines().count(), 3);
}

#[test]
fn simulate_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let o = fedkd(
        &[
            "simulate",
            "--config",
            "c.toml",
            "--method",
            "fedavg",
            "--distribution",
            "dirichlet:0.5",
            "--rounds",
            "2",
            "--clients",
            "4",
            "--threads",
            "1",
            "--format",
            "csv",
            "--out",
            "o",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["method"], "fedavg");
    assert_eq!(summary["distribution"], "dirichlet:0.5");
    assert_eq!(summary["clients"], 4);
    let rounds = fs::read_to_string(dir.path().join("o/rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 3);
}

#[test]
fn compare_scores_all_methods() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let o = fedkd(
        &["compare", "--config", "c.toml", "--out", "cmp"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let composite = fs::read_to_string(dir.path().join("cmp/composite.csv")).unwrap();
    assert_eq!(composite.lines().count(), 5);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), composite);
}

#[test]
fn verify_lemmas_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedkd(
        &[
            "verify-lemmas",
            "--trials",
            "100",
            "--mc-trials",
            "500",
            "--out",
            "lemmas.json",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("lemmas.json")).unwrap()).unwrap();
    assert_eq!(report["drift"]["violations"], 0);
    assert_eq!(report["violations"].as_array().unwrap().len(), 0);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedkd(&["gradcheck", "--models", "10"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedkd(&["simulate", "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(fedkd(&[], dir.path()).status.code(), Some(1));
    assert_eq!(fedkd(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn config_errors_name_the_field_and_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[server]\ngamma = 2.0\n").unwrap();
    let o = fedkd(&["simulate", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("server.gamma"));
    fs::write(dir.path().join("typo.toml"), "[client]\nalpah = 1.0\n").unwrap();
    let o = fedkd(&["simulate", "--config", "typo.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpah"));
    let o = fedkd(&["simulate", "--distribution", "zipf"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedkd(&["score", "--input", "nope.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = fedkd(&["simulate", "--config", "nope.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
