use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use sievae_cli::config::ExperimentConfig;
use sievae_cli::record::RunStatus;
use sievae_cli::run::{read_metrics_csv, METRICS_COLUMNS};
use sievae_cli::sweep::{plan_cells, run_sweep};

const TINY: &str = "
[counts]
train_healthy = 8
val = 2
test_healthy = 4
test_unhealthy = 4
[train]
reinit_epochs = [2]
post_reinit_epochs = 2
[sweep]
impurity_ratios = [0.0, 0.25]
gammas = [1.3, 1.5]
seeds = [1]
";

fn sievae(dir: &Path, args: &[&str]) -> std::process::Output {
    let config = dir.join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    Command::new(env!("CARGO_BIN_EXE_sievae"))
        .current_dir(dir)
        .arg("--config")
        .arg(&config)
        .args(args)
        .output()
        .unwrap()
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn generate_is_idempotent_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    assert!(sievae(dir.path(), &["--out", "a", "generate"]).status.success());
    assert!(sievae(dir.path(), &["--out", "b", "generate"]).status.success());
    let a = tree(&dir.path().join("a"));
    assert_eq!(a, tree(&dir.path().join("b")));
    let mut roots: Vec<&str> = a.keys().map(|k| k.split('/').next().unwrap()).collect();
    roots.sort();
    roots.dedup();
    assert_eq!(roots, ["impurity-0", "impurity-0.25"]);

    // 8 healthy + 2 injected train, 2 val, 4 + 4 test.
    let manifest = String::from_utf8(a["impurity-0.25/manifest.csv"].clone()).unwrap();
    assert_eq!(manifest.lines().count() - 1, 8 + 2 + 2 + 4 + 4);
    let clean = String::from_utf8(a["impurity-0/manifest.csv"].clone()).unwrap();
    assert_eq!(clean.lines().count() - 1, 8 + 2 + 4 + 4);
    assert!(!clean.contains("train-u-"));
}

#[test]
fn generate_with_only_the_clean_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("clean.toml");
    std::fs::write(&config, TINY.replace("impurity_ratios = [0.0, 0.25]", "impurity_ratios = [0.0]")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sievae"))
        .current_dir(dir.path())
        .args(["--config", config.to_str().unwrap(), "--out", "g", "generate"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let entries: Vec<String> = std::fs::read_dir(dir.path().join("g"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(entries, ["impurity-0"]);
}

#[test]
fn train_from_generated_bundle() {
    let dir = tempfile::tempdir().unwrap();
    assert!(sievae(dir.path(), &["--out", "gen", "generate"]).status.success());
    let run = |out: &str, extra: &[&str]| {
        let mut args = vec!["--out", out, "train", "--dataset", "gen/impurity-0.25"];
        args.extend_from_slice(extra);
        let o = sievae(dir.path(), &args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        dir.path().join(out)
    };
    let a = run("a", &["--gamma", "1.05"]);
    let b = run("b", &["--gamma", "1.05"]);
    for f in ["history.csv", "removals.csv", "events.csv", "audit.csv", "scores.csv", "metrics.csv", "model.ckpt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let record: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["status"], "ok");
    for artifact in record["artifacts"].as_array().unwrap() {
        assert!(a.join(artifact.as_str().unwrap()).is_file(), "{artifact}");
    }
    assert!(a.join("error_maps/test-u-00000.pgm").is_file());

    let base = run("base", &["--no-removal"]);
    assert_eq!(
        std::fs::read_to_string(base.join("removals.csv")).unwrap(),
        "epoch,sample_id,loss,threshold,true_label\n"
    );
}

#[test]
fn train_with_missing_dataset_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = sievae(dir.path(), &["--out", "t", "train", "--dataset", "does-not-exist"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("does-not-exist"));
}

#[test]
fn bad_config_key_fails_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[sweep]\ngamma = [1.3]\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_sievae"))
        .args(["--config", config.to_str().unwrap(), "generate"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("sweep.gamma"));
}

#[test]
fn sweep_counts_resumes_and_isolates_failures() {
    let config = ExperimentConfig::from_toml(None, TINY).unwrap();
    let four_by_five = ExperimentConfig::from_toml(None, "sweep.seeds = [3]\n").unwrap();
    let cells = plan_cells(&four_by_five);
    assert_eq!(cells.iter().filter(|c| c.gamma.is_some()).count(), 20);
    assert_eq!(cells.iter().filter(|c| c.gamma.is_none()).count(), 4);

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let first = run_sweep(&config, out, 2).unwrap();
    assert_eq!((first.rows.len(), first.resumed, first.failed()), (6, 0, 0));
    let metrics = std::fs::read(out.join("metrics.csv")).unwrap();
    let header = String::from_utf8_lossy(&metrics).lines().next().unwrap().to_string();
    assert_eq!(header, METRICS_COLUMNS.join(","));

    std::fs::remove_dir_all(out.join("cells/seed-1/impurity-0.25/gamma-1.3")).unwrap();
    let second = run_sweep(&config, out, 1).unwrap();
    assert_eq!((second.resumed, second.failed()), (5, 0));
    assert_eq!(std::fs::read(out.join("metrics.csv")).unwrap(), metrics);

    // A file where a cell directory should go makes that one cell fail.
    std::fs::remove_dir_all(out.join("cells/seed-1/impurity-0/baseline")).unwrap();
    std::fs::write(out.join("cells/seed-1/impurity-0/baseline"), b"").unwrap();
    let third = run_sweep(&config, out, 1).unwrap();
    assert_eq!((third.resumed, third.failed()), (5, 1));
    let rows = read_metrics_csv(&out.join("metrics.csv")).unwrap();
    let failed: Vec<_> = rows.iter().filter(|r| r.status == RunStatus::Failed).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!((failed[0].impurity_ratio, failed[0].gamma, failed[0].auroc), (0.0, None, None));
    assert!(failed[0].error.is_some());
}
