use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fig_core::detectors::read_scores_csv;
use fig_core::metrics::auroc;

const SMALL: &str = "seed = 2
[data]
n_train = 200
n_test = 100
n_ood = 100
[model]
hidden = [16]
[pretrain]
epochs = 5
[finetune]
epochs = 1
[detector]
odin = false
";

fn fig(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fig"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn pretrained(dir: &Path) {
    let out = fig(dir, &["--config", "small.toml", "--out-dir", "p", "pretrain"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sample_writes_one_row_per_chain_and_trajectories() {
    let dir = setup();
    pretrained(dir.path());
    let out = fig(
        dir.path(),
        &["--config", "small.toml", "--out-dir", "s", "sample", "--checkpoint", "p/standard.ckpt", "--chains", "100", "--t-max", "100"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let samples = fs::read_to_string(dir.path().join("s/samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 101);
    let traj = fs::read_to_string(dir.path().join("s/trajectory.csv")).unwrap();
    assert!(traj.starts_with("chain,t,confidence,energy,x0,x1\n"));
    assert!(traj.lines().count() > 100);
    assert!(dir.path().join("s/manifest.toml").is_file());
}

#[test]
fn eval_reproduces_auroc_from_scores_alone() {
    let dir = setup();
    pretrained(dir.path());
    let out = fig(
        dir.path(),
        &["--config", "small.toml", "--out-dir", "d", "detect", "--checkpoint", "p/standard.ckpt"],
    );
    assert!(out.status.success());
    let scores = dir.path().join("d/scores/msp_ring.csv");
    let (id, ood) = read_scores_csv(&scores).unwrap();
    let expected = auroc(&id, &ood).unwrap().auroc;

    // No model and no config in this directory.
    let other = tempfile::tempdir().unwrap();
    fs::copy(&scores, other.path().join("ring.csv")).unwrap();
    let out = fig(other.path(), &["--out-dir", "e", "eval", "--scores", "ring.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(other.path().join("e/eval.csv")).unwrap();
    let row = table.lines().nth(1).unwrap();
    let value: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(value, expected);
}

#[test]
fn sweep_k_uses_default_list() {
    let dir = setup();
    pretrained(dir.path());
    let out = fig(
        dir.path(),
        &["--config", "small.toml", "--out-dir", "k", "sweep-k", "--checkpoint", "p/standard.ckpt"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(dir.path().join("k/k_sweep.csv")).unwrap();
    let ks: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ks, ["0", "0.01", "0.1", "0.4", "0.7", "1"]);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = setup();
    let out = fig(dir.path(), &["run", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--frobnicate"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = setup();
    fs::write(dir.path().join("bad.toml"), "[finetune]\nlearning_rate = 0.1\n").unwrap();
    let out = fig(dir.path(), &["--config", "bad.toml", "--out-dir", "o", "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn missing_dataset_fails_before_compute() {
    let dir = setup();
    fs::write(
        dir.path().join("csv.toml"),
        "[data]\nsource = \"csv\"\ntrain_path = \"nope/train.csv\"\ntest_path = \"nope/test.csv\"\n",
    )
    .unwrap();
    let out = fig(dir.path(), &["--config", "csv.toml", "--out-dir", "o", "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope/train.csv"));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn corrupt_checkpoint_is_a_runtime_failure() {
    let dir = setup();
    fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = fig(
        dir.path(),
        &["--config", "small.toml", "--out-dir", "o", "sample", "--checkpoint", "junk.ckpt"],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("junk.ckpt"));
}

#[test]
fn finetune_checks_checkpoint_dims() {
    let dir = setup();
    pretrained(dir.path());
    fs::write(dir.path().join("wide.toml"), SMALL.replace("hidden = [16]", "hidden = [32]")).unwrap();
    let out = fig(
        dir.path(),
        &["--config", "wide.toml", "--out-dir", "f", "finetune", "--checkpoint", "p/standard.ckpt"],
    );
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("[2, 32, 2]") && err.contains("[2, 16, 2]"), "{err}");
}

#[test]
fn run_twice_gives_identical_metrics() {
    let dir = setup();
    for out in ["a", "b"] {
        let o = fig(dir.path(), &["--config", "small.toml", "--seed", "4", "--out-dir", out, "run"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["metrics.csv", "comparison.csv", "logs/fig-k0.1.csv", "plots/embedding_fig-k0.1.csv", "manifest.toml"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}
