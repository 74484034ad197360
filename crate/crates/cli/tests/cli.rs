use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"
n_workers = 7
rates = [0.2]
methods = ["avg", "cent2p"]
attacks = ["sf", "gauss"]
data = [{ mode = "uniform" }]
seeds = [1]
[training]
rounds = 4
train_per_worker = 20
test_per_worker = 10
batch_size = 4
vote_batch_size = 8
eval_every = 2
"#;

fn clusterguard(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_clusterguard"));
    cmd.args(args).env_remove("CLUSTERGUARD_OUT");
    if let Some(p) = env_out {
        cmd.env("CLUSTERGUARD_OUT", p);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn run_then_summarize() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = tmp.path().join("out");
    let o = clusterguard(
        &["run", "-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let worst = stdout(&o);
    assert!(worst.lines().count() >= 3, "{worst}");
    let dir = out.join("tiny");
    assert!(dir.join("manifest.json").is_file());
    assert_eq!(fs::read_dir(dir.join("cells")).unwrap().count(), 4);

    // a second run without --force must not clobber the results
    let again = clusterguard(
        &["run", "-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()],
        None,
    );
    assert_eq!(code(&again), 2);
    assert!(String::from_utf8_lossy(&again.stderr).contains("force"));

    let s = clusterguard(&["summarize", dir.to_str().unwrap()], None);
    assert_eq!(code(&s), 0, "{}", String::from_utf8_lossy(&s.stderr));
    assert!(stdout(&s).contains("Cent2P"));
    for f in ["ranking.tsv", "series.tsv", "table.tsv"] {
        assert!(dir.join("summary").join(f).is_file(), "{f}");
    }
}

#[test]
fn overrides_and_env_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let o = clusterguard(
        &[
            "run",
            "-c",
            cfg.to_str().unwrap(),
            "--set",
            "name=env.run",
            "--set",
            "methods=[\"cwm\"]",
        ],
        Some(tmp.path()),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_dir(tmp.path().join("env.run").join("cells")).unwrap().count(), 2);
}

#[test]
fn dry_run_prints_resolved_config() {
    let o = clusterguard(&["run", "--dry-run", "--set", "training.rounds=3"], None);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("rounds = 3"));
}

#[test]
fn bad_input_is_a_usage_error() {
    assert_eq!(code(&clusterguard(&["certify", "--rule", "bogus"], None)), 2);
    assert_eq!(code(&clusterguard(&["run", "--dry-run", "--set", "nope=1"], None)), 2);
    assert_eq!(code(&clusterguard(&["certify", "--rule", "cwm", "--n", "40"], None)), 2);
    assert_eq!(code(&clusterguard(&["frobnicate"], None)), 2);
}

#[test]
fn certify_reports_and_zero_trials_are_empty() {
    let o = clusterguard(&["certify", "--rule", "CenterwO,MeanwO", "--trials", "40"], None);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.contains("\tpass\t")).count(), 8);

    let o = clusterguard(&["certify", "--rule", "krum", "--trials", "0"], None);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().count(), 2);
}

#[test]
fn certify_writes_report_file() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("report.tsv");
    let o = clusterguard(
        &["certify", "--rule", "cwtm", "--trials", "20", "--kind", "far", "-o", path.to_str().unwrap()],
        None,
    );
    assert!(code(&o) <= 1);
    assert!(stdout(&o).is_empty());
    assert!(fs::read_to_string(path).unwrap().contains("CWTM"));
}

#[test]
fn approx_check_passes() {
    let o = clusterguard(&["approx-check", "--trials", "100", "--n-max", "9"], None);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("0 violations"));
}

#[test]
fn summarize_missing_dir_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = clusterguard(&["summarize", tmp.path().join("absent").to_str().unwrap()], None);
    assert_eq!(code(&o), 1);
}
