use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rnm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rnm")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn core_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_kb_accepts_shipped_files() {
    let kbs: Vec<PathBuf> = fs::read_dir(core_dir().join("kb"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert!(!kbs.is_empty());
    let args: Vec<&str> = std::iter::once("validate-kb").chain(kbs.iter().map(|p| s(p))).collect();
    let out = rnm(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).matches(": ok").count(), kbs.len());
}

#[test]
fn validate_kb_reports_errors_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.kb");
    fs::write(&bad, "domain d\npred P(d)\nrule: forall x: P(x, x)\n").unwrap();
    let out = rnm(&["validate-kb", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("3:"), "{}", stdout(&out));
    assert!(stderr(&out).starts_with("error:"));
}

#[test]
fn unknown_subcommand_and_missing_files_fail() {
    assert!(!rnm(&["frobnicate"]).status.success());
    let out = rnm(&["train", "/nonexistent/spec.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("spec.toml"));
}

#[test]
fn gen_data_writes_graph_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = rnm(&["gen-data", "--out", s(dir.path()), "--n-images", "30", "--seed", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let nodes = fs::read_to_string(dir.path().join("nodes.tsv")).unwrap();
    assert_eq!(
        nodes.lines().filter(|l| !l.is_empty() && !l.starts_with('#')).count(),
        30
    );
    assert!(dir.path().join("edges.tsv").exists());
    let again = tempfile::tempdir().unwrap();
    rnm(&["gen-data", "--out", s(again.path()), "--n-images", "30", "--seed", "3"]);
    assert_eq!(nodes, fs::read_to_string(again.path().join("nodes.tsv")).unwrap());
}

#[test]
fn train_eval_and_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let spec = core_dir().join("configs/following_pairs.toml");
    let out = rnm(&["train", s(&spec), "--repeats", "1", "--output", s(&runs)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let metrics = stdout(&out);
    assert!(metrics.starts_with("repeat,"), "{metrics}");
    for f in [
        "metrics.csv",
        "lambdas.csv",
        "training_log.csv",
        "timing.csv",
        "config.echo",
        "checkpoint_0.json",
    ] {
        assert!(runs.join(f).exists(), "missing {f}");
    }

    let ck = runs.join("checkpoint_0.json");
    let out = rnm(&[
        "eval",
        s(&spec),
        "--checkpoint",
        s(&ck),
        "--output",
        s(&dir.path().join("eval")),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("mode,valid_accuracy,test_accuracy\nrnm_em,"));

    let data = dir.path().join("data");
    rnm(&["gen-data", "--out", s(&data), "--n-images", "20", "--seed", "9"]);
    let pred_dir = dir.path().join("pred");
    let out = rnm(&[
        "infer",
        "--checkpoint",
        s(&ck),
        "--kb",
        s(&core_dir().join("kb/following_pairs.kb")),
        "--nodes",
        s(&data.join("nodes.tsv")),
        "--edges",
        s(&data.join("edges.tsv")),
        "--relation",
        "link",
        "--output",
        s(&pred_dir),
        "--dump-network",
        s(&dir.path().join("network.txt")),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let preds = fs::read_to_string(pred_dir.join("predictions.txt")).unwrap();
    // One atom per image and digit, exactly one positive per image.
    assert_eq!(preds.lines().count(), 200);
    assert_eq!(
        preds
            .lines()
            .filter(|l| l.split_whitespace().nth(1) == Some("1"))
            .count(),
        20
    );
    assert!(fs::read_to_string(pred_dir.join("map_trace.csv"))
        .unwrap()
        .starts_with("step,objective"));
    assert!(dir.path().join("network.txt").exists());
}

#[test]
fn corrupted_checkpoint_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck.json");
    fs::write(&ck, "{\"version\": 1, \"mode\":").unwrap();
    let spec = core_dir().join("configs/following_pairs.toml");
    let out = rnm(&["eval", s(&spec), "--checkpoint", s(&ck)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error: checkpoint"), "{}", stderr(&out));
}
