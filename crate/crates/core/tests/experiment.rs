use std::fs;
use std::path::PathBuf;

use rnm::experiment::{
    run_eval, run_sweep, run_train, DataSpec, EvalOverrides, ExperimentError, ExperimentSpec, SweepVariable,
};
use rnm::train::{Checkpoint, TrainError, TrainMode};

fn kb_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("kb/following_pairs.kb")
}

fn small_spec(noise_p: f64) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(
        kb_path(),
        DataSpec::FollowingPairs {
            n_train: 50,
            n_test: 50,
            n_valid: 0,
            noise_p,
            links_per_image: 2.0,
            images: None,
            labels: None,
        },
    );
    spec.seed = 7;
    spec.repeats = 2;
    spec.train.hidden = vec![16];
    spec.train.max_iterations = 5;
    spec.train.optimizer.lr = 0.01;
    spec
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut spec = small_spec(0.8);
    spec.output_dir = Some(a.path().to_path_buf());
    run_train(&spec).unwrap();

    // Second run from the echoed config, as a user would reproduce it.
    let echo = a.path().join("config.echo");
    let mut again = ExperimentSpec::load(&echo).unwrap();
    assert_eq!(again.seed, spec.seed);
    again.output_dir = Some(b.path().to_path_buf());
    run_train(&again).unwrap();
    for name in [
        "metrics.csv",
        "lambdas.csv",
        "training_log.csv",
        "checkpoint_0.json",
        "checkpoint_1.json",
    ] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
    assert!(a.path().join("timing.csv").exists());
}

#[test]
fn eval_reproduces_training_test_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_spec(1.0);
    spec.output_dir = Some(dir.path().to_path_buf());
    let report = run_train(&spec).unwrap();
    for run in &report.runs {
        let ck = Checkpoint::load(&dir.path().join(format!("checkpoint_{}.json", run.repeat))).unwrap();
        let eval = run_eval(&ck, &spec, run.repeat, &EvalOverrides::default()).unwrap();
        assert_eq!(eval.mode, TrainMode::RnmEm);
        assert_eq!(eval.test_accuracy, run.test_accuracy, "repeat {}", run.repeat);
    }
}

#[test]
fn eval_rejects_wrong_weight_count() {
    let spec = small_spec(1.0);
    let report = run_train(&ExperimentSpec {
        repeats: 1,
        ..spec.clone()
    })
    .unwrap();
    let ck = report.checkpoint(0).unwrap();
    let ov = EvalOverrides {
        mode: None,
        lambdas: Some(vec![1.0]),
    };
    assert!(matches!(run_eval(&ck, &spec, 0, &ov), Err(ExperimentError::Invalid(_))));
}

#[test]
fn corrupted_checkpoint_is_a_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec {
        repeats: 1,
        ..small_spec(1.0)
    };
    let ck = run_train(&spec).unwrap().checkpoint(0).unwrap();
    let path = dir.path().join("ck.json");
    let json = ck.to_json();
    fs::write(&path, &json[..json.len() / 2]).unwrap();
    assert!(Checkpoint::load(&path).is_err());
    fs::write(&path, json.replace("\"lambdas\"", "\"weights\"")).unwrap();
    assert!(Checkpoint::load(&path).is_err());
    assert!(matches!(
        Checkpoint::load(&dir.path().join("missing.json")),
        Err(TrainError::Checkpoint(_))
    ));
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}

#[test]
fn single_value_sweep_matches_train() {
    let spec = small_spec(0.6);
    let sweep = run_sweep(&spec, SweepVariable::NoiseP, &[0.6]).unwrap();
    let rnm = run_train(&spec).unwrap();
    let base = run_train(&ExperimentSpec {
        train: rnm::train::TrainConfig {
            mode: TrainMode::Baseline,
            ..spec.train.clone()
        },
        ..spec.clone()
    })
    .unwrap();
    assert_eq!(sweep.mean(0.6, TrainMode::RnmEm), rnm.mean_test_accuracy());
    assert_eq!(sweep.mean(0.6, TrainMode::Baseline), base.mean_test_accuracy());
    assert_eq!(sweep.rows.len(), 2 * spec.repeats);
}

#[test]
fn baseline_matches_rnm_without_rules() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(kb_path()).unwrap();
    let no_rules: String = text
        .lines()
        .filter(|l| !l.starts_with("rule:"))
        .map(|l| format!("{l}\n"))
        .collect();
    let kb = dir.path().join("plain.kb");
    fs::write(&kb, no_rules).unwrap();

    let mut spec = small_spec(1.0);
    spec.kb = kb;
    let rnm = run_train(&spec).unwrap();
    spec.train.mode = TrainMode::Baseline;
    let base = run_train(&spec).unwrap();
    for (a, b) in rnm.runs.iter().zip(&base.runs) {
        assert_eq!(a.test_accuracy, b.test_accuracy);
        assert_eq!(a.model.mlp.params(), b.model.mlp.params());
    }
}

#[test]
fn rules_beat_baseline_on_clean_links() {
    let spec = ExperimentSpec {
        repeats: 1,
        ..small_spec(1.0)
    };
    let rnm = run_train(&spec).unwrap();
    let mut base_spec = spec.clone();
    base_spec.train.mode = TrainMode::Baseline;
    let base = run_train(&base_spec).unwrap();
    assert!(
        rnm.mean_test_accuracy() > base.mean_test_accuracy(),
        "rnm {} baseline {}",
        rnm.mean_test_accuracy(),
        base.mean_test_accuracy()
    );
}

#[test]
fn bad_spec_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("spec.toml");
    fs::write(&p, "kb = \"x.kb\"\n[data]\nkind = \"nonsense\"\n").unwrap();
    assert!(matches!(ExperimentSpec::load(&p), Err(ExperimentError::Config { .. })));
    fs::write(
        &p,
        "kb = \"missing.kb\"\n[data]\nkind = \"following_pairs\"\nn_train = 4\nn_test = 4\nnoise_p = 1.0\n",
    )
    .unwrap();
    let spec = ExperimentSpec::load(&p).unwrap();
    assert!(spec.kb.is_absolute());
    assert!(run_train(&spec).is_err());
}
