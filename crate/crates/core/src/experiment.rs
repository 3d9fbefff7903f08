//! Experiment runner: configuration, repeated train/evaluate runs, sweeps
//! and CSV reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    generate_following_pairs, load_citation, load_citation_dir, split_dataset, DataError, Dataset, DigitSource,
    NoiseSpec, Split, SplitSetting,
};
use crate::grounding::GroundingOptions;
use crate::infer::{map_inference, MapConfig};
use crate::kb::{parse_kb, validate_kb, KbError, KnowledgeBase};
use crate::train::{
    accuracy, derive_seed, inference_lambdas, predict, train, Checkpoint, EvalSet, GroundedWorld, TrainConfig,
    TrainError, TrainMode, TrainedModel,
};

/// Seed streams derived from a repeat's seed.
const STREAM_SPLIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_TEST_MAP: u64 = 3;
const STREAM_TRAIN_WORLD: u64 = 4;
const STREAM_VALID_WORLD: u64 = 5;
const STREAM_TEST_WORLD: u64 = 6;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("knowledge base {path}: {source}")]
    Kb {
        path: PathBuf,
        #[source]
        source: KbError,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Citation network; `dir` holds nodes.tsv/edges.tsv or the public
    /// content/cites files.
    Citation {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        nodes: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        edges: Option<PathBuf>,
    },
    /// Separate train/valid/test worlds of linked digit images.
    FollowingPairs {
        n_train: usize,
        n_test: usize,
        #[serde(default)]
        n_valid: usize,
        noise_p: f64,
        #[serde(default = "one")]
        links_per_image: f64,
        /// idx image/label archives; synthetic digits when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        labels: Option<PathBuf>,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub setting: SplitSetting,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.9,
            valid_fraction: 0.1,
            setting: SplitSetting::SeparateWorlds,
        }
    }
}

fn default_repeats() -> usize {
    3
}

fn default_grid() -> Vec<f64> {
    vec![0.01, 0.1, 0.5, 1.0, 2.0, 5.0]
}

fn default_true() -> bool {
    true
}

fn default_cap() -> usize {
    crate::grounding::DEFAULT_GROUNDING_CAP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kb: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_true")]
    pub prune: bool,
    #[serde(default = "default_cap")]
    pub grounding_cap: usize,
    /// Shared fixed rule weights tried for frozen-weight modes.
    #[serde(default = "default_grid")]
    pub sbr_grid: Vec<f64>,
    pub data: DataSpec,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentSpec {
    pub fn new(kb: PathBuf, data: DataSpec) -> Self {
        ExperimentSpec {
            kb,
            output_dir: None,
            seed: 0,
            repeats: default_repeats(),
            prune: true,
            grounding_cap: default_cap(),
            sbr_grid: default_grid(),
            data,
            split: SplitSpec::default(),
            train: TrainConfig::default(),
        }
    }

    /// Reads a TOML spec; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io(path))?;
        let mut spec: ExperimentSpec = toml::from_str(&text).map_err(|e| ExperimentError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        spec.resolve_paths(base);
        Ok(spec)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            let joined = if p.is_relative() { base.join(&*p) } else { p.clone() };
            *p = std::path::absolute(&joined).unwrap_or(joined);
        };
        fix(&mut self.kb);
        if let Some(o) = &mut self.output_dir {
            fix(o);
        }
        match &mut self.data {
            DataSpec::Citation { dir, nodes, edges } => {
                for p in [dir, nodes, edges].into_iter().flatten() {
                    fix(p);
                }
            }
            DataSpec::FollowingPairs { images, labels, .. } => {
                for p in [images, labels].into_iter().flatten() {
                    fix(p);
                }
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serialises")
    }

    pub fn grounding_options(&self) -> GroundingOptions {
        GroundingOptions {
            prune: self.prune,
            cap: self.grounding_cap,
        }
    }

    pub fn repeat_seed(&self, repeat: usize) -> u64 {
        derive_seed(self.seed, repeat as u64)
    }
}

pub fn load_kb(path: &Path) -> Result<KnowledgeBase, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    parse_kb(&text).map_err(|source| ExperimentError::Kb {
        path: path.to_path_buf(),
        source,
    })
}

/// Diagnostics of a KB file, one per line, empty when valid.
pub fn validate_kb_file(path: &Path) -> Result<Vec<String>, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    Ok(match parse_kb(&text) {
        Ok(kb) => validate_kb(&kb)
            .iter()
            .map(|d| format!("{}:{d}", path.display()))
            .collect(),
        Err(e) => vec![format!("{}:{e}", path.display())],
    })
}

/// Data that stays fixed across repeats.
#[derive(Debug, Clone)]
pub enum Source {
    Citation(Dataset),
    Digits(DigitSource),
}

pub fn load_source(spec: &ExperimentSpec) -> Result<Source, ExperimentError> {
    Ok(match &spec.data {
        DataSpec::Citation { dir, nodes, edges } => Source::Citation(match (dir, nodes, edges) {
            (_, Some(n), Some(e)) => load_citation(n, e)?,
            (Some(d), _, _) => load_citation_dir(d)?,
            _ => {
                return Err(ExperimentError::Invalid(
                    "citation data needs 'dir' or both 'nodes' and 'edges'".into(),
                ))
            }
        }),
        DataSpec::FollowingPairs { images, labels, .. } => Source::Digits(match (images, labels) {
            (Some(i), Some(l)) => DigitSource::from_idx(i, l)?,
            (None, None) => DigitSource::Synthetic,
            _ => return Err(ExperimentError::Invalid("'images' and 'labels' go together".into())),
        }),
    })
}

/// Grounded worlds of one repeat.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub worlds: Vec<GroundedWorld>,
    pub train: usize,
    pub valid: Option<(usize, Vec<usize>)>,
    pub test: (usize, Vec<usize>),
}

impl Prepared {
    pub fn valid_set(&self) -> Option<EvalSet<'_>> {
        self.valid.as_ref().map(|(w, p)| EvalSet {
            world: &self.worlds[*w],
            patterns: p,
        })
    }

    pub fn test_set(&self) -> EvalSet<'_> {
        EvalSet {
            world: &self.worlds[self.test.0],
            patterns: &self.test.1,
        }
    }
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

pub fn prepare(
    kb: &KnowledgeBase,
    spec: &ExperimentSpec,
    source: &Source,
    repeat: usize,
) -> Result<Prepared, ExperimentError> {
    let seed = spec.repeat_seed(repeat);
    let opts = spec.grounding_options();
    match (source, &spec.data) {
        (Source::Citation(ds), _) => {
            let s = &spec.split;
            let split = split_dataset(
                ds,
                s.train_fraction,
                s.valid_fraction,
                s.setting,
                derive_seed(seed, STREAM_SPLIT),
            )?;
            match s.setting {
                SplitSetting::Transductive => {
                    let valid = split.indices(Split::Valid);
                    let test = split.indices(Split::Test);
                    let world = GroundedWorld::new(kb, split, &opts)?;
                    Ok(Prepared {
                        worlds: vec![world],
                        train: 0,
                        valid: (!valid.is_empty()).then_some((0, valid)),
                        test: (0, test),
                    })
                }
                SplitSetting::SeparateWorlds => {
                    let train = GroundedWorld::new(kb, split.world(Split::Train), &opts)?;
                    let test_ds = split.world(Split::Test);
                    let n_test = test_ds.len();
                    let mut worlds = vec![train, GroundedWorld::new(kb, test_ds, &opts)?];
                    let valid_ds = split.world(Split::Valid);
                    let valid = if valid_ds.is_empty() {
                        None
                    } else {
                        let n = valid_ds.len();
                        worlds.push(GroundedWorld::new(kb, valid_ds, &opts)?);
                        Some((2, all(n)))
                    };
                    Ok(Prepared {
                        worlds,
                        train: 0,
                        valid,
                        test: (1, all(n_test)),
                    })
                }
            }
        }
        (
            Source::Digits(digits),
            DataSpec::FollowingPairs {
                n_train,
                n_test,
                n_valid,
                noise_p,
                links_per_image,
                ..
            },
        ) => {
            let make = |n: usize, stream: u64, prefix: &str| {
                generate_following_pairs(
                    n,
                    NoiseSpec {
                        predictive_fraction: *noise_p,
                        seed: derive_seed(seed, stream),
                    },
                    digits,
                    *links_per_image,
                )
                .map(|d| d.with_id_prefix(prefix))
            };
            let train = make(*n_train, STREAM_TRAIN_WORLD, "train_")?.all_observed();
            let test = make(*n_test, STREAM_TEST_WORLD, "test_")?.all_hidden(Split::Test);
            let mut worlds = vec![
                GroundedWorld::new(kb, train, &opts)?,
                GroundedWorld::new(kb, test, &opts)?,
            ];
            let valid = if *n_valid > 0 {
                let v = make(*n_valid, STREAM_VALID_WORLD, "valid_")?.all_hidden(Split::Valid);
                worlds.push(GroundedWorld::new(kb, v, &opts)?);
                Some((2, all(*n_valid)))
            } else {
                None
            };
            Ok(Prepared {
                worlds,
                train: 0,
                valid,
                test: (1, all(*n_test)),
            })
        }
        _ => Err(ExperimentError::Invalid(
            "data source does not match the data spec".into(),
        )),
    }
}

/// Outcome of one repeat.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub repeat: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub train_accuracy: f64,
    pub valid_accuracy: Option<f64>,
    pub test_accuracy: f64,
    /// Shared weight picked on validation for frozen-weight modes.
    pub fixed_weight: Option<f64>,
    pub model: TrainedModel,
    /// Knowledge base the model was trained with.
    pub kb: KnowledgeBase,
    pub seconds: f64,
}

fn evaluate(
    mode: TrainMode,
    model: &TrainedModel,
    set: EvalSet<'_>,
    config: &TrainConfig,
    map_seed: u64,
) -> Result<f64, ExperimentError> {
    let pred = predict(mode, &model.mlp, &model.lambdas, set.world, config, map_seed)?;
    Ok(accuracy(
        &pred,
        &set.world.data.labels,
        set.patterns,
        set.world.data.mode,
    ))
}

/// Trains and evaluates one repeat.
pub fn run_repeat(
    kb: &KnowledgeBase,
    spec: &ExperimentSpec,
    prepared: &Prepared,
    repeat: usize,
) -> Result<RunResult, ExperimentError> {
    let start = Instant::now();
    let seed = spec.repeat_seed(repeat);
    let config = TrainConfig {
        seed: derive_seed(seed, STREAM_TRAIN),
        ..spec.train.clone()
    };
    let mode = config.mode;
    let train_world = &prepared.worlds[prepared.train];
    let valid = prepared.valid_set();
    let map_seed = derive_seed(seed, STREAM_TEST_MAP);

    let (model, used_kb, fixed_weight) = match mode {
        TrainMode::Sbr | TrainMode::Ltn if !kb.formulas.is_empty() => {
            let valid = valid.ok_or_else(|| {
                ExperimentError::Invalid(format!("{mode} mode selects rule weights on a validation set"))
            })?;
            let mut best: Option<(f64, TrainedModel, KnowledgeBase, f64)> = None;
            for &w in &spec.sbr_grid {
                let fixed = kb.with_fixed_weights(w);
                let model = train(&fixed, train_world, Some(valid), &config)?;
                let acc = evaluate(mode, &model, valid, &config, map_seed)?;
                if best.as_ref().is_none_or(|b| acc > b.0) {
                    best = Some((acc, model, fixed, w));
                }
            }
            let (_, model, fixed, w) = best.ok_or_else(|| ExperimentError::Invalid("empty weight grid".into()))?;
            (model, fixed, Some(w))
        }
        _ => (train(kb, train_world, valid, &config)?, kb.clone(), None),
    };

    let train_pats = train_world.data.observed_indices();
    let train_accuracy = evaluate(
        mode,
        &model,
        EvalSet {
            world: train_world,
            patterns: &train_pats,
        },
        &config,
        map_seed,
    )?;
    let valid_accuracy = match valid {
        Some(v) => Some(evaluate(mode, &model, v, &config, map_seed)?),
        None => None,
    };
    let test_accuracy = evaluate(mode, &model, prepared.test_set(), &config, map_seed)?;
    Ok(RunResult {
        repeat,
        seed,
        mode,
        train_accuracy,
        valid_accuracy,
        test_accuracy,
        fixed_weight,
        model,
        kb: used_kb,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Aggregated outcome of `repeats` runs.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub spec: ExperimentSpec,
    pub class_names: Vec<String>,
    pub runs: Vec<RunResult>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricsReport {
    pub fn mean_test_accuracy(&self) -> f64 {
        self.runs.iter().map(|r| r.test_accuracy).sum::<f64>() / self.runs.len().max(1) as f64
    }

    pub fn mean_valid_accuracy(&self) -> Option<f64> {
        let v: Vec<f64> = self.runs.iter().filter_map(|r| r.valid_accuracy).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("repeat,seed,mode,tnorm,train_accuracy,valid_accuracy,test_accuracy,fixed_weight,iterations,best_iteration\n");
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{},{:.6},{},{},{}",
                r.repeat,
                r.seed,
                r.mode,
                self.spec.train.tnorm,
                r.train_accuracy,
                opt(r.valid_accuracy),
                r.test_accuracy,
                opt(r.fixed_weight),
                r.model.log.len(),
                r.model.best_iteration
            );
        }
        let n = self.runs.len().max(1) as f64;
        let _ = writeln!(
            out,
            "mean,{},{},{},{:.6},{},{:.6},,,",
            self.spec.seed,
            self.spec.train.mode,
            self.spec.train.tnorm,
            self.runs.iter().map(|r| r.train_accuracy).sum::<f64>() / n,
            opt(self.mean_valid_accuracy()),
            self.mean_test_accuracy()
        );
        out
    }

    pub fn lambdas_csv(&self) -> String {
        let mut out = String::from("repeat,rule,lambda,train_satisfaction,formula\n");
        for r in &self.runs {
            for (c, f) in r.kb.formulas.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{:.6},{:.6},\"{}\"",
                    r.repeat,
                    c,
                    r.model.lambdas[c],
                    r.model.avg_satisfaction.get(c).copied().unwrap_or(f64::NAN),
                    f.to_string().replace('"', "'")
                );
            }
        }
        out
    }

    pub fn training_log_csv(&self) -> String {
        let n_rules = self.runs.first().map(|r| r.kb.formulas.len()).unwrap_or(0);
        let mut out = String::from("repeat,iteration,loss,train_accuracy,valid_accuracy");
        for c in 0..n_rules {
            let _ = write!(out, ",lambda_{c}");
        }
        for c in 0..n_rules {
            let _ = write!(out, ",satisfaction_{c}");
        }
        out.push('\n');
        for r in &self.runs {
            for row in &r.model.log {
                let _ = write!(
                    out,
                    "{},{},{:.9},{:.6},{}",
                    r.repeat,
                    row.iteration,
                    row.loss,
                    row.train_accuracy,
                    opt(row.valid_accuracy)
                );
                for l in &row.lambdas {
                    let _ = write!(out, ",{l:.6}");
                }
                for s in &row.avg_satisfaction {
                    let _ = write!(out, ",{s:.6}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("repeat,seconds\n");
        for r in &self.runs {
            let _ = writeln!(out, "{},{:.3}", r.repeat, r.seconds);
        }
        out
    }

    pub fn checkpoint(&self, repeat: usize) -> Option<Checkpoint> {
        let r = self.runs.iter().find(|r| r.repeat == repeat)?;
        let config = TrainConfig {
            seed: r.seed,
            ..self.spec.train.clone()
        };
        Some(Checkpoint::new(&r.model, &r.kb, &self.class_names, &config))
    }

    /// Writes the report files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), ExperimentError> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let files = [
            ("metrics.csv", self.metrics_csv()),
            ("lambdas.csv", self.lambdas_csv()),
            ("training_log.csv", self.training_log_csv()),
            ("timing.csv", self.timing_csv()),
            ("config.echo", self.spec.to_toml()),
        ];
        for (name, text) in files {
            let p = dir.join(name);
            fs::write(&p, text).map_err(io(&p))?;
        }
        for r in &self.runs {
            if let Some(ck) = self.checkpoint(r.repeat) {
                ck.save(&dir.join(format!("checkpoint_{}.json", r.repeat)))?;
            }
        }
        Ok(())
    }
}

/// Runs every repeat of an experiment and writes its report when an
/// output directory is configured.
pub fn run_train(spec: &ExperimentSpec) -> Result<MetricsReport, ExperimentError> {
    let kb = load_kb(&spec.kb)?;
    let kb = if spec.train.mode == TrainMode::Baseline {
        kb.without_rules()
    } else {
        kb
    };
    let source = load_source(spec)?;
    let mut runs = Vec::with_capacity(spec.repeats);
    let mut classes = Vec::new();
    for r in 0..spec.repeats.max(1) {
        let prepared = prepare(&kb, spec, &source, r)?;
        classes = prepared.worlds[prepared.train].data.class_names.clone();
        runs.push(run_repeat(&kb, spec, &prepared, r)?);
    }
    let report = MetricsReport {
        spec: spec.clone(),
        class_names: classes,
        runs,
    };
    if let Some(dir) = &spec.output_dir {
        report.write(dir)?;
    }
    Ok(report)
}

/// Overrides applied when evaluating a checkpoint.
#[derive(Debug, Clone, Default)]
pub struct EvalOverrides {
    pub mode: Option<TrainMode>,
    pub lambdas: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: TrainMode,
    pub valid_accuracy: Option<f64>,
    pub test_accuracy: f64,
}

impl EvalReport {
    pub fn csv(&self) -> String {
        format!(
            "mode,valid_accuracy,test_accuracy\n{},{},{:.6}\n",
            self.mode,
            opt(self.valid_accuracy),
            self.test_accuracy
        )
    }
}

/// Evaluates a checkpoint on the worlds of `repeat`.
pub fn run_eval(
    checkpoint: &Checkpoint,
    spec: &ExperimentSpec,
    repeat: usize,
    overrides: &EvalOverrides,
) -> Result<EvalReport, ExperimentError> {
    let kb = load_kb(&spec.kb)?;
    let source = load_source(spec)?;
    let prepared = prepare(&kb, spec, &source, repeat)?;
    let classes = &prepared.worlds[prepared.train].data.class_names;
    checkpoint.check_compatible(&kb, classes)?;
    let mode = overrides.mode.unwrap_or(checkpoint.mode);
    let lambdas = overrides.lambdas.clone().unwrap_or_else(|| checkpoint.lambdas.clone());
    if lambdas.len() != kb.formulas.len() {
        return Err(ExperimentError::Invalid(format!(
            "{} weights for {} formulas",
            lambdas.len(),
            kb.formulas.len()
        )));
    }
    let config = TrainConfig {
        tnorm: checkpoint.tnorm,
        ..spec.train.clone()
    };
    let map_seed = derive_seed(spec.repeat_seed(repeat), STREAM_TEST_MAP);
    let acc = |set: EvalSet<'_>| -> Result<f64, ExperimentError> {
        let pred = predict(mode, &checkpoint.mlp, &lambdas, set.world, &config, map_seed)?;
        Ok(accuracy(
            &pred,
            &set.world.data.labels,
            set.patterns,
            set.world.data.mode,
        ))
    };
    Ok(EvalReport {
        mode,
        valid_accuracy: prepared.valid_set().map(acc).transpose()?,
        test_accuracy: acc(prepared.test_set())?,
    })
}

/// MAP predictions for every learnable atom of a world, as
/// `pred(consts) <0|1> <relaxed>` lines, plus the objective trace CSV.
pub fn run_infer(
    checkpoint: &Checkpoint,
    kb: &KnowledgeBase,
    data: Dataset,
    options: &GroundingOptions,
    map: &MapConfig,
) -> Result<(String, String), ExperimentError> {
    let data = data.with_classes(&checkpoint.class_names)?;
    checkpoint.check_compatible(kb, &data.class_names)?;
    let world = GroundedWorld::new(kb, data, options)?;
    let f = checkpoint
        .mlp
        .forward(world.data.features.view())
        .map_err(TrainError::from)?;
    let mut lines = String::new();
    let mut trace = String::from("step,objective\n");
    match inference_lambdas(checkpoint.mode, &checkpoint.lambdas, &world.net) {
        Some(l) => {
            let r =
                map_inference(&world.net, &f, &l, &world.pinned(), checkpoint.tnorm, map).map_err(TrainError::from)?;
            for a in 0..world.net.table.n_learnable {
                let v = r.world.get(a) == Some(true);
                let _ = writeln!(
                    lines,
                    "{} {} {:.6}",
                    world.net.table.atom_name(a),
                    v as u8,
                    r.relaxed[a]
                );
            }
            for (s, v) in r.trace.iter().enumerate() {
                let _ = writeln!(trace, "{s},{v:.9}");
            }
            let _ = writeln!(trace, "final,{:.9}", r.objective);
        }
        None => {
            let probs = crate::net::expected_y(&f, world.data.mode);
            let pred = crate::train::decode_scores(&f, world.data.mode);
            for (p, atoms) in world.net.class_atoms.iter().enumerate() {
                for (k, &a) in atoms.iter().enumerate() {
                    let _ = writeln!(
                        lines,
                        "{} {} {:.6}",
                        world.net.table.atom_name(a),
                        pred[[p, k]] as u8,
                        probs[[p, k]]
                    );
                }
            }
        }
    }
    Ok((lines, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    NoiseP,
    TrainFraction,
}

impl std::str::FromStr for SweepVariable {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "noise_p" => Ok(SweepVariable::NoiseP),
            "train_fraction" => Ok(SweepVariable::TrainFraction),
            _ => Err(ExperimentError::Invalid(format!(
                "unknown sweep variable '{s}' (noise_p or train_fraction)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub mode: TrainMode,
    pub repeat: usize,
    pub test_accuracy: f64,
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub variable: SweepVariable,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn mean(&self, value: f64, mode: TrainMode) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.value == value && r.mode == mode)
            .map(|r| r.test_accuracy)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn csv(&self) -> String {
        let name = match self.variable {
            SweepVariable::NoiseP => "noise_p",
            SweepVariable::TrainFraction => "train_fraction",
        };
        let mut out = format!("{name},mode,repeat,test_accuracy,lambdas\n");
        for r in &self.rows {
            let l: Vec<String> = r.lambdas.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{}",
                r.value,
                r.mode,
                r.repeat,
                r.test_accuracy,
                l.join(";")
            );
        }
        let mut seen: Vec<(f64, TrainMode)> = Vec::new();
        for r in &self.rows {
            if !seen.contains(&(r.value, r.mode)) {
                seen.push((r.value, r.mode));
            }
        }
        for (v, m) in seen {
            let _ = writeln!(out, "{v},{m},mean,{:.6},", self.mean(v, m));
        }
        out
    }
}

/// Runs the baseline and the configured mode for each value of the sweep
/// variable. Repeat seeds do not depend on the value.
pub fn run_sweep(
    spec: &ExperimentSpec,
    variable: SweepVariable,
    values: &[f64],
) -> Result<SweepReport, ExperimentError> {
    let mut modes = vec![TrainMode::Baseline];
    if spec.train.mode != TrainMode::Baseline {
        modes.push(spec.train.mode);
    }
    let kb_full = load_kb(&spec.kb)?;
    let source = load_source(spec)?;
    let mut rows = Vec::new();
    for &value in values {
        let mut s = spec.clone();
        match (variable, &mut s.data) {
            (SweepVariable::NoiseP, DataSpec::FollowingPairs { noise_p, .. }) => *noise_p = value,
            (SweepVariable::TrainFraction, _) => s.split.train_fraction = value,
            (SweepVariable::NoiseP, _) => {
                return Err(ExperimentError::Invalid(
                    "noise_p sweeps need following-pairs data".into(),
                ))
            }
        }
        for &mode in &modes {
            let kb = if mode == TrainMode::Baseline {
                kb_full.without_rules()
            } else {
                kb_full.clone()
            };
            let mut sm = s.clone();
            sm.train.mode = mode;
            for r in 0..sm.repeats.max(1) {
                let prepared = prepare(&kb, &sm, &source, r)?;
                let run = run_repeat(&kb, &sm, &prepared, r)?;
                rows.push(SweepRow {
                    value,
                    mode,
                    repeat: r,
                    test_accuracy: run.test_accuracy,
                    lambdas: run.model.lambdas.clone(),
                });
            }
        }
    }
    let report = SweepReport { variable, rows };
    if let Some(dir) = &spec.output_dir {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let p = dir.join("sweep.csv");
        fs::write(&p, report.csv()).map_err(io(&p))?;
        let p = dir.join("config.echo");
        fs::write(&p, spec.to_toml()).map_err(io(&p))?;
    }
    Ok(report)
}
