use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rnm::data::{generate_following_pairs, load_graph, write_graph, DigitSource, NoiseSpec};
use rnm::experiment::{
    load_kb, run_eval, run_infer, run_sweep, run_train, validate_kb_file, DataSpec, EvalOverrides, ExperimentSpec,
    SweepVariable,
};
use rnm::fuzzy::TNorm;
use rnm::grounding::{dump_network, GroundingOptions};
use rnm::infer::MapConfig;
use rnm::train::{Checkpoint, GroundedWorld, TrainMode};

/// Relational neural machines: train, evaluate and run inference.
#[derive(Parser)]
#[command(name = "rnm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train according to an experiment spec and write a report directory.
    Train {
        spec: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on the worlds of an experiment spec.
    Eval {
        spec: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Repeat whose split/worlds to evaluate on.
        #[arg(long, default_value_t = 0)]
        repeat: usize,
        /// File of rule weights (whitespace or comma separated) replacing
        /// the checkpoint's.
        #[arg(long)]
        lambdas: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// MAP inference on a graph with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        nodes: PathBuf,
        #[arg(long)]
        edges: PathBuf,
        /// Evidence predicate the edges populate.
        #[arg(long, default_value = "Cite")]
        relation: String,
        /// Directory for predictions.txt and map_trace.csv; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also write the ground network to this file.
        #[arg(long)]
        dump_network: Option<PathBuf>,
        #[arg(long)]
        no_prune: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train baseline and the configured mode over values of one variable.
    Sweep {
        spec: PathBuf,
        /// noise_p or train_fraction.
        #[arg(long)]
        variable: SweepVariable,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Parse and check knowledge base files.
    ValidateKb {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Generate a following-pairs world as node/edge files.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n_images: usize,
        #[arg(long, default_value_t = 1.0)]
        noise_p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        links_per_image: f64,
        /// idx image archive; synthetic digits when absent.
        #[arg(long, requires = "labels")]
        images: Option<PathBuf>,
        #[arg(long, requires = "images")]
        labels: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tnorm: Option<TNorm>,
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    no_prune: bool,
    #[arg(long)]
    links_per_image: Option<f64>,
    /// Report directory, overriding the spec's.
    #[arg(long)]
    output: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, spec: &mut ExperimentSpec) {
        if let Some(s) = self.seed {
            spec.seed = s;
            spec.train.seed = s;
        }
        if let Some(t) = self.tnorm {
            spec.train.tnorm = t;
        }
        if let Some(m) = self.mode {
            spec.train.mode = m;
        }
        if let Some(r) = self.repeats {
            spec.repeats = r;
        }
        if self.no_prune {
            spec.prune = false;
        }
        if let (Some(l), DataSpec::FollowingPairs { links_per_image, .. }) = (self.links_per_image, &mut spec.data) {
            *links_per_image = l;
        }
        if let Some(o) = &self.output {
            spec.output_dir = Some(o.clone());
        }
    }
}

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

fn load_spec(path: &Path, overrides: &Overrides) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::load(path)?;
    overrides.apply(&mut spec);
    Ok(spec)
}

fn read_lambdas(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|e| format!("{}: '{s}': {e}", path.display()).into())
        })
        .collect()
}

fn write_or_print(dir: Option<&Path>, name: &str, text: &str) -> Result<()> {
    match dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            fs::write(d.join(name), text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { spec, overrides } => {
            let spec = load_spec(&spec, &overrides)?;
            let report = run_train(&spec)?;
            print!("{}", report.metrics_csv());
        }
        Command::Eval {
            spec,
            checkpoint,
            repeat,
            lambdas,
            overrides,
        } => {
            let spec = load_spec(&spec, &overrides)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let ov = EvalOverrides {
                mode: overrides.mode,
                lambdas: lambdas.as_deref().map(read_lambdas).transpose()?,
            };
            let report = run_eval(&ck, &spec, repeat, &ov)?;
            write_or_print(spec.output_dir.as_deref(), "eval.csv", &report.csv())?;
            if spec.output_dir.is_some() {
                print!("{}", report.csv());
            }
        }
        Command::Infer {
            checkpoint,
            kb,
            nodes,
            edges,
            relation,
            output,
            dump_network: dump,
            no_prune,
            seed,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let kb = load_kb(&kb)?;
            let data = load_graph(&nodes, &edges, &relation)?
                .with_classes(&ck.class_names)?
                .all_hidden(rnm::data::Split::Test);
            let options = GroundingOptions {
                prune: !no_prune,
                ..GroundingOptions::default()
            };
            if let Some(path) = dump {
                let world = GroundedWorld::new(&kb, data.clone(), &options)?;
                fs::write(&path, dump_network(&world.net.table, &world.net.rules))?;
            }
            let map = MapConfig {
                seed: seed.unwrap_or(ck.seed),
                ..MapConfig::default()
            };
            let (predictions, trace) = run_infer(&ck, &kb, data, &options, &map)?;
            write_or_print(output.as_deref(), "predictions.txt", &predictions)?;
            if let Some(dir) = &output {
                fs::write(dir.join("map_trace.csv"), trace)?;
            }
        }
        Command::Sweep {
            spec,
            variable,
            values,
            overrides,
        } => {
            let spec = load_spec(&spec, &overrides)?;
            let report = run_sweep(&spec, variable, &values)?;
            print!("{}", report.csv());
        }
        Command::ValidateKb { files } => {
            let mut bad = 0;
            for f in &files {
                let diags = validate_kb_file(f)?;
                if diags.is_empty() {
                    println!("{}: ok", f.display());
                }
                for d in &diags {
                    println!("{d}");
                }
                bad += diags.len();
            }
            if bad > 0 {
                return Err(format!("{bad} problem(s) found").into());
            }
        }
        Command::GenData {
            out,
            n_images,
            noise_p,
            seed,
            links_per_image,
            images,
            labels,
        } => {
            let source = match (images, labels) {
                (Some(i), Some(l)) => DigitSource::from_idx(&i, &l)?,
                _ => DigitSource::Synthetic,
            };
            let ds = generate_following_pairs(
                n_images,
                NoiseSpec {
                    predictive_fraction: noise_p,
                    seed,
                },
                &source,
                links_per_image,
            )?;
            fs::create_dir_all(&out)?;
            write_graph(&ds, &out.join("nodes.tsv"), &out.join("edges.tsv"))?;
            println!("{} images, {} links -> {}", ds.len(), ds.evidence.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
