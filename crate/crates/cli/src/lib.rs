//! The `sensireg` command line.
//!
//! Exit codes: 0 on success (including `--help`), 1 for usage and
//! configuration errors, 2 for failures while running an experiment.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sensireg::attribution::{export_attribution_pgm, AttributionMap, Method, Normalization};
use sensireg::checkpoint::{load_checkpoint_for, save_checkpoint};
use sensireg::harness::{
    emit_report, evaluate, select_lambda_for, sweep_lambda, train, write_sweep, Evaluation, ExperimentConfig,
    ExplainerConfig, ReportRow, Splits,
};
use sensireg::metrics::MetricSelection;
use sensireg::{Error, Model, Result};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "sensireg", version, about = "Neural activation sensitivity regularization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override a config entry, e.g. `--set ns.lambda=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes model.srck and log.json.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: u64,
    },
    /// Accuracy, robust accuracy and the metric suite for a checkpoint;
    /// writes evaluation.json and report.csv/report.txt.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Row label in the report.
        #[arg(long, default_value = "model")]
        method: String,
    },
    /// Write attribution maps of test samples as PGM images.
    Attribute {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of leading test samples to explain.
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, value_enum, default_value_t = NormArg::MinMax)]
        normalization: NormArg,
    },
    /// Train one NsLoss model per lambda; writes sweep.csv.
    SweepLambda {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated lambda values.
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
    },
    /// Choose lambda for a pretrained checkpoint; writes lambda.json.
    SelectLambda {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Combine evaluation.json files into one comparison table.
    Report {
        /// `NAME=PATH` pairs of evaluation files. Repeatable.
        #[arg(long = "eval", value_name = "NAME=PATH")]
        evals: Vec<String>,
        /// Output CSV; a .txt table is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NormArg {
    MinMax,
    AbsMinMax,
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                1
            } else {
                2
            }
        }
    }
}

fn load_config(args: &ConfigArgs, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut overrides = args.overrides.clone();
    if let Some(s) = seed {
        overrides.push(format!("seed={s}"));
    }
    ExperimentConfig::load(&args.config, &overrides)
}

fn prepare(cfg: &ExperimentConfig) -> Result<Splits> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::Config(format!(
        "cannot create output directory {}: {e}",
        cfg.output_dir.display()
    )))?;
    cfg.dataset.load()
}

fn write_json(path: &Path, value: Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_model(cfg: &ExperimentConfig, splits: &Splits, path: &Path) -> Result<Model> {
    load_checkpoint_for(path, &cfg.model_spec(&splits.train)?)
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train { config, seed } => {
            let cfg = load_config(&config, Some(seed))?;
            let splits = prepare(&cfg)?;
            let outcome = train(&cfg, &splits)?;
            save_checkpoint(&outcome.model, cfg.output_dir.join("model.srck"))?;
            write_json(
                &cfg.output_dir.join("log.json"),
                json!({"initial": outcome.initial, "epochs": outcome.logs}),
            )?;
            for log in &outcome.logs {
                println!(
                    "epoch {:>3}  train_ce {:.6}  val_acc {:.4}",
                    log.epoch, log.train_ce, log.val_acc
                );
            }
            Ok(())
        }
        Command::Evaluate {
            config,
            seed,
            checkpoint,
            method,
        } => {
            let cfg = load_config(&config, Some(seed))?;
            let splits = prepare(&cfg)?;
            let model = load_model(&cfg, &splits, &checkpoint)?;
            let eval = evaluate(&cfg, &splits, &model, &method, MetricSelection::ALL)?;
            write_json(&cfg.output_dir.join("evaluation.json"), serde_json::to_value(&eval)?)?;
            let rows = [ReportRow::from_evaluation(&method, &eval)];
            emit_report(&rows, cfg.output_dir.join("report.csv"))?;
            print!("{}", sensireg::harness::render_table(&rows));
            Ok(())
        }
        Command::Attribute {
            config,
            seed,
            checkpoint,
            count,
            normalization,
        } => {
            let cfg = load_config(&config, seed)?;
            let splits = prepare(&cfg)?;
            let model = load_model(&cfg, &splits, &checkpoint)?;
            let n = count.min(splits.test.len());
            let x = splits.test.inputs.slice_rows(0, n)?;
            let targets = sensireg::ModelFn::logits(&model, &x)?.argmax_rows();
            let explainer = cfg.explainer.build(&splits.train.inputs, cfg.seed);
            let maps = explainer.explain_rows(&model, &x, &targets)?;
            let method = match cfg.explainer {
                ExplainerConfig::IntegratedGradients { .. } => Method::IntegratedGradients,
                ExplainerConfig::GradientShap { .. } => Method::GradientShap,
            };
            let norm = match normalization {
                NormArg::MinMax => Normalization::MinMax,
                NormArg::AbsMinMax => Normalization::AbsMinMax,
            };
            for (i, &target) in targets.iter().enumerate() {
                let scores = sensireg::Tensor::new(splits.test.sample_shape.clone(), maps.row(i).to_vec())?;
                let map = AttributionMap {
                    scores,
                    target,
                    method,
                    baseline: explainer.name().to_string(),
                };
                let path = cfg.output_dir.join(format!("attribution_{i:04}.pgm"));
                export_attribution_pgm(&map, &path, norm)?;
                println!("{}  target {target}", path.display());
            }
            Ok(())
        }
        Command::SweepLambda { config, seed, lambdas } => {
            let cfg = load_config(&config, seed)?;
            let splits = prepare(&cfg)?;
            let rows = sweep_lambda(&cfg, &splits, &lambdas)?;
            let path = cfg.output_dir.join("sweep.csv");
            write_sweep(&rows, &path)?;
            print!("{}", sensireg::harness::sweep_csv(&rows));
            Ok(())
        }
        Command::SelectLambda {
            config,
            seed,
            checkpoint,
        } => {
            let cfg = load_config(&config, seed)?;
            let splits = prepare(&cfg)?;
            let model = load_model(&cfg, &splits, &checkpoint)?;
            let selection = select_lambda_for(&cfg, &splits, &model)?;
            write_json(&cfg.output_dir.join("lambda.json"), serde_json::to_value(&selection)?)?;
            println!("{}", selection.lambda);
            Ok(())
        }
        Command::Report { evals, out } => {
            let mut rows = Vec::with_capacity(evals.len());
            for pair in &evals {
                let (name, path) = pair
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--eval {pair:?} is not of the form NAME=PATH")))?;
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read evaluation {path}: {e}")))?;
                let value: Value = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{path}: {e}")))?;
                let eval: Evaluation =
                    serde_json::from_value(value).map_err(|e| Error::Config(format!("{path}: {e}")))?;
                rows.push(ReportRow::from_evaluation(name, &eval));
            }
            emit_report(&rows, &out)?;
            print!("{}", sensireg::harness::render_table(&rows));
            Ok(())
        }
    }
}
