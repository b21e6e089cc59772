//! Command line front end: generate data, train, evaluate, retrieve for one
//! request, and run ablation sweeps. Exit codes: 0 success, 2 config error,
//! 3 data error, 4 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seqformer::ablate::{sweep, AblationAxis};
use seqformer::checkpoint::{self, Stamps};
use seqformer::config::RunConfig;
use seqformer::data::{self, generate, next_item_split, read_dataset, write_dataset, Dataset};
use seqformer::eval::evaluate;
use seqformer::model::score;
use seqformer::retrieval::{retrieve, RetrievalIndex};
use seqformer::train;
use seqformer::{Error, Result};

#[derive(Parser)]
#[command(name = "seqformer", version, about = "Train and evaluate a multi-interest sequence retrieval model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set model.layers=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by the `data` section.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (defaults to `paths.data_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model, writing metrics and checkpoints into the run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory (defaults to `paths.data_dir`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory (defaults to `paths.run_dir`).
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Hit rates of a checkpoint on the evaluation traces.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cutoffs, e.g. `50,100,500` (defaults to `eval.cutoffs`).
        #[arg(long, value_delimiter = ',')]
        cutoffs: Option<Vec<usize>>,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-K items for one evaluation trace, with the interest that ranked each.
    Retrieve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the evaluation traces.
        #[arg(long, default_value_t = 0)]
        trace: usize,
        #[arg(short = 'k', long, default_value_t = 10)]
        top: usize,
    },
    /// Retrain along one axis and tabulate accuracy and hit rates.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// seq_len, query_tokens, layers or compression.
        #[arg(long)]
        axis: String,
        /// Comma-separated values (defaults depend on the axis).
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
        /// Directory for `sweep.json` and `sweep.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dir_or(arg: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    arg.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| Error::config(format!("no {what} given and none set in the config")))
}

/// Loads a dataset and checks that it was generated from this config's data section.
fn load_data(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    let (manifest, data) = read_dataset(dir)?;
    let expected = cfg.data_hash();
    if manifest.config_hash != expected {
        return Err(Error::data(format!(
            "dataset {} is stamped {} but the config's data section hashes to {expected}",
            dir.display(),
            manifest.config_hash
        )));
    }
    Ok(data)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_checkpoint(cfg: &RunConfig, dir: &Path) -> Result<seqformer::model::Model<f32>> {
    let (manifest, model, _) = checkpoint::load(dir)?;
    let config_hash = cfg.hash();
    let data_hash = cfg.data_hash();
    checkpoint::check_stamps(
        &manifest,
        &Stamps {
            config_hash: &config_hash,
            data_hash: &data_hash,
        },
    )?;
    Ok(model)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, out } => {
            let cfg = cfg.load()?;
            let out = dir_or(&out, &cfg.paths.data_dir, "output directory")?;
            let (dataset, truth) = generate(&cfg.data)?;
            let manifest = write_dataset(&out, &dataset, &truth, &cfg.data_hash())?;
            let examples = data::training_examples(&dataset.train, cfg.train.min_history).len();
            println!(
                "wrote {} training and {} evaluation traces ({examples} training examples) to {}",
                manifest.train_traces,
                manifest.eval_traces,
                out.display()
            );
            println!("data hash {}", manifest.config_hash);
        }
        Command::Train {
            cfg,
            data,
            run_dir,
            resume,
        } => {
            let cfg = cfg.load()?;
            let data_dir = dir_or(&data, &cfg.paths.data_dir, "dataset directory")?;
            let run_dir = dir_or(&run_dir, &cfg.paths.run_dir, "run directory")?;
            let dataset = load_data(&cfg, &data_dir)?;
            write_file(&run_dir.join("config.json"), &cfg.to_json_pretty()?)?;
            let (trainer, metrics) = train::run(&cfg, &dataset.train, Some(&run_dir), resume.as_deref())?;
            if let Some(last) = metrics.last() {
                println!("step {} loss {:.4} in-batch accuracy {:.3}", last.step, last.loss, last.accuracy);
            }
            println!(
                "final checkpoint at step {} in {}",
                trainer.step,
                run_dir.join(train::FINAL_CHECKPOINT).display()
            );
            println!("config hash {}", cfg.hash());
        }
        Command::Eval {
            cfg,
            data,
            checkpoint,
            cutoffs,
            out,
        } => {
            let mut cfg = cfg.load()?;
            if let Some(c) = cutoffs {
                cfg.eval.cutoffs = c;
            }
            let data_dir = dir_or(&data, &cfg.paths.data_dir, "dataset directory")?;
            let dataset = load_data(&cfg, &data_dir)?;
            let model = load_checkpoint(&cfg, &checkpoint)?;
            let report = evaluate(&model, &dataset.eval, &cfg.eval, &cfg.hash())?;
            print!("{}", report.table(&format!("k={}", model.config().interests)));
            println!("{} requests, {} skipped", report.requests, report.skipped);
            if let Some(path) = out {
                write_file(&path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
            }
        }
        Command::Retrieve {
            cfg,
            data,
            checkpoint,
            trace,
            top,
        } => {
            let cfg = cfg.load()?;
            let data_dir = dir_or(&data, &cfg.paths.data_dir, "dataset directory")?;
            let dataset = load_data(&cfg, &data_dir)?;
            let model = load_checkpoint(&cfg, &checkpoint)?;
            let t = dataset.eval.get(trace).ok_or_else(|| {
                Error::data(format!("trace {trace} out of range ({} evaluation traces)", dataset.eval.len()))
            })?;
            let (history, held_out) = next_item_split(t, model.config().max_seq_len)
                .ok_or_else(|| Error::data(format!("trace {trace} is too short to split")))?;
            let interests = model.interests(history)?;
            let items = model.item_matrix()?;
            let index = RetrievalIndex::new(items.clone())?;
            let results = retrieve(&index, &interests, top, cfg.eval.depth)?;
            println!("user {} history {} items, held-out item {held_out}", t.user, history.len());
            for (rank, s) in results.iter().enumerate() {
                let (_, j) = score(items.row(s.id), &interests)?;
                let mark = if s.id == held_out { "  <- held out" } else { "" };
                println!("{:>4}  item {:>6}  score {:>9.4}  interest {j}{mark}", rank + 1, s.id, s.score);
            }
        }
        Command::Ablate {
            cfg,
            data,
            axis,
            values,
            out,
        } => {
            let cfg = cfg.load()?;
            let axis: AblationAxis = axis.parse()?;
            let values = values.unwrap_or_else(|| axis.default_values());
            let data_dir = dir_or(&data, &cfg.paths.data_dir, "dataset directory")?;
            let dataset = load_data(&cfg, &data_dir)?;
            let report = sweep(&cfg, axis, &values, &dataset)?;
            print!("{}", report.table());
            if let Some(dir) = out {
                write_file(&dir.join("sweep.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
                write_file(&dir.join("sweep.csv"), &report.to_csv())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
