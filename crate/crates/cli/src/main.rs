//! `docgat` command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use docgat::error::{Error, Result};
use serde_json::Value;

use config::{apply_assignments, read_config_value, resolve, set_path};

#[derive(Parser, Debug)]
#[command(name = "docgat", version, about = "Graph-attention document encoder: pretraining, fine-tuning, evaluation and graph inspection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Masked sentence modeling on a corpus.
    Pretrain(Common),
    /// Train a classification head (and the encoder) on labeled data.
    Finetune(Common),
    /// Score a checkpoint on a labeled corpus without updating it.
    Eval(Common),
    /// Dump neighbor lists, the attention mask and, with a checkpoint,
    /// per-layer attention maps for one document.
    InspectGraph(Common),
}

/// Flags shared by all subcommands. Each named flag overrides the config
/// key of the same name.
#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate (`optimizer.lr`).
    #[arg(long)]
    lr: Option<f64>,
    /// JSON-lines corpus; replaces any `synthetic` section.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// `entity` or `docclass`.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    doc_id: Option<String>,
    /// Neighborhood size (`model.encoder.top_k`).
    #[arg(long)]
    top_k: Option<usize>,
    /// Arbitrary override `key.path=value`, applied after the named flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<config::RunConfig> {
        let mut v = read_config_value(self.config.as_deref())?;
        let path = |p: &PathBuf| Value::String(p.to_string_lossy().into_owned());
        let named: [(&str, Option<Value>); 10] = [
            ("seed", self.seed.map(Value::from)),
            ("out", self.out.as_ref().map(path)),
            ("steps", self.steps.map(Value::from)),
            ("batch_size", self.batch_size.map(Value::from)),
            ("optimizer.lr", self.lr.map(Value::from)),
            ("corpus", self.corpus.as_ref().map(path)),
            ("checkpoint", self.checkpoint.as_ref().map(path)),
            ("task", self.task.clone().map(Value::from)),
            ("doc_id", self.doc_id.clone().map(Value::from)),
            ("model.encoder.top_k", self.top_k.map(Value::from)),
        ];
        for (key, value) in named {
            if let Some(value) = value {
                set_path(&mut v, key, value)?;
            }
        }
        if self.corpus.is_some() {
            if let Value::Object(m) = &mut v {
                m.remove("synthetic");
            }
        }
        apply_assignments(&mut v, &self.set)?;
        resolve(v)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Parse { .. } | Error::Checkpoint(_) | Error::Io(_) => 3,
        Error::Numeric(_) | Error::DegenerateRow { .. } => 4,
        Error::Shape { .. } | Error::Axis { .. } | Error::Index { .. } => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    let (common, f): (&Common, fn(&config::RunConfig) -> Result<()>) = match &cli.command {
        Command::Pretrain(c) => (c, commands::pretrain),
        Command::Finetune(c) => (c, commands::finetune),
        Command::Eval(c) => (c, commands::eval),
        Command::InspectGraph(c) => (c, commands::inspect_graph),
    };
    let cfg = common.resolve()?;
    f(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
