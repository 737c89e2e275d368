//! Command-line driver for the stage pipeline. Each subcommand runs one
//! stage against the artifacts directory; a full experiment is the
//! subcommands in order, all reading the same config file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use wellwatch::config::RunConfig;
use wellwatch::model::ModelKind;
use wellwatch::pipeline::{run_stage, Stage};
use wellwatch::{Error, ErrorCategory};

const LONG_ABOUT: &str = "\
Anomaly detection for oil & gas production networks.

Stages run in this order, each reading the previous stage's artifacts
from the output directory:

    synth > ingest > featurize > label > split > train > evaluate > report

`ablate` replaces the train/evaluate pair when comparing model variants:
it trains every variant on both split regimes and writes one comparison
artifact. All stages are deterministic: re-running with the same config
and seed reproduces every artifact byte for byte.";

#[derive(Parser, Debug)]
#[command(name = "wellwatch", version, about = "Production anomaly detection pipeline")]
#[command(long_about = LONG_ABOUT)]
struct Cli {
    #[command(subcommand)]
    stage: StageCmd,

    /// Run configuration file (RON); built-in defaults apply when omitted
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Artifacts directory; overrides the config file
    #[arg(long, global = true, value_name = "DIR", env = "WELLWATCH_OUT")]
    out: Option<String>,

    /// Seed override, applied to both training and data generation
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Model kind: temporal_gat, lstm, or logistic; overrides the config file
    #[arg(long, global = true, value_name = "KIND", value_parser = parse_model_kind)]
    model: Option<ModelKind>,

    /// Worker threads for the per-well stages (synth, featurize, label)
    #[arg(long, global = true, value_name = "N", env = "WELLWATCH_JOBS",
          default_value_t = 1, value_parser = parse_jobs)]
    jobs: usize,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum StageCmd {
    /// Generate a synthetic production dataset with planted anomalies
    Synth,
    /// Parse and clean the raw production table into canonical series
    Ingest,
    /// Compute the physics feature registry for every well
    Featurize,
    /// Apply the weak labeling rules to the feature series
    Label,
    /// Assign window samples to train/test folds
    Split,
    /// Train the configured model and write a checkpoint
    Train,
    /// Score the held-out fold against the checkpoint
    Evaluate,
    /// Train and score every model variant on both split regimes
    Ablate,
    /// Render the run summary from whatever artifacts exist
    Report,
}

impl From<StageCmd> for Stage {
    fn from(cmd: StageCmd) -> Stage {
        match cmd {
            StageCmd::Synth => Stage::Synth,
            StageCmd::Ingest => Stage::Ingest,
            StageCmd::Featurize => Stage::Featurize,
            StageCmd::Label => Stage::Label,
            StageCmd::Split => Stage::Split,
            StageCmd::Train => Stage::Train,
            StageCmd::Evaluate => Stage::Evaluate,
            StageCmd::Ablate => Stage::Ablate,
            StageCmd::Report => Stage::Report,
        }
    }
}

fn parse_model_kind(s: &str) -> Result<ModelKind, String> {
    ModelKind::parse(s).map_err(|e| e.to_string())
}

fn parse_jobs(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("at least one worker is required".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

fn run(cli: Cli) -> wellwatch::Result<String> {
    let mut cfg = match &cli.config {
        // An unreadable config file is an invocation problem, not a data
        // problem: remap so the exit code says "fix the command line".
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Io { path, source } => {
                Error::Config(format!("cannot read {}: {source}", path.display()))
            }
            other => other,
        })?,
        None => RunConfig::default(),
    };
    if let Some(out) = cli.out {
        cfg.paths.out_dir = out;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        if let Some(synth) = cfg.synth.as_mut() {
            synth.seed = seed;
        }
    }
    if let Some(kind) = cli.model {
        cfg.model_kind = kind;
    }
    run_stage(&cfg, cli.stage.into(), cli.jobs)
}

fn main() -> ExitCode {
    // clap's own exit convention (2 for usage) clashes with the stage exit
    // codes, so parse errors are remapped to 1 here.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(status) => {
            println!("{status}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err.category() {
                ErrorCategory::Usage => 1,
                ErrorCategory::Data => 2,
                ErrorCategory::Numeric => 3,
            })
        }
    }
}
