//! `qrs`: command-line driver for the QRS detection pipeline.
//!
//! Exit codes: 0 success, 2 missing input, 3 unsupported or malformed data,
//! 4 numeric failure, 5 configuration or usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qrs_core::eval::{Path as EvalPath, StreamLevel};
use qrs_core::Error;

#[derive(Parser, Debug)]
#[command(name = "qrs", version, about = "QRS detection with a CNN segmenter and GRU or rule-based post-processing")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// WFDB records (base paths without extension) to 100 Hz containers.
    Convert(ConvertArgs),
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Subject-wise k-fold training of the CNN.
    TrainCnn(TrainCnnArgs),
    /// Train the GRU repair network on corrupted CNN streams.
    TrainGru(TrainGruArgs),
    /// Detect R-peaks in one record.
    Predict(PredictArgs),
    /// Score fold models on one or more databases.
    Evaluate(EvaluateArgs),
    /// Train and score the GRU over a layers x sequence-length grid.
    SweepGruGrid(SweepArgs),
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(required = true)]
    pub records: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Annotation file extension.
    #[arg(long, default_value = "atr")]
    pub ann: String,
    /// Drop paced beats ('/') from the reference annotations.
    #[arg(long)]
    pub no_paced: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub subjects: usize,
    #[arg(long, default_value = "syn")]
    pub prefix: String,
    #[arg(long)]
    pub duration_s: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Write WFDB triples (format 212, 100 Hz) instead of containers.
    #[arg(long)]
    pub wfdb: bool,
}

#[derive(Args, Debug)]
pub struct TrainCnnArgs {
    /// Directory of record containers.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainGruArgs {
    /// Records whose CNN streams make up the training corpus.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory holding the CNN fold models.
    #[arg(long)]
    pub cnn: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub cnn_fold: Option<usize>,
    #[command(flatten)]
    pub gru: GruFlags,
}

#[derive(Args, Debug, Clone)]
pub struct GruFlags {
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub seq_len_s: Option<usize>,
    #[arg(long)]
    pub hidden_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// CNN model manifest.
    #[arg(long)]
    pub model: PathBuf,
    /// Record container.
    #[arg(long)]
    pub record: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "advanced")]
    pub path: EvalPath,
    /// GRU model manifest, required for `--path gru`.
    #[arg(long)]
    pub gru: Option<PathBuf>,
    #[arg(long)]
    pub strict_support: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory of CNN fold models.
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Database directory; repeat for several databases.
    #[arg(long = "data")]
    pub databases: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "advanced")]
    pub path: EvalPath,
    #[arg(long)]
    pub gru: Option<PathBuf>,
    #[arg(long)]
    pub tol_ms: Option<f64>,
    /// Score every depth found under the model directory, one row each.
    #[arg(long)]
    pub sweep_depth: bool,
    /// Only models of this depth.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Average per-record F1 instead of pooling counts.
    #[arg(long = "macro")]
    pub macro_avg: bool,
    #[arg(long)]
    pub strict_support: bool,
    #[arg(long, value_parser = parse_stream_level)]
    pub stream_level: Option<StreamLevel>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Records for the GRU training corpus.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub cnn: PathBuf,
    /// Evaluation database; repeat for several.
    #[arg(long = "eval-data", required = true)]
    pub databases: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2])]
    pub layers: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3, 4, 5])]
    pub seq_lens: Vec<usize>,
    #[arg(long)]
    pub hidden_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub tol_ms: Option<f64>,
}

fn parse_stream_level(s: &str) -> Result<StreamLevel, String> {
    match s {
        "record" => Ok(StreamLevel::Record),
        "segment" => Ok(StreamLevel::Segment),
        _ => Err(format!("expected record or segment, got '{s}'")),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NotFound { .. } => 2,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Parse { .. } | Error::UnsupportedFormat(_) => 3,
        Error::Numerical(_) => 4,
        Error::Argument(_) | Error::Json(_) => 5,
        Error::Io(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 5 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.common.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
