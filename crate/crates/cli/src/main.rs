//! `mopformer` command-line driver.
//!
//! Exit codes: 0 success, 2 invalid configuration or usage, 3 data or
//! input-file problem, 4 incompatible or unreadable checkpoint, 5 numeric
//! failure. On failure a single JSON error record is written to stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mopformer::analysis::ExportFormat;
use mopformer::Error;

#[derive(Debug, Parser)]
#[command(name = "mopformer", version, about = "Motion-primitive transformer for inertial activity recognition")]
struct Cli {
    /// Worker threads for data-parallel passes; 1 gives bit-identical reruns.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset from a generator spec.
    Synth { spec: PathBuf, out_dir: PathBuf },
    /// Masked-primitive pretraining over the configured datasets.
    Pretrain {
        config: PathBuf,
        /// Override a config value, e.g. `--set optimizer.learning_rate=1e-3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Supervised fine-tuning of a checkpoint on the configured datasets.
    Finetune {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Classification metrics of a fine-tuned checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "eval")]
        run_id: String,
    },
    /// Similarity, frequency and transition reports.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "similarity,frequency,transitions")]
        reports: Vec<Report>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Compare mean composed input embeddings instead of primitive embeddings.
        #[arg(long)]
        contextual: bool,
        #[arg(long, default_value_t = mopformer::analysis::DEFAULT_TOP_N)]
        top_n: usize,
        /// Primitive ids for the similarity report; all primitives when omitted.
        #[arg(long, value_delimiter = ',')]
        tokens: Option<Vec<usize>>,
        #[arg(long, default_value = "analysis")]
        run_id: String,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Scale::Tiny)]
        scale: Scale,
        #[arg(long, default_value = "runs/gradcheck")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Report {
    Similarity,
    Frequency,
    Transitions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for ExportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ExportFormat::Csv,
            Format::Json => ExportFormat::Json,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scale {
    Tiny,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        Error::Data(_)
        | Error::Io { .. }
        | Error::Csv(_)
        | Error::InvalidInput(_)
        | Error::Provider { .. }
        | Error::Shape { .. } => 3,
        Error::Checkpoint(_) => 4,
        Error::NonFinite(_) | Error::GradientCheck(_) => 5,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) | Error::Json(_) => "config",
        Error::Data(_) | Error::Csv(_) | Error::InvalidInput(_) | Error::Shape { .. } => "data",
        Error::Io { .. } => "io",
        Error::Provider { .. } => "metadata-provider",
        Error::Checkpoint(_) => "checkpoint",
        Error::NonFinite(_) | Error::GradientCheck(_) => "numeric",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let record = serde_json::json!({
                "error": { "kind": kind(&e), "exit_code": code, "message": e.to_string() }
            });
            eprintln!("{record}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> mopformer::Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
    }
    let workers = cli.workers.unwrap_or_else(rayon::current_num_threads);
    let ctx = commands::Context { workers, argv: std::env::args().collect() };
    match cli.command {
        Command::Synth { spec, out_dir } => commands::synth(&ctx, &spec, &out_dir),
        Command::Pretrain { config, overrides } => commands::pretrain(&ctx, &config, &overrides),
        Command::Finetune { config, checkpoint, overrides } => {
            commands::finetune(&ctx, &config, &checkpoint, &overrides)
        }
        Command::Evaluate { checkpoint, manifest, out, run_id } => {
            commands::evaluate(&ctx, &checkpoint, &manifest, &out, &run_id)
        }
        Command::Analyze { checkpoint, manifest, out, reports, format, contextual, top_n, tokens, run_id } => {
            let opts = commands::AnalyzeOptions {
                similarity: reports.contains(&Report::Similarity),
                frequency: reports.contains(&Report::Frequency),
                transitions: reports.contains(&Report::Transitions),
                format: format.into(),
                contextual,
                top_n,
                tokens,
                run_id,
            };
            commands::analyze(&ctx, &checkpoint, &manifest, &out, &opts)
        }
        Command::Gradcheck { scale: Scale::Tiny, out, seed } => commands::gradcheck(&ctx, &out, seed),
    }
}
