use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drp_cli::commands;
use drp_cli::config::{Overrides, RunConfig};
use drp_cli::{exit_code, EXIT_FAILURE};
use drp_core::metrics::BucketMode;
use drp_core::training::Variant;
use drp_core::{Error, Result};

/// Joint relevance-preference behavior modeling: synthetic worlds, training,
/// evaluation and ablations.
///
/// Values resolve as flags > config file > defaults. Every command writes
/// effective_config.json into the report directory before doing work.
/// DRP_THREADS bounds the number of parallel training runs in `ablate`.
#[derive(Parser, Debug)]
#[command(name = "drp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration with sections world, model, train, eval, paths.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for both world generation and training.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// FULL, V1_NON_ORTHO, V2_NO_FUSION, V3_NO_GLOBAL, V4_NO_LOCAL, V5_NO_EDIT or BASE_FIXED.
    #[arg(long, global = true, value_name = "NAME")]
    variant: Option<Variant>,
    /// Relevance exponent.
    #[arg(long, global = true, value_name = "X")]
    delta: Option<f64>,
    /// Rank of the editing subspace.
    #[arg(long = "rank-d", global = true, value_name = "N")]
    rank_d: Option<usize>,
    /// Report directory (default `runs`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// JSONL dataset; without it the configured world is sampled in memory.
    #[arg(long, global = true, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Skip malformed dataset lines with a warning instead of failing.
    #[arg(long, global = true)]
    lenient: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample the synthetic world and write it as JSONL.
    Generate,
    /// Train one variant; writes checkpoint.json and history.csv.
    Train,
    /// Score checkpoints on the test split; writes metrics.csv and metrics.json.
    Eval {
        /// Checkpoint to score; repeat to compare several.
        #[arg(long, value_name = "PATH")]
        checkpoint: Vec<PathBuf>,
    },
    /// Per-area mean predictions of a checkpoint; writes heatmap.csv.
    Heatmap {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Bucket by oracle area labels or by thresholded model scores.
        #[arg(long, value_parser = parse_mode, value_name = "oracle|score")]
        mode: Option<BucketMode>,
    },
    /// Finite-difference gradient check of a fresh model; nonzero exit on failure.
    Gradcheck,
    /// Train every configured variant over several seeds and tabulate mean±std.
    Ablate {
        /// Seeds per variant (default 5).
        #[arg(long, value_name = "N")]
        seeds: Option<usize>,
    },
}

fn parse_mode(s: &str) -> std::result::Result<BucketMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "oracle" => Ok(BucketMode::Oracle),
        "score" => Ok(BucketMode::Score),
        _ => Err(format!(
            "unknown bucket mode `{s}` (expected oracle or score)"
        )),
    }
}

fn run(cli: Cli) -> Result<bool> {
    let c = cli.common;
    let mut overrides = Overrides {
        seed: c.seed,
        variant: c.variant,
        delta: c.delta,
        rank: c.rank_d,
        out: c.out,
        dataset: c.data,
        ..Default::default()
    };
    match &cli.command {
        Command::Heatmap { checkpoint, mode } => {
            overrides.checkpoint.clone_from(checkpoint);
            overrides.bucket_mode = *mode;
        }
        Command::Ablate { seeds } => overrides.seeds = *seeds,
        _ => {}
    }
    let cfg = RunConfig::resolve(c.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Generate => print!("{}", commands::generate(&cfg)?.render()),
        Command::Train => print!("{}", commands::train(&cfg, c.lenient)?.render()),
        Command::Eval { checkpoint } => {
            print!(
                "{}",
                commands::render_metrics(&commands::eval(&cfg, c.lenient, &checkpoint)?)
            )
        }
        Command::Heatmap { .. } => print!(
            "{}",
            commands::render_heatmap(&commands::heatmap(&cfg, c.lenient)?)
        ),
        Command::Gradcheck => {
            let report = commands::gradcheck(&cfg, c.lenient)?;
            print!("{}", commands::render_gradcheck(&report));
            return Ok(report.pass);
        }
        Command::Ablate { .. } => {
            let out = commands::ablate(&cfg, c.lenient)?;
            print!("{}", drp_cli::experiment::format_ablation(&out.rows));
        }
    }
    Ok(true)
}

fn report(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(exit_code(err) as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILURE as u8),
        Err(e) => report(&e),
    }
}
