mod commands;
mod config;
mod io;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nsl_core::dataset::Split;
use nsl_core::matcher::MatcherMode;
use nsl_core::{NslError, PatternKind, Result};

use crate::config::RunConfig;

/// Structured-light depth decoding lab: data generation, training,
/// inference, baselines and evaluation.
#[derive(Parser)]
#[command(name = "nsl-lab", version)]
struct Cli {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration field, e.g. `--set stage1.steps=100`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root seed; every random stream derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render one projector pattern to an 8-bit PNG plus a JSON spec sidecar.
    GenPattern {
        #[arg(long)]
        kind: PatternKind,
        /// `WIDTHxHEIGHT`; the dataset size by default.
        #[arg(long, value_parser = parse_size)]
        size: Option<[usize; 2]>,
        /// Pattern parameter override, e.g. `--param density=0.1`.
        #[arg(long = "param", value_name = "KEY=VALUE")]
        params: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a dataset tree with train, validation and held-out shards.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of training samples.
        #[arg(long, default_value_t = 512)]
        n: usize,
    },
    /// Train the stage-1 matcher; writes `stage1_<mode>.ckpt` and a loss CSV.
    TrainStage1 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        mode: Option<MatcherMode>,
    },
    /// Train the stage-2 refiner on a frozen stage-1 matcher.
    TrainStage2 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        mode: Option<MatcherMode>,
        /// Stage-1 checkpoint; `<runs>/stage1_<mode>.ckpt` by default.
        #[arg(long)]
        stage1: Option<PathBuf>,
    },
    /// Predict depth and disparity PFMs for a sample or a dataset split.
    Infer {
        /// Dataset root or a single sample directory.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        stage2: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        stage: u8,
        #[arg(long)]
        mode: Option<MatcherMode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Template-matching baseline (IR against pattern).
    BaselineTm {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multi-pattern pseudo ground truth by re-rendering each scene.
    PseudoGt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics of a prediction directory against a dataset or another
    /// prediction directory.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report JSON; `<pred>/metrics.json` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ablation tables over modes, stages and patterns plus figure grids.
    Report {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Samples per figure grid.
        #[arg(long, default_value_t = 4)]
        grid: usize,
    },
}

fn parse_size(s: &str) -> std::result::Result<[usize; 2], String> {
    let (w, h) = s.split_once('x').ok_or("expected WIDTHxHEIGHT")?;
    let p = |v: &str| v.parse::<usize>().map_err(|e| e.to_string());
    Ok([p(w)?, p(h)?])
}

fn with_mode(mut cfg: RunConfig, mode: Option<MatcherMode>) -> Result<RunConfig> {
    if let Some(m) = mode {
        cfg.matcher.mode = m;
        cfg.matcher.validate()?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| NslError::Config(e.to_string()))?;
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.set, cli.seed)?;
    match cli.command {
        Command::GenPattern {
            kind,
            size,
            params,
            out,
        } => commands::gen_pattern(&cfg, kind, size, &params, &out),
        Command::GenData { out, n } => commands::gen_data(&cfg, n, &out),
        Command::TrainStage1 { data, runs, mode } => {
            commands::train_stage1(&with_mode(cfg, mode)?, &data, &runs)
        }
        Command::TrainStage2 {
            data,
            runs,
            mode,
            stage1,
        } => commands::train_stage2(&with_mode(cfg, mode)?, &data, &runs, stage1.as_deref()),
        Command::Infer {
            input,
            split,
            runs,
            stage1,
            stage2,
            stage,
            mode,
            out,
        } => commands::infer(&commands::InferArgs {
            input: &input,
            split,
            runs: &runs,
            stage1: stage1.as_deref(),
            stage2: stage2.as_deref(),
            stage,
            mode: mode.unwrap_or(cfg.matcher.mode),
            out: &out,
        }),
        Command::BaselineTm { input, split, out } => {
            commands::baseline_tm(&cfg, &input, split, &out)
        }
        Command::PseudoGt { data, split, out } => commands::pseudo_gt(&cfg, &data, split, &out),
        Command::Eval { pred, gt, out } => {
            let r = commands::eval(&pred, &gt)?;
            let path = out.unwrap_or_else(|| pred.join("metrics.json"));
            commands::write_json(&path, &r)?;
            print!("{}", r.table());
            if !r.skipped.is_empty() {
                eprintln!(
                    "{} samples had no valid pixels: {}",
                    r.skipped.len(),
                    r.skipped.join(", ")
                );
            }
            Ok(())
        }
        Command::Report {
            data,
            runs,
            out,
            grid,
        } => {
            let r = report::report(&cfg, &data, &runs, &out, grid)?;
            print!("{}", r.markdown());
            Ok(())
        }
    }
}

fn exit_code(e: &NslError) -> u8 {
    if e.is_validation() {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
