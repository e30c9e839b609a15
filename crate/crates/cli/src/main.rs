//! `gcl` — run the continual-learning laboratory from the shell.
//!
//! Subcommands: `isa` warms up prompts and writes a checkpoint; `run`
//! executes one streaming run; `sweep` expands an ablation axis over a seed
//! grid; `report` aggregates result rows into tables and plot-ready CSV.
//!
//! Results accumulate in `<out>/results.jsonl` (append-only, one JSON row
//! per run). The output directory comes from `--out`, else the
//! `GCL_OUT_DIR` environment variable, else `./gcl-out`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use gcl_core::harness::{
    anytime_csv, append_results, prepare_backbone, read_results, retention_csv, run_gcl,
    summarize, summary_table, sweep, warm_up, SweepAxis,
};
use gcl_core::model::{load_prompt_checkpoint, save_prompt_checkpoint};
use gcl_core::{ExperimentConfig, IsaArtifacts, IsaMode};

const ENV_OUT_DIR: &str = "GCL_OUT_DIR";
const RESULTS_FILE: &str = "results.jsonl";

#[derive(Parser)]
#[command(
    name = "gcl",
    about = "Desk-scale general continual learning laboratory",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment config file (`key = value` lines); defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run seed, overriding the config file's `run.seed`.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,

    /// Output directory (default: $GCL_OUT_DIR, then ./gcl-out).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateAxis {
    Mask,
    Isa,
    Buffer,
}

impl From<AblateAxis> for SweepAxis {
    fn from(axis: AblateAxis) -> SweepAxis {
        match axis {
            AblateAxis::Mask => SweepAxis::Mask,
            AblateAxis::Isa => SweepAxis::Isa,
            AblateAxis::Buffer => SweepAxis::Buffer,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the backbone, warm up prompts, and write a prompt checkpoint.
    Isa {
        #[command(flatten)]
        common: CommonArgs,

        /// Where to write the prompt checkpoint
        /// (default: <out>/prompts.gclp).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// One full streaming run; appends a result row to <out>/results.jsonl.
    Run {
        #[command(flatten)]
        common: CommonArgs,

        /// Prompt checkpoint to stream with; required unless `isa.mode = off`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// A grid of runs: one ablation axis crossed with a seed range.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,

        /// Which knob to ablate across arms.
        #[arg(long, value_enum, value_name = "AXIS")]
        ablate: AblateAxis,

        /// How many consecutive seeds to run, starting at --seed (or the
        /// config's run.seed).
        #[arg(long, value_name = "INT", default_value_t = 5)]
        runs: u64,
    },
    /// Aggregate <out>/results.jsonl into a mean±std table and CSV curves.
    Report {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Isa { common, checkpoint } => cmd_isa(&common, checkpoint.as_deref()),
        Command::Run { common, checkpoint } => cmd_run(&common, checkpoint.as_deref()),
        Command::Sweep { common, ablate, runs } => cmd_sweep(&common, ablate, runs),
        Command::Report { common } => cmd_report(&common),
    }
}

fn load_config(common: &CommonArgs) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            ExperimentConfig::parse(&text)
               .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn out_dir(common: &CommonArgs) -> anyhow::Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| std::env::var_os(ENV_OUT_DIR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("gcl-out"));
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn cmd_isa(common: &CommonArgs, checkpoint: Option<&Path>) -> anyhow::Result<()> {
    let config = load_config(common)?;
    if config.isa.mode == IsaMode::Off {
        bail!("isa.mode is off; nothing to warm up (set isa.mode to naive, sam, or fam)");
    }
    let dir = out_dir(common)?;
    let checkpoint = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join("prompts.gclp"));

    let prepared = prepare_backbone(&config)?;
    println!(
        "backbone pretrained: final train accuracy {:.3} over {} steps",
        prepared.report.final_accuracy, prepared.report.steps
    );
    let (artifacts, report) = warm_up(&config, &prepared)?;
    save_prompt_checkpoint(&checkpoint, &artifacts.prompts, artifacts.provenance)?;

    let log_path = dir.join("isa_log.jsonl");
    let mut log_text = String::new();
    for step in &report.steps {
        log_text.push_str(&serde_json::to_string(step)?);
        log_text.push('\n');
    }
    std::fs::write(&log_path, log_text)
        .with_context(|| format!("writing {}", log_path.display()))?;

    if report.fell_back_to_sam {
        println!("note: no held-out classes were available, warm-up fell back to sam");
    }
    println!(
        "warm-up finished: {} steps, provenance {}, checkpoint {}",
        report.steps.len(),
        artifacts.provenance.as_str(),
        checkpoint.display()
    );
    println!("step log: {}", log_path.display());
    Ok(())
}

fn cmd_run(common: &CommonArgs, checkpoint: Option<&Path>) -> anyhow::Result<()> {
    let config = load_config(common)?;
    let artifacts = match checkpoint {
        Some(path) => {
            let (prompts, provenance) = load_prompt_checkpoint(path)?;
            Some(IsaArtifacts { prompts, provenance })
        }
        None if config.isa.mode != IsaMode::Off => {
            bail!(
                "isa.mode = {} needs --checkpoint PATH (produce one with `gcl isa`)",
                config.isa.mode
            );
        }
        None => None,
    };

    let prepared = prepare_backbone(&config)?;
    let result = run_gcl(&config, &prepared, artifacts)?;

    let dir = out_dir(common)?;
    let results_path = dir.join(RESULTS_FILE);
    append_results(&results_path, std::slice::from_ref(&result))?;
    println!(
        "{} seed={} a_last={:.4} f_last={:.4} a_auc={:.4}",
        result.label, result.seed, result.a_last, result.f_last, result.a_auc
    );
    println!("row appended to {}", results_path.display());
    Ok(())
}

fn cmd_sweep(common: &CommonArgs, ablate: AblateAxis, runs: u64) -> anyhow::Result<()> {
    if runs == 0 {
        bail!("--runs must be at least 1");
    }
    let config = load_config(common)?;
    let first = config.seed;
    let seeds: Vec<u64> = (0..runs).map(|i| first + i).collect();
    let results = sweep(&config, ablate.into(), &seeds)?;

    let dir = out_dir(common)?;
    let results_path = dir.join(RESULTS_FILE);
    append_results(&results_path, &results)?;
    println!(
        "{} runs ({} arms x {} seeds) appended to {}",
        results.len(),
        results.len() / seeds.len(),
        seeds.len(),
        results_path.display()
    );
    print!("{}", summary_table(&summarize(&results)));
    Ok(())
}

fn cmd_report(common: &CommonArgs) -> anyhow::Result<()> {
    let dir = out_dir(common)?;
    let results_path = dir.join(RESULTS_FILE);
    let results = read_results(&results_path)?;
    if results.is_empty() {
        bail!("no result rows in {}", results_path.display());
    }

    let anytime_path = dir.join("anytime.csv");
    std::fs::write(&anytime_path, anytime_csv(&results))
        .with_context(|| format!("writing {}", anytime_path.display()))?;
    let retention_path = dir.join("retention.csv");
    std::fs::write(&retention_path, retention_csv(&results))
        .with_context(|| format!("writing {}", retention_path.display()))?;

    print!("{}", summary_table(&summarize(&results)));
    println!("anytime curves: {}", anytime_path.display());
    println!("session-1 retention curves: {}", retention_path.display());
    Ok(())
}
