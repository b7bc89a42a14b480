use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hdpo::curation::write_pass_at_k_csv;
use hdpo::experiment::{write_diagnostics_csv, write_sweep_csv};
use hdpo::trajectory::{read_jsonl, write_jsonl};
use hdpo::{
    diagnose, difficulty_calibration_filter, generate_prompts, solvability_filter, sweep,
    train_with, Checkpoint, PolicyParams, Prompt, RunConfig, SweepParameter, TrainOptions,
};

/// Tabular HDPO experiments in ToolWorld.
#[derive(Parser)]
#[command(name = "hdpo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config with [env], [hp], [update] and [run] sections.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one field, e.g. `--set hp.alpha=0.1`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let cfg = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy; writes metrics and checkpoints to the configured paths.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write every sampled trajectory as JSONL.
        #[arg(long, value_name = "PATH")]
        dump_trajectories: Option<PathBuf>,
    },
    /// Train once per value (and replicate) and write final evaluations as CSV.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_parser = parse_parameter)]
        param: SweepParameter,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        replicates: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Variance decomposition of the coupled reward over sampled groups.
    Diagnose {
        #[command(flatten)]
        config: ConfigArgs,
        /// Policy to sample with; defaults to the configured starting policy.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.0001,0.001,0.01,0.1")]
        alphas: Vec<f64>,
        #[arg(long, default_value_t = 200)]
        groups: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Filter a prompt set by pass@k under a policy snapshot.
    Curate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        filter: FilterKind,
        /// Prompt set (JSONL).
        #[arg(long)]
        input: PathBuf,
        /// Policy snapshot; defaults to the configured starting policy.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Rollouts per prompt.
        #[arg(long, default_value_t = 8)]
        k: usize,
        /// Retained prompts (JSONL).
        #[arg(long)]
        out: PathBuf,
        /// Per-prompt pass@k reports (CSV).
        #[arg(long)]
        report: PathBuf,
    },
    /// Write prompts drawn from the configured environment as JSONL.
    GenPrompts {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FilterKind {
    Solvability,
    Calibration,
}

fn parse_parameter(s: &str) -> Result<SweepParameter, String> {
    s.parse().map_err(|e: hdpo::Error| e.to_string())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(file))
}

fn load_policy(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<PolicyParams> {
    match checkpoint {
        Some(path) => Ok(Checkpoint::read(open(path)?, cfg.env.space())
            .with_context(|| format!("bad checkpoint {}", path.display()))?
            .params),
        None => Ok(PolicyParams::cold_start(cfg.env.space(), &cfg.run.init)),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume, dump_trajectories } => {
            let cfg = config.load()?;
            let resume = match &resume {
                Some(path) => Some(
                    Checkpoint::read(open(path)?, cfg.env.space())
                        .with_context(|| format!("bad checkpoint {}", path.display()))?,
                ),
                None => None,
            };
            let out = train_with(&cfg, TrainOptions { resume, dump_trajectories })?;
            if let Some(last) = out.metrics.last() {
                println!(
                    "iterations {} accuracy {:.4} tool_rate {:.4} loss {:.6}",
                    last.iteration + 1,
                    last.accuracy,
                    last.tool_rate,
                    last.loss
                );
            }
            if let Some(e) = out.eval {
                println!(
                    "eval episodes {} accuracy {:.4} tool_invocation_fraction {:.4} \
                     easy_tool_fraction {:.4} hard_accuracy {:.4}",
                    e.episodes,
                    e.accuracy,
                    e.tool_invocation_fraction,
                    e.easy_tool_fraction,
                    e.hard_accuracy
                );
            }
        }
        Command::Sweep { config, param, values, replicates, out } => {
            let cfg = config.load()?;
            let rows = sweep(&cfg, param, &values, replicates)?;
            let mut w = create(&out)?;
            write_sweep_csv(&mut w, &rows)?;
            w.flush()?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Diagnose { config, checkpoint, alphas, groups, out } => {
            let cfg = config.load()?;
            if alphas.is_empty() || groups == 0 {
                bail!("diagnose needs at least one alpha and one group");
            }
            let params = load_policy(&cfg, checkpoint.as_deref())?;
            let rows = diagnose(&cfg, &params, &alphas, groups)?;
            let mut w = create(&out)?;
            write_diagnostics_csv(&mut w, &rows)?;
            w.flush()?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Curate { config, filter, input, checkpoint, k, out, report } => {
            let cfg = config.load()?;
            let prompts: Vec<Prompt> = read_jsonl(open(&input)?)
                .with_context(|| format!("bad prompt set {}", input.display()))?;
            let params = load_policy(&cfg, checkpoint.as_deref())?;
            let outcome = match filter {
                FilterKind::Solvability => {
                    if k < 1 {
                        bail!("--k must be >= 1");
                    }
                    solvability_filter(&prompts, &params, &cfg.env, k)
                }
                FilterKind::Calibration => {
                    if k < 2 {
                        bail!("--k must be >= 2 for calibration");
                    }
                    difficulty_calibration_filter(&prompts, &params, &cfg.env, k)
                }
            };
            let mut w = create(&out)?;
            write_jsonl(&mut w, &outcome.retained)?;
            w.flush()?;
            let mut w = create(&report)?;
            write_pass_at_k_csv(&mut w, &outcome.reports)?;
            w.flush()?;
            println!("retained {} of {} prompts", outcome.retained.len(), prompts.len());
        }
        Command::GenPrompts { config, n, out } => {
            let cfg = config.load()?;
            if n == 0 {
                bail!("-n must be >= 1");
            }
            let mut w = create(&out)?;
            write_jsonl(&mut w, &generate_prompts(&cfg.env, n))?;
            w.flush()?;
            println!("wrote {n} prompts to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
