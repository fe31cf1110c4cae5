use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use pinet_experiments::config::{DESK_RUNS, FULL_RUNS};
use pinet_experiments::experiment::{evaluate_all, generate_data, report_from, train_all};
use pinet_experiments::report::export_csv;
use pinet_experiments::{parse_config, ExperimentConfig, VariantName};

#[derive(Parser)]
#[command(name = "pinets", version, about = "Train and evaluate pointwise-aggregation networks on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the datasets of every run as tensor files.
    Generate(Common),
    /// Train every model of every run and save checkpoints.
    Train(Common),
    /// Evaluate saved checkpoints and write report.json and the CSVs.
    Evaluate(Common),
    /// Train, evaluate and report in one go.
    Sweep(Common),
    /// Rewrite the CSVs from an existing report.json.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply without one.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, conflicts_with_all = ["desk", "full"])]
    runs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated variant names.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<VariantName>>,
    /// 5 runs.
    #[arg(long, conflicts_with = "full")]
    desk: bool,
    /// 30 runs.
    #[arg(long)]
    full: bool,
    /// Runs trained or evaluated concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Exit successfully even when some model was not accepted.
    #[arg(long)]
    allow_partial: bool,
}

impl Common {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => parse_config(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.runs {
            cfg.n_runs = n;
        }
        if self.desk {
            cfg.n_runs = DESK_RUNS;
        }
        if self.full {
            cfg.n_runs = FULL_RUNS;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(v) = &self.variants {
            cfg.variants = Some(v.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn status(all_accepted: bool, allow_partial: bool) -> ExitCode {
    if all_accepted {
        ExitCode::SUCCESS
    } else if allow_partial {
        warn!("some models were not accepted");
        ExitCode::SUCCESS
    } else {
        eprintln!("some models were not accepted; see training.json (pass --allow-partial to ignore)");
        ExitCode::from(2)
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    Ok(match cli.command {
        Command::Generate(c) => {
            let cfg = c.config()?;
            generate_data(&cfg, &cfg.out_dir).context("generating datasets")?;
            ExitCode::SUCCESS
        }
        Command::Train(c) => {
            let cfg = c.config()?;
            let records = train_all(&cfg, &cfg.out_dir, c.jobs).context("training")?;
            status(records.iter().all(|r| r.accepted), c.allow_partial)
        }
        Command::Evaluate(c) => {
            let cfg = c.config()?;
            let report = evaluate_all(&cfg, &cfg.out_dir, c.jobs).context("evaluating")?;
            export_csv(&report, &cfg.out_dir)?;
            status(report.all_accepted(), c.allow_partial)
        }
        Command::Sweep(c) => {
            let cfg = c.config()?;
            train_all(&cfg, &cfg.out_dir, c.jobs).context("training")?;
            let report = evaluate_all(&cfg, &cfg.out_dir, c.jobs).context("evaluating")?;
            let files = export_csv(&report, &cfg.out_dir)?;
            info!("wrote {} files to {}", files.len(), cfg.out_dir.display());
            status(report.all_accepted(), c.allow_partial)
        }
        Command::Report(c) => {
            let cfg = c.config()?;
            let report = report_from(&cfg.out_dir)?;
            status(report.all_accepted(), c.allow_partial)
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
