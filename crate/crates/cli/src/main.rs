use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedkdx::config::{RunConfig, SweepAxis};
use fedkdx::experiment::{run_experiment, run_partition, run_sweep, version_string, with_threads};
use fedkdx::Error;

const DEFAULT_OUT: &str = "fedkdx-out";

#[derive(Parser)]
#[command(name = "fedkdx", version = version(), about = "Federated teacher/student distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train for the configured rounds; writes metrics.csv, timing.csv,
    /// summary.json, config.toml and checkpoint.bin.
    Run(Common),
    /// Write the per-client class-count table to partition.csv.
    Partition(Common),
    /// One run per sweep point plus sweep_summary.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// join_ratio or components; defaults to the config's sweep.axis.
        #[arg(long)]
        axis: Option<SweepAxis>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, 0 = one per core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

fn version() -> &'static str {
    Box::leak(version_string().into_boxed_str())
}

impl Common {
    fn load(&self, axis: Option<SweepAxis>) -> fedkdx::Result<(RunConfig, PathBuf)> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(axis) = axis {
            cfg.sweep.axis = axis;
        }
        let out = self
            .out
            .clone()
            .or_else(|| cfg.out.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        cfg.validate()?;
        Ok((cfg, out))
    }
}

fn execute(command: Command) -> fedkdx::Result<()> {
    match command {
        Command::Run(c) => {
            let (cfg, out) = c.load(None)?;
            let s = with_threads(c.threads, || run_experiment(&cfg, &out))??;
            let m = &s.final_metrics;
            println!(
                "{} rounds of {}: accuracy {:.4}, macro F1 {:.4}, {} bytes up, {} bytes down -> {}",
                s.rounds,
                s.strategy,
                m.accuracy,
                m.f1_macro,
                s.total_bytes_up,
                s.total_bytes_down,
                out.display()
            );
        }
        Command::Partition(c) => {
            let (cfg, out) = c.load(None)?;
            let table = with_threads(c.threads, || run_partition(&cfg, &out))??;
            println!("{} clients -> {}", table.len(), out.join("partition.csv").display());
        }
        Command::Sweep { common, axis } => {
            let (cfg, out) = common.load(axis)?;
            let points = with_threads(common.threads, || run_sweep(&cfg, cfg.sweep.axis, &out))??;
            for p in &points {
                println!("{:<16} accuracy {:.4}", p.label, p.summary.final_metrics.accuracy);
            }
            println!("{} points -> {}", points.len(), out.join("sweep_summary.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
