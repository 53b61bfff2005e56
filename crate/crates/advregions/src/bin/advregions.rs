//! Experiment pipeline CLI.
//!
//! Stages are separate subcommands so long runs can be resumed: `train`,
//! `attack`, `regions`, `audit`, and `report` each pick up where the previous
//! stage's artifacts left off. `init-config` writes a starting config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use advregions::nn::Architecture;
use advregions::pipeline::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "advregions", version, about = "Decision-boundary mapping with seed-varied ensembles and adversarial hyper-rectangles")]
struct Cli {
    /// Experiment config JSON; defaults to <out>/resolved_config.json when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Replace the seed list with N, N+1, ... (same count) and re-derive the
    /// attack and sampling seeds from N.
    #[arg(long, global = true)]
    seed_override: Option<u64>,

    /// Worker threads for the parallel sections (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the seed-varied ensemble and emit the baseline error table.
    Train,
    /// Generate adversarial sets against M_1 and emit the transfer matrix.
    Attack,
    /// Build, sample, and classify hyper-rectangles from the stored sets.
    Regions,
    /// Compare clean-data and in-region disagreement; score the alert strategy.
    Audit,
    /// Stitch all stage tables into one Markdown report.
    Report,
    /// Write a default experiment config for an architecture.
    InitConfig {
        #[arg(long, default_value = "lenet")]
        arch: Architecture,
        /// Where the MNIST IDX files live.
        #[arg(long, default_value = "data/mnist")]
        data_dir: PathBuf,
        /// Config file to write.
        #[arg(long, default_value = "experiment.json")]
        path: PathBuf,
    },
}

fn load_config(cli: &Cli) -> advregions::Result<ExperimentConfig> {
    let path = match &cli.config {
        Some(p) => p.clone(),
        None => {
            let fallback = cli.out.join("resolved_config.json");
            if fallback.exists() {
                fallback
            } else {
                return Err(advregions::Error::InvalidConfig(
                    "no --config given and no resolved_config.json in the output dir".into(),
                ));
            }
        }
    };
    let mut cfg = ExperimentConfig::load(&path)?;
    if let Some(base) = cli.seed_override {
        let n = cfg.seeds.len() as u64;
        cfg.seeds = (base..base + n).collect();
        cfg.attack_seed = base.wrapping_mul(31).wrapping_add(7);
        cfg.sample_seed = base.wrapping_mul(131).wrapping_add(3);
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> advregions::Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| advregions::Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    match &cli.cmd {
        Cmd::Train => pipeline::cmd_train(&load_config(cli)?, &cli.out),
        Cmd::Attack => pipeline::cmd_attack(&load_config(cli)?, &cli.out),
        Cmd::Regions => pipeline::cmd_regions(&load_config(cli)?, &cli.out),
        Cmd::Audit => pipeline::cmd_audit(&load_config(cli)?, &cli.out),
        Cmd::Report => {
            let path = pipeline::cmd_report(&load_config(cli)?, &cli.out)?;
            println!("{}", path.display());
            Ok(())
        }
        Cmd::InitConfig { arch, data_dir, path } => {
            let cfg = match arch {
                Architecture::Lenet => ExperimentConfig::lenet_default(data_dir.clone()),
                Architecture::Mlp => ExperimentConfig::mlp_default(data_dir.clone()),
            };
            cfg.save(path)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "error": e.to_string(),
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
