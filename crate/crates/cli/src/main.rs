use std::path::PathBuf;

use anyhow::Context as _;
use clap::{Parser, Subcommand};
use equireg::commands;
use equireg::ExperimentConfig;

#[derive(Parser)]
#[command(name = "equireg", version, about = "Equivariance-regularized diffusion posterior sampling experiments")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds, overriding the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads for runs and sweeps.
    #[arg(long, env = "EQUIREG_THREADS", default_value_t = 1)]
    threads: usize,
}

impl Common {
    fn load(&self) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
            cfg.validate()?;
        }
        let out = cfg.output_dir(self.out.as_deref());
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Verb {
    /// Generate the train and test datasets.
    GenData(Common),
    /// Fit or train score models and the autoencoder.
    Train(Common),
    /// Sample the test set and write samples, traces and a report.
    Run(Common),
    /// Run every cell of the sweep axes.
    Sweep(Common),
    /// Aggregate the run and sweep outputs of a directory.
    Report {
        /// Output directory of earlier verbs.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().verb {
        Verb::GenData(c) => {
            let (cfg, out) = c.load()?;
            for p in commands::cmd_gen_data(&cfg, &out)? {
                println!("{}", p.display());
            }
        }
        Verb::Train(c) => {
            let (cfg, out) = c.load()?;
            for p in commands::cmd_train(&cfg, &out)? {
                println!("{}", p.display());
            }
        }
        Verb::Run(c) => {
            let (cfg, out) = c.load()?;
            let r = commands::cmd_run(&cfg, &out, c.threads.max(1))?;
            println!("psnr {:.3} ssim {:.4}", r.mean.psnr, r.mean.ssim);
            println!("report_hash {}", r.report_hash);
        }
        Verb::Sweep(c) => {
            let (cfg, out) = c.load()?;
            let rows = commands::cmd_sweep(&cfg, &out, c.threads.max(1))?;
            println!("{} rows written to {}", rows.len(), out.join("sweep").join("sweep.csv").display());
        }
        Verb::Report { out } => {
            let s = commands::cmd_report(&out).with_context(|| format!("reporting on {}", out.display()))?;
            println!("{} sweep cells summarized", s.cells.len());
        }
    }
    Ok(())
}
