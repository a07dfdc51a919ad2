use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use letf_harness::{
    qmc_single_step_experiment, run_smoother, run_sweep, run_twin_experiment, ExperimentConfig,
    QmcConfig, SmootherConfig,
};

#[derive(Parser)]
#[command(
    name = "letf",
    version,
    about = "Ensemble transform filter experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single twin experiment.
    Twin(Common),
    /// Run a twin experiment on every cell of a parameter grid.
    Sweep(Common),
    /// QMC single-step convergence study.
    Qmc(Common),
    /// Path importance sampling and MCMC on the scalar linear-Gaussian problem.
    Smoother(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration. Required for `twin` and `sweep`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn read(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn experiment(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let path = c.config.as_deref().context("--config is required")?;
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Twin(c) => {
            let run = run_twin_experiment(&experiment(&c)?, Some(&c.out))?;
            let s = &run.summary;
            match &s.divergence {
                None => println!(
                    "rmse {:.6} after {} cycles",
                    s.rmse.unwrap_or(f64::NAN),
                    s.cycles_completed
                ),
                Some(d) => println!("diverged at cycle {}: {}", d.cycle, d.reason),
            }
        }
        Command::Sweep(c) => {
            let res = run_sweep(&experiment(&c)?, Some(&c.out))?;
            match res.best() {
                Some(b) => println!(
                    "best {}={} {} rmse {:.6}",
                    res.sweep.param1.name(),
                    b.param1,
                    b.param2.map(|v| format!("second={v}")).unwrap_or_default(),
                    b.summary.score()
                ),
                None => println!("every cell diverged"),
            }
        }
        Command::Qmc(c) => {
            let mut cfg = match &c.config {
                Some(p) => QmcConfig::from_toml_str(&read(p)?)?,
                None => QmcConfig::default(),
            };
            if let Some(seed) = c.seed {
                cfg.seed = seed;
            }
            let r = qmc_single_step_experiment(&cfg, Some(&c.out))?;
            println!(
                "mean-error slopes: etpf {:.3}, residual resampling {:.3}",
                r.etpf_slope.slope, r.resampling_slope.slope
            );
        }
        Command::Smoother(c) => {
            let mut cfg = match &c.config {
                Some(p) => SmootherConfig::from_toml_str(&read(p)?)?,
                None => SmootherConfig::default(),
            };
            if let Some(seed) = c.seed {
                cfg.seed = seed;
            }
            let r = run_smoother(&cfg, Some(&c.out))?;
            println!(
                "exact {:.6}, importance {:.6} ± {:.6}, mcmc {:.6} ± {:.6} (acceptance {:.3})",
                r.exact_mean,
                r.importance.mean,
                r.importance.standard_error,
                r.mcmc.mean,
                r.mcmc.standard_error,
                r.acceptance_rate
            );
        }
    }
    Ok(())
}
