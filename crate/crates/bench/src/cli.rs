//! Command line front end.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use mpc_tune::tuner::ScheduleKind;

use crate::config::{ExperimentConfig, Mode};
use crate::experiment::{run_certify, run_experiment, run_sysid, write_certify, write_report, write_sysid};
use crate::BenchError;

#[derive(Debug, Parser)]
#[command(name = "mpc-tune", version, about = "Closed-loop MPC tuning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Overrides the training seed base.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the number of tuning iterations.
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    /// Runs a single mode instead of the configured list.
    #[arg(long, global = true)]
    pub mode: Option<Mode>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tune and evaluate against the baselines.
    Run { config: PathBuf },
    /// Open-loop identification study.
    Sysid { config: PathBuf },
    /// Tune, then certify the gradient norm under model uncertainty.
    Certify { config: PathBuf },
    /// Evaluate the untrained, Riccati and omniscient controllers only.
    Baseline { config: PathBuf },
}

fn load(path: &PathBuf, cli: &Cli) -> Result<ExperimentConfig, BenchError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seeds.train = s;
    }
    if let Some(k) = cli.iterations {
        cfg.tuning.iterations = k;
    }
    if let Some(m) = cli.mode {
        cfg.tuning.modes = vec![m];
    }
    for &m in &cfg.tuning.modes {
        if m.tune_mode().is_some() && matches!(cfg.schedule_for(m).kind, ScheduleKind::Geometric { .. }) {
            log::warn!("{}: the geometric schedule has a finite step sum, so the convergence guarantee does not apply", m.name());
        }
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<(), BenchError> {
    match &cli.command {
        Command::Run { config } => {
            let cfg = load(config, cli)?;
            if cfg.tuning.modes == [Mode::Scenario] {
                let report = run_certify(&cfg, cfg.tuning.iterations)?;
                return write_certify(&report, &cli.out);
            }
            let modes: Vec<Mode> = cfg.tuning.modes.iter().copied().filter(|m| m.tune_mode().is_some()).collect();
            let report = run_experiment(&cfg, &modes, cfg.tuning.iterations)?;
            write_report(&report, &cli.out)?;
            for m in &report.summary.modes {
                println!(
                    "{}: untrained {:.6} trained {:.6} ratio {:.4} omniscient {:.6}",
                    m.mode.name(),
                    report.summary.untrained_mean,
                    m.trained_mean,
                    m.ratio_to_untrained,
                    report.summary.omniscient_mean
                );
            }
            Ok(())
        }
        Command::Sysid { config } => {
            let cfg = load(config, cli)?;
            let report = run_sysid(&cfg)?;
            write_sysid(&report, &cli.out)?;
            println!(
                "coverage {:.3} mean final error {:.3e} below {} after {:?} iterations",
                report.coverage, report.mean_final_err, report.threshold, report.mean_first_below
            );
            Ok(())
        }
        Command::Certify { config } => {
            let cfg = load(config, cli)?;
            let report = run_certify(&cfg, cfg.tuning.iterations)?;
            write_certify(&report, &cli.out)?;
            println!(
                "k_max {} bound {:.6e} at epsilon {}",
                report.result.k_max, report.result.bound, report.result.epsilon
            );
            Ok(())
        }
        Command::Baseline { config } => {
            let cfg = load(config, cli)?;
            let report = run_experiment(&cfg, &[], 0)?;
            write_report(&report, &cli.out)?;
            println!(
                "untrained {:.6} riccati {:?} omniscient {:.6}",
                report.summary.untrained_mean, report.summary.dare_mean, report.summary.omniscient_mean
            );
            Ok(())
        }
    }
}
