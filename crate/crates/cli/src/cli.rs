//! Command-line front end. Exit codes: 0 success, 1 other failures (I/O, a
//! failed oracle battery), 2 configuration errors and refused comparisons,
//! 3 solver or plant failures during a run.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use crate::compare::compare_runs;
use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::CliError;
use crate::experiment::{layout_for, resume_experiment, run_experiment, RunError};
use crate::oracle::run_oracle_suite;
use crate::report::{emit_report, read_checkpoint, read_log};

#[derive(Debug, Parser)]
#[command(name = "enmpc", about = "Closed-loop RL tuning of (economic) MPC schemes", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Output directory (overrides `out`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Sets both the plant and the learner seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a `checkpoint.toml`.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run directory whose logged disturbances are replayed.
        #[arg(long, requires = "resume")]
        replay: Option<PathBuf>,
    },
    /// Compare two run directories on matched plant seeds.
    Compare {
        baseline: PathBuf,
        learned: PathBuf,
        /// Also write per-step differences to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Scalar Riccati worked example.
    LqrDemo,
    /// Seeded batteries of the tabular certificates.
    OracleSuite {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out, seed, resume, replay } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            if let Some(s) = seed {
                cfg.plant_seed = s;
                cfg.learner_seed = s;
                cfg.oracle_seed = s;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            run(&cfg, resume, replay)
        }
        Command::Compare { baseline, learned, csv } => {
            let b = read_log(&baseline)?;
            let l = read_log(&learned)?;
            let cmp = compare_runs(&b, &l).map_err(|e| CliError::Config(e.to_string()))?;
            print!("{cmp}");
            if let Some(p) = csv {
                cmp.write_csv(&p, b.meta.start_step)?;
            }
            Ok(())
        }
        Command::LqrDemo => {
            print!("{}", lqr_demo()?);
            Ok(())
        }
        Command::OracleSuite { instances, seed } => oracle(instances, seed, None),
    }
}

pub fn lqr_demo() -> Result<String, CliError> {
    enmpc_core::lqr::scalar_example_report().map_err(|e| CliError::Other(e.into()))
}

fn oracle(instances: usize, seed: u64, out: Option<&std::path::Path>) -> Result<(), CliError> {
    let results = run_oracle_suite(instances, seed);
    let text: String = results.iter().map(|r| format!("{r}\n")).collect();
    print!("{text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).context("creating output directory")?;
        std::fs::write(dir.join("oracle.txt"), &text).context("writing oracle.txt")?;
    }
    if results.iter().all(|r| r.passed()) {
        Ok(())
    } else {
        Err(CliError::Other(anyhow::anyhow!("oracle battery failed")))
    }
}

fn run(cfg: &ExperimentConfig, resume: Option<PathBuf>, replay: Option<PathBuf>) -> Result<(), CliError> {
    match cfg.kind {
        ExperimentKind::LqrDemo => {
            let text = lqr_demo()?;
            print!("{text}");
            std::fs::create_dir_all(&cfg.out).context("creating output directory")?;
            std::fs::write(cfg.out.join("lqr-demo.txt"), text).context("writing lqr-demo.txt")?;
            return Ok(());
        }
        ExperimentKind::OracleSuite => return oracle(cfg.oracle_instances, cfg.oracle_seed, Some(&cfg.out)),
        _ => {}
    }
    let outcome = match resume {
        None => run_experiment(cfg),
        Some(path) => {
            let layout = layout_for(cfg.kind).map_err(|e| CliError::Config(e.to_string()))?;
            let (info, state) =
                read_checkpoint(&path, &layout).map_err(|e| CliError::Config(format!("checkpoint: {e:#}")))?;
            if (info.kind, info.plant_seed, info.learner_seed) != (cfg.kind, cfg.plant_seed, cfg.learner_seed) {
                return Err(CliError::Config("checkpoint was written by a different experiment or seeds".into()));
            }
            let log = match replay {
                Some(dir) => Some(read_log(&dir).map_err(|e| CliError::Config(format!("replay log: {e:#}")))?),
                None => None,
            };
            resume_experiment(cfg, state, log.as_ref())
        }
    };
    match outcome {
        Ok(log) => {
            emit_report(&log, &cfg.out)?;
            let s = log.summary();
            println!(
                "{} steps, mean cost {:?}, {} steps outside the state bounds; written to {}",
                s.steps,
                s.mean_cost,
                s.violations,
                cfg.out.display()
            );
            Ok(())
        }
        Err(RunError::Config(e)) => Err(e),
        Err(RunError::Aborted(a)) => {
            emit_report(&a.log, &cfg.out)?;
            let at = a.log.meta.start_step + a.log.rows.len();
            Err(CliError::Solver(format!(
                "run aborted at step {at}: {}; partial log and checkpoint written to {}",
                a.error,
                cfg.out.display()
            )))
        }
    }
}
