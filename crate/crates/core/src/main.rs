use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nonrival::pipeline::{self, ExperimentConfig, Outcome, Overrides};
use nonrival::{Error, Result};

/// Contract games between competing principals and agents over a
/// non-rivalrous good.
#[derive(Parser)]
#[command(name = "nonrival", version)]
struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: `out` in the working directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Simplex points to sample.
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Monte Carlo draws.
    #[arg(long, global = true)]
    mc_samples: Option<usize>,
    /// Convergence tolerance of the equilibrium solver.
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: solve, sample the polytope, check, simulate.
    Run,
    /// Dominant-strategy efforts for `contract.a`.
    Stage2,
    /// Solve the first stage; writes an equilibrium file.
    Gne,
    /// Sample the polytope of transfers for fixed slopes.
    Simplex {
        /// Take the slopes from this equilibrium file.
        #[arg(long)]
        equilibrium: Option<PathBuf>,
    },
    /// Check binding IR, deviations and the refinements at a stored point.
    Verify {
        #[arg(long)]
        equilibrium: PathBuf,
    },
    /// Monte Carlo cross-check of the closed-form expectations.
    Simulate,
    /// Merge result files or directories into `summary.csv`.
    Report { inputs: Vec<PathBuf> },
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            out: self.out.clone(),
            seed: self.seed,
            samples: self.samples,
            mc_samples: self.mc_samples,
            tol: self.tol,
        }
    }

    fn config(&self) -> Result<ExperimentConfig> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
        let mut cfg = ExperimentConfig::load(path)?;
        cfg.apply(&self.overrides())?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: Option<&ExperimentConfig>) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.and_then(|c| c.out.clone()))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn execute(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Run => {
            let cfg = cli.config()?;
            pipeline::run_pipeline(&cfg, &cli.out_dir(Some(&cfg)))
        }
        Command::Stage2 => {
            let cfg = cli.config()?;
            pipeline::cmd_stage2(&cfg, &cli.out_dir(Some(&cfg)))
        }
        Command::Gne => {
            let cfg = cli.config()?;
            pipeline::cmd_gne(&cfg, &cli.out_dir(Some(&cfg)))
        }
        Command::Simplex { equilibrium } => {
            let cfg = match (&cli.config, equilibrium) {
                (None, Some(path)) => {
                    let eq = pipeline::load_equilibrium(path)?;
                    let mut cfg = ExperimentConfig::for_market(eq.market);
                    cfg.apply(&cli.overrides())?;
                    cfg
                }
                _ => cli.config()?,
            };
            pipeline::cmd_simplex(&cfg, equilibrium.as_deref(), &cli.out_dir(Some(&cfg)))
        }
        Command::Verify { equilibrium } => {
            let cfg = match &cli.config {
                Some(_) => cli.config()?,
                None => {
                    let eq = pipeline::load_equilibrium(equilibrium)?;
                    let mut cfg = ExperimentConfig::for_market(eq.market);
                    cfg.apply(&cli.overrides())?;
                    cfg
                }
            };
            pipeline::cmd_verify(&cfg, equilibrium, &cli.out_dir(Some(&cfg)))
        }
        Command::Simulate => {
            let cfg = cli.config()?;
            pipeline::cmd_simulate(&cfg, &cli.out_dir(Some(&cfg)))
        }
        Command::Report { inputs } => {
            let out = cli.out_dir(None);
            let inputs = if inputs.is_empty() {
                vec![out.clone()]
            } else {
                inputs.clone()
            };
            let (outcome, table) = pipeline::cmd_report(&inputs, &out)?;
            for row in table {
                println!("{}", row.join("\t"));
            }
            Ok(outcome)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(outcome) => {
            if !matches!(cli.command, Command::Report { .. }) {
                println!(
                    "{}",
                    serde_json::to_string(&outcome)
                        .unwrap_or_default()
                        .trim_matches('"')
                );
            }
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(pipeline::error_exit_code(&e) as u8)
        }
    }
}
