//! Command-line experiments: data generation, stage-1 and stage-2 training,
//! λ sweeps, method comparison, plotting and artifact verification.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use ncmfair::fair::FairnessLoss;
use ncmfair::ncm::TrainMode;

use crate::commands::Run;
use crate::config::{DataSpec, RunConfig};
use crate::error::{CliError, CliResult};

/// Environment variable naming the output directory.
pub const OUT_DIR_ENV: &str = "NCMFAIR_OUT_DIR";

/// Output directory used when neither flag, environment nor config set one.
pub const DEFAULT_OUT_DIR: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "ncmfair", version, about = "Counterfactual generators and counterfactually fair predictors")]
pub struct Cli {
    /// TOML run configuration [default: built-in defaults]
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory [default: config `output_dir`, else "runs"]
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    pub out: Option<PathBuf>,

    /// Base seed, overriding the config
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Config override as a dotted TOML assignment, e.g. `stage1.lambda_ctf=0` (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Joint,
    Phased,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MethodArg {
    Mmd,
    #[value(name = "mean_mse", alias = "mean-mse")]
    MeanMse,
}

impl From<MethodArg> for FairnessLoss {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Mmd => FairnessLoss::Mmd,
            MethodArg::MeanMse => FairnessLoss::MeanMse,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate (or load) the dataset and write train/test splits
    GenData {
        /// Synthetic sample count [default: 5000]
        #[arg(long)]
        n: Option<usize>,
        /// Synthetic train fraction [default: 0.8]
        #[arg(long)]
        train_fraction: Option<f64>,
        /// Use the Communities and Crimes CSV at this path instead of synthetic data
        #[arg(long)]
        crimes: Option<PathBuf>,
    },
    /// Train the counterfactual generator (mechanism and abductor)
    TrainNcm {
        /// Training schedule [default: phased]
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Disable the counterfactual consistency term (sets lambda_ctf = 0)
        #[arg(long)]
        no_ctf: bool,
        /// Optimizer steps per phase [default: 1500]
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train and evaluate one predictor at a fixed fairness weight
    TrainFair {
        /// Fairness weight [default: config stage2.lambda_fair]
        #[arg(long)]
        lambda: Option<f64>,
        /// Fairness penalty [default: mmd]
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Repeat index; the run seed is base seed + repeat
        #[arg(long, default_value_t = 0)]
        repeat: usize,
        /// Optimizer steps [default: 1000]
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train predictors over a λ grid for every configured method
    Sweep {
        /// Comma-separated fairness weights [default: 0,0.1,0.5,1,2,5,10]
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        /// Repeats per λ [default: 3]
        #[arg(long)]
        repeats: Option<usize>,
        /// Worker threads [default: 1]
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Compare the two configured methods by trade-off AUC
    Compare,
    /// Plot the trade-off points and fitted lines as SVG
    Plot {
        /// Put F on the horizontal axis
        #[arg(long)]
        swap_axes: bool,
    },
    /// Check artifact hashes, embedded digests and upstream links
    Verify {
        /// Also require every stage to match the current configuration
        #[arg(long)]
        strict: bool,
    },
}

/// Loads the config, applies flag overrides and resolves the output directory.
pub fn resolve(cli: &Cli) -> CliResult<Run> {
    let crimes = match &cli.command {
        Command::GenData { crimes, .. } => crimes.as_deref(),
        _ => None,
    };
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p, crimes, &cli.sets)?,
        None => RunConfig::from_parts("", crimes, &cli.sets)?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::GenData { n, train_fraction, .. } => {
            if n.is_some() || train_fraction.is_some() {
                match &mut cfg.data {
                    DataSpec::Synthetic { n: cn, train_fraction: cf, .. } => {
                        *cn = n.unwrap_or(*cn);
                        *cf = train_fraction.unwrap_or(*cf);
                    }
                    DataSpec::Crimes { .. } => return Err(CliError::Usage("--n and --train-fraction apply to synthetic data only".into())),
                }
            }
        }
        Command::TrainNcm { mode, no_ctf, steps } => {
            if let Some(m) = mode {
                cfg.stage1.mode = match m {
                    ModeArg::Joint => TrainMode::Joint,
                    ModeArg::Phased => TrainMode::Phased,
                };
            }
            if *no_ctf {
                cfg.stage1.lambda_ctf = 0.0;
            }
            if let Some(s) = steps {
                cfg.stage1.steps = *s;
            }
        }
        Command::TrainFair { lambda, method, steps, .. } => {
            if let Some(l) = lambda {
                cfg.stage2.lambda_fair = *l;
            }
            if let Some(m) = method {
                cfg.stage2.fairness_loss = (*m).into();
            }
            if let Some(s) = steps {
                cfg.stage2.steps = *s;
            }
        }
        Command::Sweep { lambdas, repeats, workers } => {
            if let Some(l) = lambdas {
                cfg.sweep.lambdas = l.clone();
            }
            if let Some(r) = repeats {
                cfg.sweep.repeats = *r;
            }
            if let Some(w) = workers {
                cfg.sweep.workers = *w;
            }
        }
        Command::Plot { swap_axes } => {
            if *swap_axes {
                cfg.plot.swap_axes = true;
            }
        }
        Command::Compare | Command::Verify { .. } => {}
    }
    cfg.validate()?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    Ok(Run::new(cfg, out))
}

/// Runs one parsed invocation.
pub fn run(cli: &Cli) -> CliResult<()> {
    let run = resolve(cli)?;
    log::info!("config digest {}", run.cfg.digest());
    let written = match &cli.command {
        Command::GenData { .. } => commands::gen_data(&run)?,
        Command::TrainNcm { .. } => commands::train_ncm(&run)?,
        Command::TrainFair { repeat, .. } => commands::train_fair(&run, *repeat)?,
        Command::Sweep { .. } => commands::sweep_cmd(&run)?,
        Command::Compare => commands::compare_cmd(&run)?,
        Command::Plot { .. } => commands::plot_cmd(&run)?,
        Command::Verify { strict } => {
            let report = commands::verify(&run, *strict)?;
            for p in &report.problems {
                println!("FAIL {p}");
            }
            if !report.problems.is_empty() {
                return Err(CliError::Verify(format!("{} problem(s) in {} manifest(s)", report.problems.len(), report.checked.len())));
            }
            println!("ok: {} manifest(s) verified under {}", report.checked.len(), run.out.display());
            return Ok(());
        }
    };
    println!("wrote {}", written.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::parse_from(["ncmfair", "--seed", "9", "--out", "o", "train-ncm", "--mode", "joint", "--no-ctf", "--steps", "7"]);
        let run = resolve(&cli).unwrap();
        assert_eq!(run.cfg.seed, 9);
        assert_eq!(run.cfg.stage1.mode, TrainMode::Joint);
        assert_eq!(run.cfg.stage1.lambda_ctf, 0.0);
        assert_eq!(run.cfg.stage1.steps, 7);
        assert_eq!(run.out, PathBuf::from("o"));
        let plain = resolve(&Cli::parse_from(["ncmfair", "--seed", "9", "train-ncm"])).unwrap();
        assert_ne!(plain.cfg.digest(), run.cfg.digest());
    }

    #[test]
    fn sweep_and_fair_flags() {
        let cli = Cli::parse_from(["ncmfair", "sweep", "--lambdas", "0,1.5", "--repeats", "2", "--workers", "3"]);
        let run = resolve(&cli).unwrap();
        assert_eq!(run.cfg.sweep.lambdas, vec![0.0, 1.5]);
        assert_eq!((run.cfg.sweep.repeats, run.cfg.sweep.workers), (2, 3));
        let cli = Cli::parse_from(["ncmfair", "train-fair", "--lambda", "10", "--method", "mean_mse"]);
        let run = resolve(&cli).unwrap();
        assert_eq!(run.cfg.stage2.lambda_fair, 10.0);
        assert_eq!(run.cfg.stage2.fairness_loss, FairnessLoss::MeanMse);
        let bad = Cli::parse_from(["ncmfair", "train-fair", "--lambda=-1"]);
        assert_eq!(resolve(&bad).unwrap_err().exit_code(), error::exit::ARGUMENT);
    }

    #[test]
    fn set_matches_dedicated_flag() {
        let a = resolve(&Cli::parse_from(["ncmfair", "train-ncm", "--no-ctf"])).unwrap();
        let b = resolve(&Cli::parse_from(["ncmfair", "sweep", "--set", "stage1.lambda_ctf=0"])).unwrap();
        assert_eq!(a.cfg.scope_digest(config::Scope::Stage1), b.cfg.scope_digest(config::Scope::Stage1));
    }

    #[test]
    fn crimes_flag_switches_source_and_width() {
        let run = resolve(&Cli::parse_from(["ncmfair", "gen-data", "--crimes", "c.csv"])).unwrap();
        assert!(matches!(run.cfg.data, DataSpec::Crimes { .. }));
        assert_eq!(run.cfg.stage1.d_u, config::CRIMES_DEFAULT_D_U);
        assert!(resolve(&Cli::parse_from(["ncmfair", "gen-data", "--crimes", "c.csv", "--n", "5"])).is_err());
    }
}
