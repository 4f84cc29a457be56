mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Solver {
        stage: &'static str,
        #[source]
        source: couette::Error,
    },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Attaches the pipeline stage to a solver error.
pub trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T> Stage<T> for couette::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Solver { stage, source })
    }
}

macro_rules! overrides {
    ($($field:ident => $flag:literal),* $(,)?) => {
        /// Flags overriding config keys of the same name.
        #[derive(Debug, Default, Args)]
        struct Overrides {
            $(
                #[arg(long = $flag, value_name = "VALUE", global = true)]
                $field: Option<String>,
            )*
            #[arg(long = "allow-unstable", global = true)]
            allow_unstable: bool,
        }

        impl Overrides {
            fn apply(&self, cfg: &mut RunConfig) -> Result<(), CliError> {
                $(
                    if let Some(v) = &self.$field {
                        cfg.set(stringify!($field), v)?;
                    }
                )*
                if self.allow_unstable {
                    cfg.allow_unstable = true;
                }
                Ok(())
            }
        }
    };
}

overrides! {
    alpha => "alpha",
    q => "q",
    m => "M",
    n_v => "n-v",
    v_max => "v-max",
    n_y => "n-y",
    b_amp => "b-amp",
    n_omega => "n-omega",
    epsilon_schedule => "epsilon-schedule",
    sigma_steps => "sigma-steps",
    tol => "tol",
    max_iter => "max-iter",
    max_outer => "max-outer",
    dt => "dt",
    t_end => "t-end",
    record_every => "record-every",
    scheme => "scheme",
    seed => "seed",
    output_dir => "output-dir",
    delta => "delta",
    cfl => "cfl",
    max_exit_fraction => "max-exit-fraction",
}

#[derive(Debug, Parser)]
#[command(name = "couette", version, about = "Discrete-velocity Boltzmann solver for plane Couette flow")]
struct Cli {
    /// Flat key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve for F_st; writes steady_meta.json, g1/gr1/gr2.bin and profile.csv.
    Steady,
    /// Relax F_st + delta·v_xv_yμ; writes decay.csv and decay_fit.json.
    Unsteady,
    /// Operator checks; writes kernel_checks.csv.
    VerifyKernel {
        /// Random samples per check.
        #[arg(long, default_value_t = 20)]
        samples: usize,
    },
    /// Backward-cycle survival and weight-ratio study; writes survival.csv and cycles.json.
    Cycles(CyclesArgs),
    /// Norms and symmetry defects of the dumps in output_dir; writes report.json.
    Report,
}

#[derive(Debug, Args)]
pub struct CyclesArgs {
    #[arg(long = "T0", default_value_t = 10.0)]
    pub t0: f64,
    #[arg(long, default_value_t = 40)]
    pub kmax: usize,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::parse_file(p)?,
        None => RunConfig::default(),
    };
    cli.overrides.apply(&mut cfg)?;
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    match cli.command {
        Command::Steady => commands::steady(&cfg),
        Command::Unsteady => commands::unsteady(&cfg),
        Command::VerifyKernel { samples } => commands::verify_kernel(&cfg, samples),
        Command::Cycles(args) => commands::cycles(&cfg, &args),
        Command::Report => commands::report(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
