//! `rmstgst`: design, monitor and simulate group sequential trials analysed
//! with the covariate-adjusted RMST difference.

mod commands;
mod error;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "rmstgst",
    version,
    about = "Covariate-adjusted RMST group sequential trial toolkit"
)]
pub struct Cli {
    /// Worker threads for simulation (defaults to all cores).
    #[arg(long, global = true, env = "RMSTGST_THREADS")]
    pub threads: Option<usize>,

    /// Log warnings (-v) or details (-vv) to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SidesArg {
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpendingArg {
    /// alpha * min(1, IF^3)
    Cubic,
    /// alpha * IF^rho
    Power,
    /// O'Brien-Fleming-like
    Obf,
    /// Pocock-like
    Pocock,
}

/// Spending design, from `--design` JSON and/or individual flags.
#[derive(Debug, Clone, Args)]
pub struct DesignArgs {
    /// Design configuration JSON; the flags below override its fields.
    #[arg(long)]
    pub design: Option<PathBuf>,
    /// Total type I error.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_enum)]
    pub sides: Option<SidesArg>,
    #[arg(long, value_enum)]
    pub spending: Option<SpendingArg>,
    /// Exponent of the power spending family.
    #[arg(long)]
    pub rho: Option<f64>,
}

/// Trial data input.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Subject-level CSV (id, arm, entry_time, followup_time, event, covariates...).
    #[arg(long)]
    pub data: PathBuf,
    /// JSON column map for the CSV.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Covariate columns (default: every non-core column).
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    /// Calendar time of the data lock (default: latest follow-up in the file).
    #[arg(long)]
    pub lock_time: Option<f64>,
    /// Standardize covariates within each snapshot.
    #[arg(long)]
    pub standardize: bool,
    /// RMST restriction time.
    #[arg(long)]
    pub tau: f64,
    /// Analysis calendar time(s), comma separated and increasing.
    #[arg(long, value_delimiter = ',', required = true)]
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    /// Set the treatment effect so both arms have equal RMST.
    Null,
    /// Set the treatment effect to reach the requested power.
    Power,
    /// Keep the scenario's treatment effect.
    AsIs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Boundaries at planned information fractions.
    Design {
        #[command(flatten)]
        design: DesignArgs,
        /// Planned information fractions.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        /// Total information to record in the design.
        #[arg(long)]
        i_max: Option<f64>,
        /// Write the design configuration JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the boundary schedule as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Boundaries re-spent on observed information fractions.
    Boundaries {
        #[command(flatten)]
        design: DesignArgs,
        /// Observed information fractions.
        #[arg(long, value_delimiter = ',', required = true)]
        fractions: Vec<f64>,
        /// The last fraction is the final analysis (spends remaining alpha).
        #[arg(long = "final")]
        is_final: bool,
        #[arg(long)]
        json: bool,
    },
    /// Interim or final analysis with the adjusted RMST test, updating the monitoring state.
    Analyze {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        design: DesignArgs,
        /// Monitoring state JSON (created if missing).
        #[arg(long)]
        state: PathBuf,
        /// Total information for the information fractions.
        #[arg(long, conflicts_with = "i_max_from_final")]
        i_max: Option<f64>,
        /// Use the last listed analysis' information as the total (retrospective).
        #[arg(long, requires = "is_final")]
        i_max_from_final: bool,
        /// The last listed analysis is the final one.
        #[arg(long = "final")]
        is_final: bool,
        /// Also report the Kaplan-Meier comparator.
        #[arg(long)]
        km: bool,
        /// Write stage reports as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adjusted and Kaplan-Meier RMST analyses side by side.
    KmCompare {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate a simulation scenario: null effect, power and information.
    Calibrate {
        /// Scenario JSON.
        #[arg(long)]
        scenario: PathBuf,
        #[command(flatten)]
        design: DesignArgs,
        #[arg(long, value_enum, default_value = "null")]
        target: TargetArg,
        /// Target power for `--target power`.
        #[arg(long, default_value_t = 0.8)]
        power: f64,
        #[arg(long, default_value_t = 1000)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Information re-estimation rounds for `--target power`.
        #[arg(long, default_value_t = 2)]
        rounds: usize,
        /// Calibration report JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the calibrated scenario JSON here.
        #[arg(long)]
        scenario_out: Option<PathBuf>,
    },
    /// Monte Carlo operating characteristics.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[command(flatten)]
        design: DesignArgs,
        #[arg(long, default_value_t = 2000)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Calibration report from `calibrate`.
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Replicates for the automatic information calibration.
        #[arg(long, default_value_t = 1000)]
        calibration_reps: usize,
        /// Fail instead of calibrating when no calibration is supplied.
        #[arg(long)]
        no_calibrate: bool,
        /// Methods to compare (adjusted_rmst, km_rmst, cox_hr).
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        /// Points in the emitted survival / hazard-ratio curve table.
        #[arg(long, default_value_t = 101)]
        curve_points: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "error",
        1 => "warn",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("warning: cannot configure {n} threads: {e}");
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
