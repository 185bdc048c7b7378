//! Command-line driver: simulate scenes, solve them, evaluate trajectories,
//! decompose flow and run the derivative checks.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration or parse error,
//! 3 numerical failure.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dualflow::update::Provider;

pub mod commands;
pub mod manifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "dualflow", version, about = "Dual-flow dynamic visual odometry backend")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene with ground-truth flows, masks and poses.
    Simulate(SimulateArgs),
    /// Run the update loop on a simulated scene.
    Solve(SolveArgs),
    /// Print ATE and per-axis RMSE of an estimate against ground truth.
    Eval(EvalArgs),
    /// Split an optical flow into static and dynamic parts.
    Decompose(DecomposeArgs),
    /// Compare analytic derivatives with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scene configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed from the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Directory written by `simulate`.
    pub scene: PathBuf,
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_provider)]
    pub provider: Option<Provider>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub radius: Option<usize>,
    /// Use the raw optical flow as the target (ablation baseline).
    #[arg(long)]
    pub single_flow: bool,
    /// Report ATE with rigid instead of similarity alignment.
    #[arg(long)]
    pub no_scale: bool,
}

fn parse_provider(s: &str) -> Result<Provider, String> {
    s.parse().map_err(|e: dualflow::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Estimated trajectory (TUM format).
    pub estimate: PathBuf,
    /// Ground-truth trajectory (TUM format).
    pub ground_truth: PathBuf,
    /// Rigid alignment instead of similarity.
    #[arg(long)]
    pub no_scale: bool,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// Optical flow from frame i to frame j (.flo).
    #[arg(long)]
    pub flow: PathBuf,
    /// Trajectory holding both frames (TUM format).
    #[arg(long)]
    pub traj: PathBuf,
    /// Inverse depth of frame i (PFM).
    #[arg(long)]
    pub depth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = dualflow::flow::DEFAULT_MU)]
    pub mu: f64,
    /// Trajectory entries of frames i and j.
    #[arg(long, num_args = 2, value_names = ["I", "J"], default_values_t = [0, 1])]
    pub frames: Vec<usize>,
    /// Scene configuration providing the camera; the simulator default
    /// camera for the flow's size otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Reference mask (PGM, 255 static) to report IoU against.
    #[arg(long)]
    pub gt_mask: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub instances: usize,
    /// Test hook: corrupt one analytic Jacobian.
    #[arg(long, hide = true)]
    pub break_jacobian: bool,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        CliError {
            code: EXIT_IO,
            message: format!("{}: {err}", path.display()),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<dualflow::Error> for CliError {
    fn from(e: dualflow::Error) -> Self {
        use dualflow::Error as E;
        let code = match &e {
            E::Io { .. } => EXIT_IO,
            E::SingularSystem | E::Diverged(_) | E::NonFinite(_) | E::AngleNearPi { .. } => EXIT_NUMERIC,
            _ => EXIT_CONFIG,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Runs one command, printing errors to standard error. Returns the exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Solve(a) => commands::solve(&a),
        Command::Eval(a) => commands::eval(&a, &mut std::io::stdout()),
        Command::Decompose(a) => commands::decompose(&a, &mut std::io::stdout()),
        Command::Gradcheck(a) => commands::gradcheck(&a, &mut std::io::stdout()),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
