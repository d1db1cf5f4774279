use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use plnpca::ProposalKind;

#[derive(Debug, Parser)]
#[command(name = "plnpca", version, about = "Fit rank-constrained Poisson log-normal models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a dataset from the model and write it with the true parameters.
    Simulate(SimulateArgs),
    /// Variational EM fit.
    Vem(VemArgs),
    /// Projected SGD with importance-sampling gradients.
    Fit(FitArgs),
    /// Compare two parameter files on a dataset.
    Eval(EvalArgs),
    /// Proposal quality for every proposal kind at a fixed parameter.
    Diagnose(DiagnoseArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Simulate(_) => "simulate",
            Self::Vem(_) => "vem",
            Self::Fit(_) => "fit",
            Self::Eval(_) => "eval",
            Self::Diagnose(_) => "diagnose",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// key = value file; command-line flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Count matrix
    #[arg(long)]
    pub y: Option<PathBuf>,
    /// Covariates; an intercept column when omitted
    #[arg(long)]
    pub x: Option<PathBuf>,
    /// Offsets; zeros when omitted
    #[arg(long)]
    pub o: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub q: Option<usize>,
    /// Covariates including the intercept
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// True parameters; drawn at random when omitted
    #[arg(long)]
    pub theta: Option<PathBuf>,
    /// Mean diagonal of C Cᵀ for randomly drawn loadings
    #[arg(long)]
    pub sigma_diag: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct VemSettings {
    #[arg(long)]
    pub vem_max_iter: Option<usize>,
    #[arg(long)]
    pub vem_tol: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct VemArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub q: Option<usize>,
    /// Start from this parameter file instead of the moment heuristic
    #[arg(long)]
    pub theta_init: Option<PathBuf>,
    #[command(flatten)]
    pub vem: VemSettings,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub q: Option<usize>,
    /// vem, heuristic or file
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub theta_init: Option<PathBuf>,
    /// vem, vem-mix, snis or hessian
    #[arg(long)]
    pub proposal_kind: Option<ProposalKind>,
    #[arg(long)]
    pub n_particles: Option<usize>,
    #[arg(long)]
    pub gamma0: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Box half-width of the parameter set
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub burn_in_epochs: Option<usize>,
    /// Batch size of the burn-in phase; the full data when omitted
    #[arg(long)]
    pub burn_in_batch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Length of the main phase; overrides --epochs
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub diag_eta: Option<f64>,
    #[arg(long)]
    pub diag_particles: Option<usize>,
    /// Gradient-mapping cadence; 0 disables it
    #[arg(long)]
    pub diag_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub vem: VemSettings,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub theta_a: Option<PathBuf>,
    #[arg(long)]
    pub theta_b: Option<PathBuf>,
    #[arg(long)]
    pub theta_true: Option<PathBuf>,
    #[arg(long)]
    pub n_particles: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub theta: Option<PathBuf>,
    /// Comma-separated proposal kinds; all four when omitted
    #[arg(long)]
    pub kinds: Option<String>,
    #[arg(long)]
    pub n_particles: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Allow alpha = 1 and delta = 1 (testing only)
    #[arg(long)]
    pub relaxed: bool,
    #[command(flatten)]
    pub vem: VemSettings,
}
