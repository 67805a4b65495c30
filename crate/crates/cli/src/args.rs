use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use maskforest::PolicySpec;

#[derive(Debug, Parser)]
#[command(name = "maskforest", version, about = "Masked-action split allocation for feature-subsampled CART forests")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Master seed; every random draw derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: available parallelism). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output file (default: standard output).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// TOML or JSON file of flag values; explicit flags take precedence.
    /// For `forest heatmap` the file holds the experiment grid.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Opportunity rate, exposure law, drift constant and the eta_req check.
    Env(EnvArgs),
    /// Simulate branches and print every split.
    Simulate(SimulateArgs),
    /// Bucketed one-step drift of the imbalance and the contraction estimate.
    Drift(DriftArgs),
    /// Exponential moments E exp(eta W_n) along informative time.
    Expmoment(ExpMomentArgs),
    /// Long-run split frequencies against the first-order allocation.
    Allocation(AllocationArgs),
    /// Poisson-kernel functionals and their exact counterparts.
    Poisson {
        #[command(subcommand)]
        command: PoissonCommand,
    },
    /// Risk functionals next to the closed-form bound terms.
    Risk(RiskArgs),
    /// Exact terminal laws, objectives and Bellman certificates.
    Bellman {
        #[command(subcommand)]
        command: BellmanCommand,
    },
    /// Empirical honest-forest experiments.
    Forest {
        #[command(subcommand)]
        command: ForestCommand,
    },
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 6)]
    pub d: usize,
    #[arg(long, default_value_t = 2)]
    pub s: usize,
    /// Candidate-set size; overrides --gamma.
    #[arg(long)]
    pub m: Option<usize>,
    /// Subsampling ratio, m = ceil(gamma d).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Informative coefficients (default: all ones).
    #[arg(long, value_delimiter = ',')]
    pub beta: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.0)]
    pub sigma0_sq: f64,
}

#[derive(Debug, Clone, Args)]
pub struct PolicyArg {
    /// greedy | exploratory | mix:<alpha> | window:<w>
    #[arg(long, default_value = "greedy")]
    pub policy: PolicySpec,
}

#[derive(Debug, Args)]
pub struct EnvArgs {
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub policy: PolicyArg,
    #[arg(long, default_value_t = 10)]
    pub depth: usize,
    #[arg(long, default_value_t = 1)]
    pub branches: usize,
}

#[derive(Debug, Args)]
pub struct DriftArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub policy: PolicyArg,
    /// Informative steps per replicate.
    #[arg(long, default_value_t = 100)]
    pub horizon: usize,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    #[arg(long, default_value_t = maskforest::dynamics::DEFAULT_MIN_BUCKET)]
    pub min_bucket: usize,
}

#[derive(Debug, Args)]
pub struct ExpMomentArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub policy: PolicyArg,
    #[arg(long, default_value_t = 0.5)]
    pub eta: f64,
    #[arg(long, value_delimiter = ',', default_value = "0,250,500,1000,2000")]
    pub n_grid: Vec<usize>,
    #[arg(long, default_value_t = 10_000)]
    pub reps: usize,
}

#[derive(Debug, Args)]
pub struct AllocationArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub policy: PolicyArg,
    /// Depth of each branch.
    #[arg(long, default_value_t = 100_000)]
    pub t: usize,
    #[arg(long, default_value_t = 1)]
    pub branches: usize,
}

#[derive(Debug, Subcommand)]
pub enum PoissonCommand {
    /// Kernel density P_rho(theta) / 2 pi.
    Kernel {
        #[arg(long)]
        rho: f64,
        #[arg(long)]
        theta: f64,
    },
    /// Fourier coefficients rho^|k| by quadrature, k = 0..=k_max.
    Fourier {
        #[arg(long)]
        rho: f64,
        #[arg(long, default_value_t = 10)]
        k_max: u32,
    },
    /// F_{l,r}(alpha).
    F {
        #[arg(long)]
        l: u32,
        #[arg(long)]
        r: f64,
        #[arg(long)]
        alpha: f64,
    },
    /// L_{l,d,r}(p).
    L {
        #[arg(long)]
        l: u32,
        #[arg(long)]
        r: f64,
        #[arg(long, value_delimiter = ',', required = true)]
        p: Vec<f64>,
        #[arg(long, default_value_t = 1_000_000)]
        mc_samples: usize,
    },
    /// E[r^max(N, N')] for i.i.d. Binomial(l, p) by enumeration and closed form.
    Max {
        #[arg(long)]
        l: u32,
        #[arg(long)]
        p: f64,
        #[arg(long)]
        r: f64,
    },
    /// E[r^sum min(N_j, N'_j)] for i.i.d. Multinomial(l, p), with r^l L and E[r^{|N-N'|_1/2}].
    Min {
        #[arg(long)]
        l: u32,
        #[arg(long, value_delimiter = ',', required = true)]
        p: Vec<f64>,
        #[arg(long)]
        r: f64,
    },
}

#[derive(Debug, Args)]
pub struct RiskArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "greedy,exploratory")]
    pub policies: Vec<PolicySpec>,
    #[arg(long, value_delimiter = ',', default_value = "2,4,6,8")]
    pub l_grid: Vec<usize>,
    /// Tree pairs per depth.
    #[arg(long, default_value_t = 10_000)]
    pub reps: usize,
    /// Trees per forest.
    #[arg(long, default_value_t = 100)]
    pub b: u32,
    #[arg(long, default_value_t = 500.0)]
    pub n0: f64,
    /// Print equilibrium-replacement ratios instead.
    #[arg(long)]
    pub replacement: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Auto,
    Reduced,
    Full,
}

#[derive(Debug, Clone, Args)]
pub struct BellmanArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub policy: PolicyArg,
    #[arg(long, default_value_t = 2)]
    pub l: usize,
    /// Trees per forest.
    #[arg(long = "B", alias = "b", default_value_t = 15)]
    pub b: u32,
    /// Sample size in the noise term (needed when sigma0_sq > 0).
    #[arg(long)]
    pub n0: Option<f64>,
    #[arg(long, value_enum, default_value_t = ModeArg::Auto)]
    pub mode: ModeArg,
}

#[derive(Debug, Subcommand)]
pub enum BellmanCommand {
    /// Exact terminal law of the policy.
    Law(BellmanArgs),
    /// J at the policy's terminal law.
    Objective(BellmanArgs),
    /// Reachable decisions that lose against the policy's own marginal cost.
    Certify(BellmanArgs),
    /// The greedy counterexample on (6, 2, 4) at depth 2.
    Counterexample {
        #[arg(long = "B", alias = "b", default_value_t = 15)]
        b: u32,
        /// Perturbation size as a rational p/q or decimal.
        #[arg(long, default_value = "1/100")]
        epsilon: String,
    },
    /// Exhaustive search over deterministic Markov policies.
    Search(BellmanArgs),
}

#[derive(Debug, Subcommand)]
pub enum ForestCommand {
    /// Mean test MSE over a (gamma, w) grid.
    Heatmap {
        /// Override the replicate count of the grid.
        #[arg(long)]
        reps: Option<usize>,
    },
}
