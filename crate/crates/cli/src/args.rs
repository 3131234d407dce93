use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "cmr", version, about = "Covariance meta regression: fitting, simulation, LOD imputation and correlation testing")]
pub struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "CMR_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit the CMR model to a data matrix.
    Fit(FitArgs),
    /// Run the simulation grid and score estimators by Stein's loss.
    Simulate(SimulateArgs),
    /// Hold out the smallest values per column and compare imputations.
    ImputeLod(ImputeArgs),
    /// Pairwise zero-correlation tests with Benjamini-Yekutieli control.
    Analyze(AnalyzeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 4,000 iterations, 2,000 burn-in, 10 replicates.
    Desk,
    /// 20,000 iterations, 10,000 burn-in, 25 replicates, p in {9, 16, 50}.
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CuspUpdateArg {
    Collapsed,
    Printed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Cmr,
    CuspBaseline,
}

#[derive(Args, Debug, Clone)]
pub struct ChainArgs {
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Total Gibbs iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Iterations discarded as burn-in.
    #[arg(long)]
    pub burn: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Truncation rank r (default min(p, 5 + ceil(2 ln p))).
    #[arg(long)]
    pub rank: Option<usize>,
    /// Group generalized-ridge prior on the coefficients.
    #[arg(long)]
    pub ridge: bool,
    #[arg(long, value_enum, default_value = "collapsed")]
    pub cusp_update: CuspUpdateArg,
    #[arg(long)]
    pub a_d: Option<f64>,
    #[arg(long)]
    pub b_d: Option<f64>,
    #[arg(long)]
    pub a_tau: Option<f64>,
    #[arg(long)]
    pub b_tau: Option<f64>,
    #[arg(long)]
    pub a_theta: Option<f64>,
    #[arg(long)]
    pub b_theta: Option<f64>,
    #[arg(long)]
    pub theta_inf: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Ridge scale prior `IG(a_l/2, b_l/2)`.
    #[arg(long)]
    pub a_l: Option<f64>,
    #[arg(long)]
    pub b_l: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct DesignArgs {
    /// Intercept-only meta covariate.
    #[arg(long, conflicts_with_all = ["groups", "meta_table"])]
    pub intercept: bool,
    /// CSV with one row per variable; each column is a categorical grouping.
    #[arg(long, conflicts_with = "meta_table")]
    pub groups: Option<PathBuf>,
    /// Mixed-type meta-covariate table, one row per variable.
    #[arg(long, requires = "types")]
    pub meta_table: Option<PathBuf>,
    /// Sidecar with lines `name,kind`, kind in {categorical, continuous, drop}.
    #[arg(long, requires = "meta_table")]
    pub types: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Data CSV: header row, n rows by p numeric columns.
    #[arg(long)]
    pub data: PathBuf,
    /// One header row and one row of per-column detection limits.
    #[arg(long, requires = "censored")]
    pub lod: Option<PathBuf>,
    /// 0/1 mask CSV, same shape as the data; 1 marks a value below the LOD.
    #[arg(long, requires = "lod")]
    pub censored: Option<PathBuf>,
    #[command(flatten)]
    pub design: DesignArgs,
    #[command(flatten)]
    pub chain: ChainArgs,
    #[arg(long, value_enum, default_value = "cmr")]
    pub model: ModelArg,
    /// Scale columns to unit variance before fitting.
    #[arg(long)]
    pub standardize: bool,
    /// Credible level for the correlation intervals.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Write every kept draw to chain.jsonl.
    #[arg(long)]
    pub save_chain: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Covariance regimes: cor, block, kron.
    #[arg(long, value_delimiter = ',', default_value = "cor")]
    pub regime: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub p: Vec<usize>,
    /// Sample-size rules: p+1, 1.5p, 3p or a fixed integer.
    #[arg(long = "n-rule", value_delimiter = ',')]
    pub n_rule: Vec<String>,
    /// Method tags: MLE, MR.I, MR.D, MR.C, CUSP, Kron.
    #[arg(long, value_delimiter = ',', default_value = "MLE,MR.I,CUSP")]
    pub methods: Vec<String>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub master_seed: u64,
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub burn: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ImputeArgs {
    /// Fully observed data CSV.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long = "n-test", value_delimiter = ',', required = true)]
    pub n_test: Vec<usize>,
    /// cmr, cmr-intercept, naive.
    #[arg(long, value_delimiter = ',', default_value = "cmr-intercept,naive")]
    pub methods: Vec<String>,
    #[command(flatten)]
    pub design: DesignArgs,
    #[command(flatten)]
    pub chain: ChainArgs,
    /// Fit on centred but unscaled columns.
    #[arg(long)]
    pub no_standardize: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// FDR level.
    #[arg(long, default_value_t = 0.05)]
    pub level: f64,
    #[arg(long)]
    pub out: PathBuf,
}
