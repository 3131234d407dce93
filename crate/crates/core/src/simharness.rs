//! Simulation regimes, the (regime × method × p × n × replicate) loss grid
//! and the LOD hold-out experiment.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::designs::{build_categorical, build_intercept, build_matrix_variate, gen_mrc_covariate, intercept_plus_continuous, MRC_DEFAULT_SD};
use crate::error::{CmrError, Result};
use crate::estimators::{center_columns, flip_flop_mle, rmse, sample_covariance, single_impute_lod, stein_bayes_estimate, stein_loss, unvec_samples, FLIP_FLOP_MAX_ITER, FLIP_FLOP_TOL};
use crate::model::{center_dataset, standardize_dataset, Dataset, Hyperparams, MetaDesign};
use crate::randcore::{chol_strict, derive_seed, sample_mvn, RngStream};
use crate::sampler::{run_chain, ChainConfig, ModelVariant};

pub const BLOCK_WITHIN: f64 = 0.8;
pub const BLOCK_BETWEEN: f64 = 0.3;

/// Unit diagonal, `rho` elsewhere.
pub fn gen_sigma_cor(p: usize, rho: f64) -> Result<DMatrix<f64>> {
    if p == 0 {
        return Err(CmrError::Domain("p must be positive".into()));
    }
    let lower = if p > 1 { -1.0 / (p as f64 - 1.0) } else { -1.0 };
    if !(rho > lower && rho < 1.0) {
        return Err(CmrError::Domain(format!("rho = {rho} outside ({lower}, 1) for p = {p}")));
    }
    Ok(DMatrix::from_fn(p, p, |j, k| if j == k { 1.0 } else { rho }))
}

/// Three consecutive blocks in the proportions 2 : 3 : 4.
pub fn block_sizes(p: usize) -> [usize; 3] {
    let a = ((p as f64) * 2.0 / 9.0).round() as usize;
    let b = ((p as f64) * 3.0 / 9.0).round() as usize;
    [a, b, p.saturating_sub(a + b)]
}

/// 1-based block label of each variable.
pub fn block_labels(sizes: &[usize]) -> Vec<usize> {
    sizes
        .iter()
        .enumerate()
        .flat_map(|(g, s)| std::iter::repeat_n(g + 1, *s))
        .collect()
}

pub fn gen_sigma_block(p: usize, sizes: [usize; 3], within: f64, between: f64) -> Result<DMatrix<f64>> {
    if sizes.iter().sum::<usize>() != p {
        return Err(CmrError::DimensionMismatch(format!("block sizes {sizes:?} do not sum to {p}")));
    }
    let g = block_labels(&sizes);
    let sigma = DMatrix::from_fn(p, p, |j, k| {
        if j == k {
            1.0
        } else if g[j] == g[k] {
            within
        } else {
            between
        }
    });
    chol_strict(&sigma).map_err(|_| CmrError::npd("block correlation"))?;
    Ok(sigma)
}

/// `cor(p2, rho2) ⊗ cor(p1, rho1)`, variables ordered column-major.
pub fn gen_sigma_kron(p1: usize, p2: usize, rho1: f64, rho2: f64) -> Result<DMatrix<f64>> {
    Ok(gen_sigma_cor(p2, rho2)?.kronecker(&gen_sigma_cor(p1, rho1)?))
}

/// `(p1, p2)` with `p1` the largest divisor of `p` not above `√p`.
pub fn kron_factors(p: usize) -> (usize, usize) {
    let p1 = (1..=p).take_while(|d| d * d <= p).filter(|d| p.is_multiple_of(*d)).max().unwrap_or(1);
    (p1, p / p1)
}

/// `n` rows drawn i.i.d. from `N(0, sigma)`.
pub fn sample_gaussian<R: Rng + ?Sized>(rng: &mut R, sigma: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    let p = sigma.nrows();
    let chol = chol_strict(sigma)?;
    let zero = DVector::zeros(p);
    let mut y = DMatrix::zeros(n, p);
    for i in 0..n {
        y.set_row(i, &sample_mvn(rng, &zero, &chol)?.transpose());
    }
    Ok(y)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regime {
    Exchangeable { rho: f64 },
    Block { within: f64, between: f64 },
    Kronecker { rho1: f64, rho2: f64 },
}

impl Regime {
    pub fn cor() -> Self {
        Regime::Exchangeable { rho: 0.9 }
    }

    pub fn block() -> Self {
        Regime::Block {
            within: BLOCK_WITHIN,
            between: BLOCK_BETWEEN,
        }
    }

    pub fn kron() -> Self {
        Regime::Kronecker { rho1: 0.9, rho2: 0.6 }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Regime::Exchangeable { .. } => "cor",
            Regime::Block { .. } => "block",
            Regime::Kronecker { .. } => "kron",
        }
    }

    pub fn sigma(&self, p: usize) -> Result<DMatrix<f64>> {
        match *self {
            Regime::Exchangeable { rho } => gen_sigma_cor(p, rho),
            Regime::Block { within, between } => gen_sigma_block(p, block_sizes(p), within, between),
            Regime::Kronecker { rho1, rho2 } => {
                let (p1, p2) = kron_factors(p);
                gen_sigma_kron(p1, p2, rho1, rho2)
            }
        }
    }

    pub fn supports(&self, method: Method) -> bool {
        match method {
            Method::Mle | Method::MrI | Method::Cusp => true,
            Method::MrD => !matches!(self, Regime::Exchangeable { .. }),
            Method::MrC => matches!(self, Regime::Block { .. }),
            Method::Kron => matches!(self, Regime::Kronecker { .. }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "MLE")]
    Mle,
    #[serde(rename = "MR.I")]
    MrI,
    #[serde(rename = "MR.D")]
    MrD,
    #[serde(rename = "MR.C")]
    MrC,
    #[serde(rename = "CUSP")]
    Cusp,
    #[serde(rename = "Kron")]
    Kron,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Mle, Method::MrI, Method::MrD, Method::MrC, Method::Cusp, Method::Kron];

    pub fn tag(&self) -> &'static str {
        match self {
            Method::Mle => "MLE",
            Method::MrI => "MR.I",
            Method::MrD => "MR.D",
            Method::MrC => "MR.C",
            Method::Cusp => "CUSP",
            Method::Kron => "Kron",
        }
    }

    fn index(&self) -> u64 {
        Method::ALL.iter().position(|m| m == self).unwrap() as u64
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = CmrError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let valid: Vec<&str> = Method::ALL.iter().map(|m| m.tag()).collect();
                CmrError::InvalidConfig(format!("unknown method `{s}`; valid tags: {}", valid.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NRule {
    #[serde(rename = "p+1")]
    PPlusOne,
    #[serde(rename = "1.5p")]
    OneAndHalfP,
    #[serde(rename = "3p")]
    ThreeP,
    #[serde(rename = "fixed")]
    Fixed(usize),
}

impl NRule {
    pub fn apply(&self, p: usize) -> usize {
        match self {
            NRule::PPlusOne => p + 1,
            NRule::OneAndHalfP => (1.5 * p as f64).round() as usize,
            NRule::ThreeP => 3 * p,
            NRule::Fixed(n) => *n,
        }
    }
}

impl FromStr for NRule {
    type Err = CmrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p+1" => Ok(NRule::PPlusOne),
            "1.5p" => Ok(NRule::OneAndHalfP),
            "3p" => Ok(NRule::ThreeP),
            other => other
                .parse::<usize>()
                .map(NRule::Fixed)
                .map_err(|_| CmrError::InvalidConfig(format!("unknown n rule `{other}`; use p+1, 1.5p, 3p or an integer"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub regime: String,
    pub method: Method,
    pub p: usize,
    pub n: usize,
    pub replicate: usize,
    pub seed: u64,
    pub stein_loss: Option<f64>,
    pub wall_time_secs: f64,
    pub active_factors: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub master_seed: u64,
    pub regimes: Vec<Regime>,
    pub methods: Vec<Method>,
    pub p_list: Vec<usize>,
    pub n_rules: Vec<NRule>,
    pub n_replicates: usize,
    pub chain: ChainConfig,
}

impl GridSpec {
    /// 10 replicates of 4000-iteration chains with 2000 burn-in.
    pub fn desk(regimes: Vec<Regime>, methods: Vec<Method>, p_list: Vec<usize>, n_rules: Vec<NRule>) -> Self {
        Self {
            master_seed: 1,
            regimes,
            methods,
            p_list,
            n_rules,
            n_replicates: 10,
            chain: ChainConfig::default(),
        }
    }

    /// 25 replicates, p ∈ {9, 16, 50}, all three sample-size rules, 20,000
    /// iteration chains.
    pub fn paper_scale(regimes: Vec<Regime>, methods: Vec<Method>) -> Self {
        Self {
            master_seed: 1,
            regimes,
            methods,
            p_list: vec![9, 16, 50],
            n_rules: vec![NRule::PPlusOne, NRule::OneAndHalfP, NRule::ThreeP],
            n_replicates: 25,
            chain: ChainConfig::paper(),
        }
    }
}

struct Job {
    regime_idx: usize,
    regime: Regime,
    p: usize,
    n: usize,
    replicate: usize,
    seed: u64,
}

/// Seed of one replicate; methods within it share the dataset.
pub fn replicate_seed(master: u64, regime_idx: usize, p: usize, n: usize, replicate: usize) -> u64 {
    derive_seed(master, &[regime_idx as u64, p as u64, n as u64, replicate as u64])
}

/// Run every applicable (regime, p, n, replicate, method) combination.
/// Records come back sorted by regime, p, n, replicate and method.
pub fn run_grid(spec: &GridSpec) -> Vec<ExperimentRecord> {
    let mut jobs = Vec::new();
    for (ri, regime) in spec.regimes.iter().enumerate() {
        for &p in &spec.p_list {
            let mut ns: Vec<usize> = spec.n_rules.iter().map(|r| r.apply(p)).collect();
            ns.dedup();
            for n in ns {
                for rep in 0..spec.n_replicates {
                    jobs.push(Job {
                        regime_idx: ri,
                        regime: *regime,
                        p,
                        n,
                        replicate: rep,
                        seed: replicate_seed(spec.master_seed, ri, p, n, rep),
                    });
                }
            }
        }
    }
    let mut records: Vec<(usize, ExperimentRecord)> = jobs
        .par_iter()
        .flat_map_iter(|job| run_replicate(job, &spec.methods, &spec.chain).into_iter().map(move |r| (job.regime_idx, r)))
        .collect();
    records.sort_by(|(ra, a), (rb, b)| {
        (ra, a.p, a.n, a.replicate, a.method).cmp(&(rb, b.p, b.n, b.replicate, b.method))
    });
    records.into_iter().map(|(_, r)| r).collect()
}

fn run_replicate(job: &Job, methods: &[Method], chain: &ChainConfig) -> Vec<ExperimentRecord> {
    let mut rng = RngStream::new(job.seed, 0);
    let data = job.regime.sigma(job.p).and_then(|s| Ok((sample_gaussian(&mut rng, &s, job.n)?, s)));
    let mut mrc_rng = RngStream::new(job.seed, 1);
    let mrc_x = gen_mrc_covariate(&mut mrc_rng, &block_labels(&block_sizes(job.p)), MRC_DEFAULT_SD);
    methods
        .iter()
        .filter(|m| job.regime.supports(**m))
        .map(|&method| {
            let start = Instant::now();
            let outcome = data
                .as_ref()
                .map_err(Clone::clone)
                .and_then(|(y, sigma)| {
                    let x = mrc_x.as_ref().map_err(Clone::clone)?;
                    let cfg = ChainConfig {
                        seed: derive_seed(job.seed, &[method.index()]),
                        save_chain: false,
                        ..chain.clone()
                    };
                    let (est, active) = fit_method(method, &job.regime, y, x, &cfg)?;
                    Ok((stein_loss(sigma, &est)?, active))
                });
            let wall = start.elapsed().as_secs_f64();
            let (loss, active, error) = match outcome {
                Ok((l, a)) => (Some(l), a, None),
                Err(e) => (None, None, Some(e.to_string())),
            };
            ExperimentRecord {
                regime: job.regime.id().to_string(),
                method,
                p: job.p,
                n: job.n,
                replicate: job.replicate,
                seed: job.seed,
                stein_loss: loss,
                wall_time_secs: wall,
                active_factors: active,
                error,
            }
        })
        .collect()
}

/// Covariance estimate of one method on raw `n × p` data, plus the posterior
/// mean active-factor count for Bayesian methods.
pub fn fit_method(
    method: Method,
    regime: &Regime,
    y: &DMatrix<f64>,
    mrc_x: &[f64],
    chain: &ChainConfig,
) -> Result<(DMatrix<f64>, Option<f64>)> {
    let p = y.ncols();
    let bayes = |design: MetaDesign, variant: ModelVariant| -> Result<(DMatrix<f64>, Option<f64>)> {
        let data = Dataset::complete(y)?;
        let hp = Hyperparams::for_dimension(p);
        let cfg = ChainConfig {
            model_variant: variant,
            ..chain.clone()
        };
        let out = run_chain(&data, &design, &hp, &cfg)?;
        Ok((stein_bayes_estimate(&out.summary)?, Some(out.summary.mean_active_factors)))
    };
    match method {
        Method::Mle => Ok((sample_covariance(&center_columns(y)), None)),
        Method::MrI => bayes(build_intercept(p)?, ModelVariant::Cmr),
        Method::Cusp => bayes(build_intercept(p)?, ModelVariant::CuspBaseline),
        Method::MrD => {
            let design = match regime {
                Regime::Kronecker { .. } => {
                    let (p1, p2) = kron_factors(p);
                    build_matrix_variate(p1, p2)?
                }
                _ => build_categorical(&block_labels(&block_sizes(p)))?,
            };
            bayes(design, ModelVariant::Cmr)
        }
        Method::MrC => bayes(intercept_plus_continuous(mrc_x)?, ModelVariant::Cmr),
        Method::Kron => {
            let (p1, p2) = kron_factors(p);
            let samples = unvec_samples(&center_columns(y), p1, p2)?;
            let fit = flip_flop_mle(&samples, FLIP_FLOP_TOL, FLIP_FLOP_MAX_ITER)?;
            Ok((fit.covariance(), None))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub regime: String,
    pub method: Method,
    pub p: usize,
    pub n: usize,
    pub n_ok: usize,
    pub n_failed: usize,
    pub min: Option<f64>,
    pub q25: Option<f64>,
    pub median: Option<f64>,
    pub q75: Option<f64>,
    pub max: Option<f64>,
}

/// Per-cell loss quantiles, in record order.
pub fn summarize(records: &[ExperimentRecord]) -> Vec<CellSummary> {
    let mut out: Vec<CellSummary> = Vec::new();
    let mut losses: Vec<Vec<f64>> = Vec::new();
    for r in records {
        let pos = out
            .iter()
            .position(|c| c.regime == r.regime && c.method == r.method && c.p == r.p && c.n == r.n);
        let idx = pos.unwrap_or_else(|| {
            out.push(CellSummary {
                regime: r.regime.clone(),
                method: r.method,
                p: r.p,
                n: r.n,
                n_ok: 0,
                n_failed: 0,
                min: None,
                q25: None,
                median: None,
                q75: None,
                max: None,
            });
            losses.push(Vec::new());
            out.len() - 1
        });
        match r.stein_loss {
            Some(l) => losses[idx].push(l),
            None => out[idx].n_failed += 1,
        }
    }
    for (c, mut l) in out.iter_mut().zip(losses) {
        c.n_ok = l.len();
        if l.is_empty() {
            continue;
        }
        l.sort_by(|a, b| a.total_cmp(b));
        let q = |x| Some(crate::summary::quantile_sorted(&l, x));
        c.min = q(0.0);
        c.q25 = q(0.25);
        c.median = q(0.5);
        c.q75 = q(0.75);
        c.max = q(1.0);
    }
    out
}

/// Median loss of a method in one cell.
pub fn median_loss(records: &[ExperimentRecord], method: Method, p: usize, n: usize) -> Option<f64> {
    summarize(records)
        .into_iter()
        .find(|c| c.method == method && c.p == p && c.n == n)
        .and_then(|c| c.median)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LodMethod {
    /// LOD/√2 fill.
    Naive,
    /// CMR with an intercept-only design.
    CmrIntercept,
    /// CMR with the supplied meta-covariate design.
    Cmr,
}

impl LodMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            LodMethod::Naive => "naive",
            LodMethod::CmrIntercept => "cmr-intercept",
            LodMethod::Cmr => "cmr",
        }
    }
}

impl FromStr for LodMethod {
    type Err = CmrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(LodMethod::Naive),
            "cmr-intercept" => Ok(LodMethod::CmrIntercept),
            "cmr" => Ok(LodMethod::Cmr),
            other => Err(CmrError::InvalidConfig(format!(
                "unknown imputation method `{other}`; valid: cmr, cmr-intercept, naive"
            ))),
        }
    }
}

/// Held-out entries for one `n_test`.
#[derive(Clone, Debug, PartialEq)]
pub struct HoldOut {
    pub n_test: usize,
    pub mask: DMatrix<bool>,
    pub lod: DVector<f64>,
    /// `(row, column, true value)` for every masked entry, column-major.
    pub truth: Vec<(usize, usize, f64)>,
}

/// Mask the `n_test` smallest values of each column (ties broken by row
/// index) and set each LOD halfway between the largest masked value and the
/// smallest kept one.
pub fn hold_out_smallest(y: &DMatrix<f64>, n_test: usize) -> Result<HoldOut> {
    let (n, p) = y.shape();
    if n_test == 0 {
        return Err(CmrError::Domain("n_test = 0 leaves no test entries".into()));
    }
    if 2 * n_test >= n {
        return Err(CmrError::Domain(format!("n_test = {n_test} must be below n/2 = {}", n as f64 / 2.0)));
    }
    let mut mask = DMatrix::from_element(n, p, false);
    let mut lod = DVector::zeros(p);
    let mut truth = Vec::with_capacity(n_test * p);
    for j in 0..p {
        let mut rows: Vec<usize> = (0..n).collect();
        rows.sort_by(|a, b| y[(*a, j)].total_cmp(&y[(*b, j)]));
        let mut test: Vec<usize> = rows[..n_test].to_vec();
        lod[j] = 0.5 * (y[(rows[n_test - 1], j)] + y[(rows[n_test], j)]);
        test.sort_unstable();
        for i in test {
            mask[(i, j)] = true;
            truth.push((i, j, y[(i, j)]));
        }
    }
    Ok(HoldOut { n_test, mask, lod, truth })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LodRow {
    pub n_test: usize,
    pub pct_detected: f64,
    pub method: String,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LodOutcome {
    pub rows: Vec<LodRow>,
    /// Per (n_test, method): imputed value for every held-out entry, in the
    /// order of [`HoldOut::truth`].
    pub imputed: Vec<(usize, String, Vec<f64>)>,
    pub holdouts: Vec<HoldOut>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LodConfig {
    pub chain: ChainConfig,
    pub hp: Option<Hyperparams>,
    /// Scale columns to unit variance before fitting.
    pub standardize: bool,
}

pub fn percent_detected(n: usize, n_test: usize) -> f64 {
    100.0 * (n - n_test) as f64 / n as f64
}

/// Hold-out imputation experiment on fully observed raw data.
pub fn lod_experiment(
    y: &DMatrix<f64>,
    n_test_list: &[usize],
    methods: &[LodMethod],
    design: Option<&MetaDesign>,
    config: &LodConfig,
) -> Result<LodOutcome> {
    let (n, p) = y.shape();
    let mut rows = Vec::new();
    let mut imputed = Vec::new();
    let mut holdouts = Vec::new();
    for &n_test in n_test_list {
        let ho = hold_out_smallest(y, n_test)?;
        let truth: Vec<f64> = ho.truth.iter().map(|t| t.2).collect();
        for method in methods {
            let est: Vec<f64> = match method {
                LodMethod::Naive => {
                    let filled = single_impute_lod(y, &ho.mask, &ho.lod)?;
                    ho.truth.iter().map(|&(i, j, _)| filled[(i, j)]).collect()
                }
                LodMethod::CmrIntercept | LodMethod::Cmr => {
                    let design = match method {
                        LodMethod::Cmr => design
                            .cloned()
                            .ok_or_else(|| CmrError::InvalidConfig("method `cmr` needs a meta-covariate design".into()))?,
                        _ => build_intercept(p)?,
                    };
                    let data = if config.standardize {
                        standardize_dataset(y, &ho.mask, &ho.lod)?
                    } else {
                        center_dataset(y, &ho.mask, &ho.lod)?
                    };
                    let hp = config.hp.clone().unwrap_or_else(|| Hyperparams::for_dimension(p));
                    let out = run_chain(&data, &design, &hp, &config.chain)?;
                    ho.truth
                        .iter()
                        .map(|&(i, j, _)| out.summary.imputed_mean[&(i, j)])
                        .collect()
                }
            };
            rows.push(LodRow {
                n_test,
                pct_detected: percent_detected(n, n_test),
                method: method.tag().to_string(),
                rmse: rmse(&truth, &est)?,
            });
            imputed.push((n_test, method.tag().to_string(), est));
        }
        holdouts.push(ho);
    }
    Ok(LodOutcome { rows, imputed, holdouts })
}

/// Mean offset of the synthetic LOD data; keeps values positive like
/// concentrations so that LOD/√2 sits below the LOD.
pub const LOD_SYNTH_OFFSET: f64 = 4.0;

/// `n` rows from `N(offset·1, cor(p, rho))`.
pub fn gen_lod_synthetic<R: Rng + ?Sized>(rng: &mut R, p: usize, n: usize, rho: f64, offset: f64) -> Result<DMatrix<f64>> {
    let y = sample_gaussian(rng, &gen_sigma_cor(p, rho)?, n)?;
    Ok(y.add_scalar(offset))
}
