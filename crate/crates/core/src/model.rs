//! Typed containers for the CMR model: observed data, the meta-covariate
//! design, prior constants and one Gibbs iterate.
//!
//! Symbol map (each symbol lives in exactly one place):
//!
//! | symbol | field |
//! |---|---|
//! | `y_i`, `n`, `p` | [`Dataset::y`] rows / shape |
//! | censoring mask, LOD | [`Dataset::censored`], [`Dataset::lod`] |
//! | `X`, `q` | [`MetaDesign::x`] |
//! | `c_1..c_q`, `q̃` | [`MetaDesign::ridge_group`] |
//! | `a_d, b_d, a_τ, b_τ, a_θ, b_θ, θ_∞, α, r` | [`Hyperparams`] |
//! | `Λ`, `Γ`, `D`, `Θ`, `τ²`, `η_i` | [`CmrState`] `lambda`, `gamma`, `d`, `theta`, `tau2`, `eta` |
//! | `ν_l`, `ω_l`, `z_h` | [`CmrState`] `nu`, `omega`, `z` |
//! | `L = diag(l_{c_1}..l_{c_q})` | [`CmrState::l_scales`] (per group) |
//! | `T = τ²Θ` | derived, never stored |

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CmrError, Result};
use crate::randcore::{sample_beta, sample_inverse_gamma, standard_normal};

/// Observations (rows = samples) after centering, with the censoring mask.
///
/// Censored entries of `y` always hold the current imputation, which lies at
/// or below the column's limit expressed on the centered scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub y: DMatrix<f64>,
    pub censored: DMatrix<bool>,
    /// Detection limits on the raw scale; `+inf` where a column has no censoring.
    pub lod: DVector<f64>,
    pub column_means: DVector<f64>,
    /// Per-column divisor applied after centering (all ones unless standardized).
    pub column_scales: DVector<f64>,
    pub standardized: bool,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    pub fn has_censoring(&self) -> bool {
        self.censored.iter().any(|c| *c)
    }

    /// Upper bound for censored entries of column `j` on the model scale.
    pub fn limit(&self, j: usize) -> f64 {
        (self.lod[j] - self.column_means[j]) / self.column_scales[j]
    }

    /// Map a model-scale value of column `j` back to the raw scale.
    pub fn to_raw(&self, j: usize, v: f64) -> f64 {
        v * self.column_scales[j] + self.column_means[j]
    }

    /// Censored coordinates in row-major order.
    pub fn censored_entries(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n() {
            for j in 0..self.p() {
                if self.censored[(i, j)] {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Fully observed data with centering only.
    pub fn complete(raw: &DMatrix<f64>) -> Result<Self> {
        let (n, p) = raw.shape();
        center_dataset(raw, &DMatrix::from_element(n, p, false), &DVector::from_element(p, f64::INFINITY))
    }
}

/// Subtract per-column means taken over uncensored entries and fill censored
/// entries with `lod/√2` (capped at the limit) on the centered scale.
pub fn center_dataset(raw: &DMatrix<f64>, censored: &DMatrix<bool>, lod: &DVector<f64>) -> Result<Dataset> {
    prepare_dataset(raw, censored, lod, false)
}

/// As [`center_dataset`], additionally dividing each column by its standard
/// deviation over uncensored entries.
pub fn standardize_dataset(raw: &DMatrix<f64>, censored: &DMatrix<bool>, lod: &DVector<f64>) -> Result<Dataset> {
    prepare_dataset(raw, censored, lod, true)
}

fn prepare_dataset(raw: &DMatrix<f64>, censored: &DMatrix<bool>, lod: &DVector<f64>, standardize: bool) -> Result<Dataset> {
    let (n, p) = raw.shape();
    if n < 2 || p < 1 {
        return Err(CmrError::DimensionMismatch(format!("need n >= 2 and p >= 1, got {n}x{p}")));
    }
    if censored.shape() != (n, p) || lod.len() != p {
        return Err(CmrError::DimensionMismatch(format!(
            "data {n}x{p}, mask {}x{}, lod length {}",
            censored.nrows(),
            censored.ncols(),
            lod.len()
        )));
    }
    let mut means = DVector::zeros(p);
    let mut scales = DVector::from_element(p, 1.0);
    for j in 0..p {
        let obs: Vec<f64> = (0..n).filter(|&i| !censored[(i, j)]).map(|i| raw[(i, j)]).collect();
        if obs.is_empty() {
            return Err(CmrError::ColumnFullyCensored(j));
        }
        if obs.len() < n && !lod[j].is_finite() {
            return Err(CmrError::Domain(format!("column {j} has censored entries but no finite LOD")));
        }
        let m = obs.iter().sum::<f64>() / obs.len() as f64;
        means[j] = m;
        if standardize {
            let var = obs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / obs.len() as f64;
            if !(var > 0.0) {
                return Err(CmrError::DegenerateColumn(j));
            }
            scales[j] = var.sqrt();
        }
    }
    let mut y = DMatrix::zeros(n, p);
    for j in 0..p {
        for i in 0..n {
            let v = if censored[(i, j)] {
                (lod[j] / std::f64::consts::SQRT_2).min(lod[j])
            } else {
                raw[(i, j)]
            };
            y[(i, j)] = (v - means[j]) / scales[j];
        }
    }
    Ok(Dataset {
        y,
        censored: censored.clone(),
        lod: lod.clone(),
        column_means: means,
        column_scales: scales,
        standardized: standardize,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Intercept,
    Indicator,
    Continuous,
}

/// Meta covariates describing the `p` variables, with ridge-group labels
/// (0-based, contiguous) for the `q` columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaDesign {
    pub x: DMatrix<f64>,
    pub column_kind: Vec<ColumnKind>,
    pub ridge_group: Vec<usize>,
}

impl MetaDesign {
    pub fn new(x: DMatrix<f64>, column_kind: Vec<ColumnKind>, ridge_group: Vec<usize>) -> Result<Self> {
        let design = Self {
            x,
            column_kind,
            ridge_group,
        };
        design.validate()?;
        Ok(design)
    }

    /// The `p × 0` design of the no-meta-covariate comparator.
    pub fn empty(p: usize) -> Self {
        Self {
            x: DMatrix::zeros(p, 0),
            column_kind: Vec::new(),
            ridge_group: Vec::new(),
        }
    }

    pub fn p(&self) -> usize {
        self.x.nrows()
    }

    pub fn q(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_groups(&self) -> usize {
        self.ridge_group.iter().max().map_or(0, |m| m + 1)
    }

    /// Number of design columns in each ridge group.
    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_groups()];
        for g in &self.ridge_group {
            sizes[*g] += 1;
        }
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.q();
        if self.column_kind.len() != q || self.ridge_group.len() != q {
            return Err(CmrError::DimensionMismatch(format!(
                "design has {q} columns but {} kinds and {} group labels",
                self.column_kind.len(),
                self.ridge_group.len()
            )));
        }
        for (k, kind) in self.column_kind.iter().enumerate() {
            if *kind == ColumnKind::Indicator && self.x.column(k).iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(CmrError::Domain(format!("indicator column {k} holds values outside {{0,1}}")));
            }
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(CmrError::Domain("design holds non-finite values".into()));
        }
        let sizes = self.group_sizes();
        if sizes.contains(&0) {
            return Err(CmrError::Domain("ridge group labels are not contiguous".into()));
        }
        Ok(())
    }

    /// Diagonal of `L`, expanded from per-group scales.
    pub fn expand_scales(&self, l_scales: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.q(), |k, _| l_scales[self.ridge_group[k]])
    }
}

/// Prior constants. Inverse-gamma priors are `IG(a/2, b/2)` in shape/rate form
/// for `d_j`, `τ²` and the ridge scales `l_i`; the CUSP slab is `IG(a_θ, b_θ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub a_d: f64,
    pub b_d: f64,
    pub a_tau: f64,
    pub b_tau: f64,
    pub a_theta: f64,
    pub b_theta: f64,
    pub theta_inf: f64,
    pub alpha: f64,
    pub r: usize,
    pub ridge_enabled: bool,
    pub a_l: f64,
    pub b_l: f64,
}

impl Hyperparams {
    /// Defaults for a `p`-variable problem.
    pub fn for_dimension(p: usize) -> Self {
        Self {
            a_d: 1.0,
            b_d: 0.1,
            a_tau: 1.0,
            b_tau: 1.0,
            a_theta: 2.0,
            b_theta: 2.0,
            theta_inf: 0.05,
            alpha: 5.0,
            r: default_rank(p),
            ridge_enabled: false,
            a_l: 1.0,
            b_l: 1.0,
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        let positive = [
            ("a_d", self.a_d),
            ("b_d", self.b_d),
            ("a_tau", self.a_tau),
            ("b_tau", self.b_tau),
            ("a_theta", self.a_theta),
            ("b_theta", self.b_theta),
            ("theta_inf", self.theta_inf),
            ("alpha", self.alpha),
            ("a_l", self.a_l),
            ("b_l", self.b_l),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CmrError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.theta_inf >= self.b_theta / (self.a_theta + 1.0) {
            return Err(CmrError::InvalidConfig(format!(
                "theta_inf {} must be below the slab mode {}",
                self.theta_inf,
                self.b_theta / (self.a_theta + 1.0)
            )));
        }
        if self.r == 0 || self.r > p {
            return Err(CmrError::InvalidConfig(format!("truncation rank {} outside 1..={p}", self.r)));
        }
        Ok(())
    }
}

/// `min(p, 5 + ⌈2 ln p⌉)`.
pub fn default_rank(p: usize) -> usize {
    let extra = (2.0 * (p.max(1) as f64).ln()).ceil() as usize;
    p.min(5 + extra).max(1)
}

/// One Gibbs iterate. CUSP labels `z` are 0-based: `z[h] <= h` selects the spike.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmrState {
    pub lambda: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub d: DVector<f64>,
    pub theta: DVector<f64>,
    pub tau2: f64,
    pub eta: DMatrix<f64>,
    pub nu: DVector<f64>,
    pub omega: DVector<f64>,
    pub z: Vec<usize>,
    pub l_scales: DVector<f64>,
}

impl CmrState {
    pub fn rank(&self) -> usize {
        self.theta.len()
    }

    /// `Σ = D + ΛΛᵀ`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mut s = &self.lambda * self.lambda.transpose();
        for j in 0..s.nrows() {
            s[(j, j)] += self.d[j];
        }
        s
    }

    /// Number of factor columns currently in the slab.
    pub fn active_factors(&self, theta_inf: f64) -> usize {
        self.theta.iter().filter(|t| **t != theta_inf).count()
    }

    pub fn check_invariants(&self, theta_inf: f64, after_cusp: bool) -> Result<()> {
        let r = self.rank();
        if self.nu.len() != r || self.omega.len() != r || self.z.len() != r || self.lambda.ncols() != r {
            return Err(CmrError::DimensionMismatch("state rank disagrees across blocks".into()));
        }
        if (self.nu[r - 1] - 1.0).abs() > 0.0 {
            return Err(CmrError::Domain("last stick fraction must equal 1".into()));
        }
        let total: f64 = self.omega.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(CmrError::Domain(format!("stick-breaking weights sum to {total}")));
        }
        let positive = self.d.iter().chain(self.theta.iter()).chain(self.l_scales.iter()).all(|v| *v > 0.0)
            && self.tau2 > 0.0;
        if !positive {
            return Err(CmrError::Domain("variance parameter is not strictly positive".into()));
        }
        if after_cusp {
            for h in 0..r {
                if (self.z[h] <= h) != (self.theta[h] == theta_inf) {
                    return Err(CmrError::Domain(format!("spike/slab label of factor {h} disagrees with theta")));
                }
            }
        }
        Ok(())
    }
}

/// `ω_l = ν_l ∏_{m<l} (1 − ν_m)`.
pub fn stick_breaking(nu: &DVector<f64>) -> DVector<f64> {
    let mut remaining = 1.0;
    DVector::from_iterator(
        nu.len(),
        nu.iter().map(|v| {
            let w = v * remaining;
            remaining *= 1.0 - v;
            w
        }),
    )
}

/// Starting point: unit variances, slab draws for `Θ`, prior draws for `ν`
/// and `Γ`, `Λ = XΓ + N(0, 0.1²)` noise, standard-normal factors.
pub fn init_state<R: Rng + ?Sized>(rng: &mut R, data: &Dataset, design: &MetaDesign, hp: &Hyperparams) -> Result<CmrState> {
    let (n, p) = (data.n(), data.p());
    if design.p() != p {
        return Err(CmrError::DimensionMismatch(format!("design has {} rows, data has {p} columns", design.p())));
    }
    hp.validate(p)?;
    let r = hp.r;
    let q = design.q();
    let theta = DVector::from_iterator(
        r,
        (0..r).map(|_| sample_inverse_gamma(rng, hp.a_theta, hp.b_theta)).collect::<Result<Vec<_>>>()?,
    );
    let mut nu = DVector::from_element(r, 1.0);
    for l in 0..r.saturating_sub(1) {
        nu[l] = sample_beta(rng, 1.0, hp.alpha)?;
    }
    let omega = stick_breaking(&nu);
    let z: Vec<usize> = (0..r).map(|h| (h + 1).min(r - 1)).collect();
    let gamma = DMatrix::from_fn(q, r, |_, h| theta[h].sqrt() * standard_normal(rng));
    let lambda = &design.x * &gamma + DMatrix::from_fn(p, r, |_, _| 0.1 * standard_normal(rng));
    let eta = DMatrix::from_fn(n, r, |_, _| standard_normal(rng));
    Ok(CmrState {
        lambda,
        gamma,
        d: DVector::from_element(p, 1.0),
        theta,
        tau2: 1.0,
        eta,
        nu,
        omega,
        z,
        l_scales: DVector::from_element(design.n_groups(), 1.0),
    })
}

/// Posterior functionals accumulated over kept draws.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainSummary {
    pub mean_precision: DMatrix<f64>,
    pub mean_cov: DMatrix<f64>,
    /// Posterior mean of the per-draw correlation matrices.
    pub mean_corr: DMatrix<f64>,
    pub corr_lo: DMatrix<f64>,
    pub corr_hi: DMatrix<f64>,
    /// Credible level of `corr_lo`/`corr_hi`.
    pub level: f64,
    pub n_kept: usize,
    /// Posterior mean of each censored entry on the raw data scale.
    pub imputed_mean: BTreeMap<(usize, usize), f64>,
    /// Active (slab) factor count after every iteration, burn-in included.
    pub active_factors_trace: Vec<usize>,
    pub mean_active_factors: f64,
}
