//! Joint-distribution test of the Gibbs sampler.
//!
//! The marginal-conditional simulator draws `(parameters, y)` directly from
//! the prior and the sampling model. The successive-conditional simulator
//! alternates one sampler sweep with a fresh draw of `y` from its sampling
//! model. Both target the same joint distribution, so the means of any test
//! function agree when every conditional is correct.
//!
//! With censoring on, a fixed limit `c` applies to every column and the mask
//! `y < c` is recomputed after each data draw.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{stick_breaking, CmrState, Dataset, Hyperparams, MetaDesign};
use crate::randcore::{sample_beta, sample_categorical_log, sample_inverse_gamma, standard_normal, RngStream};
use crate::sampler::{sweep, CuspUpdate, SweepOptions};

#[derive(Clone, Debug)]
pub struct GewekeConfig {
    pub design: MetaDesign,
    pub hp: Hyperparams,
    pub n: usize,
    pub censor_limit: Option<f64>,
    pub cusp_update: CuspUpdate,
    pub n_marginal: usize,
    pub n_successive: usize,
    pub n_batches: usize,
    /// Pass unbounded test functions through `atan` (heavy-tailed priors).
    pub bounded: bool,
}

/// Informative hyperparameters giving the test functions finite variance.
pub fn geweke_hyperparams(r: usize, ridge: bool) -> Hyperparams {
    Hyperparams {
        a_d: 12.0,
        b_d: 12.0,
        a_tau: 12.0,
        b_tau: 12.0,
        a_theta: 6.0,
        b_theta: 5.0,
        theta_inf: 0.05,
        alpha: 2.0,
        r,
        ridge_enabled: ridge,
        a_l: 12.0,
        b_l: 12.0,
    }
}

/// `p × 2` design: intercept and a fixed continuous column, one ridge group
/// each.
pub fn geweke_design(p: usize) -> MetaDesign {
    use crate::model::ColumnKind;
    let x = DMatrix::from_fn(p, 2, |j, k| {
        if k == 0 {
            1.0
        } else {
            -1.0 + 2.0 * j as f64 / (p.max(2) - 1) as f64
        }
    });
    MetaDesign::new(x, vec![ColumnKind::Intercept, ColumnKind::Continuous], vec![0, 1]).expect("valid design")
}

#[derive(Clone, Debug, Serialize)]
pub struct GewekeStat {
    pub name: String,
    pub marginal_mean: f64,
    pub successive_mean: f64,
    pub z: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GewekeReport {
    pub stats: Vec<GewekeStat>,
}

impl GewekeReport {
    pub fn max_abs_z(&self) -> f64 {
        self.stats.iter().map(|s| s.z.abs()).fold(0.0, f64::max)
    }

    pub fn failures(&self, threshold: f64) -> Vec<&GewekeStat> {
        self.stats.iter().filter(|s| !(s.z.abs() < threshold)).collect()
    }
}

/// One draw of all parameters from the prior and of `y` given them.
pub fn prior_draw<R: Rng + ?Sized>(
    rng: &mut R,
    design: &MetaDesign,
    hp: &Hyperparams,
    n: usize,
) -> Result<(CmrState, DMatrix<f64>)> {
    let p = design.p();
    let q = design.q();
    let r = hp.r;
    let mut d = DVector::zeros(p);
    for j in 0..p {
        d[j] = sample_inverse_gamma(rng, hp.a_d / 2.0, hp.b_d / 2.0)?;
    }
    let tau2 = sample_inverse_gamma(rng, hp.a_tau / 2.0, hp.b_tau / 2.0)?;
    let mut l_scales = DVector::from_element(design.n_groups(), 1.0);
    if hp.ridge_enabled {
        for g in 0..l_scales.len() {
            l_scales[g] = sample_inverse_gamma(rng, hp.a_l / 2.0, hp.b_l / 2.0)?;
        }
    }
    let mut nu = DVector::zeros(r);
    for l in 0..r {
        nu[l] = if l + 1 == r { 1.0 } else { sample_beta(rng, 1.0, hp.alpha)? };
    }
    let omega = stick_breaking(&nu);
    let log_omega: Vec<f64> = omega.iter().map(|w| w.ln()).collect();
    let mut z = vec![0; r];
    let mut theta = DVector::zeros(r);
    for h in 0..r {
        z[h] = sample_categorical_log(rng, &log_omega)?;
        theta[h] = if z[h] <= h {
            hp.theta_inf
        } else {
            sample_inverse_gamma(rng, hp.a_theta, hp.b_theta)?
        };
    }
    let l_diag = design.expand_scales(&l_scales);
    let gamma = DMatrix::from_fn(q, r, |k, h| (theta[h] * l_diag[k]).sqrt() * standard_normal(rng));
    let mean = &design.x * &gamma;
    let lambda = DMatrix::from_fn(p, r, |j, h| mean[(j, h)] + (tau2 * theta[h] * d[j]).sqrt() * standard_normal(rng));
    let eta = DMatrix::from_fn(n, r, |_, _| standard_normal(rng));
    let state = CmrState {
        lambda,
        gamma,
        d,
        theta,
        tau2,
        eta,
        nu,
        omega,
        z,
        l_scales,
    };
    let y = draw_y(rng, &state);
    Ok((state, y))
}

fn draw_y<R: Rng + ?Sized>(rng: &mut R, state: &CmrState) -> DMatrix<f64> {
    let mut y = &state.eta * state.lambda.transpose();
    for j in 0..y.ncols() {
        let sd = state.d[j].sqrt();
        for i in 0..y.nrows() {
            y[(i, j)] += sd * standard_normal(rng);
        }
    }
    y
}

fn as_dataset(y: DMatrix<f64>, limit: Option<f64>) -> Dataset {
    let (n, p) = y.shape();
    let (censored, lod) = match limit {
        Some(c) => (y.map(|v| v < c), DVector::from_element(p, c)),
        None => (DMatrix::from_element(n, p, false), DVector::from_element(p, f64::INFINITY)),
    };
    Dataset {
        y,
        censored,
        lod,
        column_means: DVector::zeros(p),
        column_scales: DVector::from_element(p, 1.0),
        standardized: false,
    }
}

struct Battery {
    names: Vec<String>,
    values: Vec<f64>,
}

fn test_functions(s: &CmrState, y: &DMatrix<f64>, hp: &Hyperparams, bounded: bool, names: &mut Vec<String>) -> Vec<f64> {
    let f = |v: f64| if bounded { v.atan() } else { v };
    let record_names = names.is_empty();
    let mut b = Battery {
        names: std::mem::take(names),
        values: Vec::new(),
    };
    let push = |b: &mut Battery, name: String, v: f64| {
        if record_names {
            b.names.push(name);
        }
        b.values.push(v);
    };
    let (p, r) = s.lambda.shape();
    for j in 0..p {
        push(&mut b, format!("ln d[{j}]"), s.d[j].ln());
    }
    push(&mut b, "ln tau2".into(), s.tau2.ln());
    for h in 0..r {
        push(&mut b, format!("spike[{h}]"), (s.theta[h] == hp.theta_inf) as u8 as f64);
        push(&mut b, format!("ln theta[{h}]"), s.theta[h].ln());
    }
    push(&mut b, "nu[0]".into(), s.nu[0]);
    for l in 0..r {
        push(&mut b, format!("omega[{l}]"), s.omega[l]);
    }
    for g in 0..s.l_scales.len() {
        if hp.ridge_enabled {
            push(&mut b, format!("ln l[{g}]"), s.l_scales[g].ln().atan());
        }
    }
    for j in 0..p {
        for h in 0..r {
            let v = s.lambda[(j, h)];
            push(&mut b, format!("lambda[{j},{h}]"), f(v));
            push(&mut b, format!("lambda[{j},{h}]^2"), f(v * v));
        }
    }
    for k in 0..s.gamma.nrows() {
        for h in 0..r {
            let v = s.gamma[(k, h)];
            push(&mut b, format!("gamma[{k},{h}]"), f(v));
            push(&mut b, format!("gamma[{k},{h}]^2"), f(v * v));
        }
    }
    let cov = s.covariance();
    push(&mut b, "sigma[0,1]".into(), f(cov[(0, 1)]));
    push(&mut b, "sigma[0,0]".into(), f(cov[(0, 0)]));
    for h in 0..r {
        push(&mut b, format!("eta[0,{h}]"), s.eta[(0, h)]);
        push(&mut b, format!("eta[0,{h}]^2"), s.eta[(0, h)].powi(2));
    }
    push(&mut b, "eta[0,.] lambda[0,.]".into(), f((s.eta.row(0) * s.lambda.row(0).transpose())[(0, 0)]));
    for j in 0..p {
        push(&mut b, format!("y[0,{j}]"), f(y[(0, j)]));
        push(&mut b, format!("y[.,{j}]^2 mean"), f(y.column(j).norm_squared() / y.nrows() as f64));
    }
    push(&mut b, "y0 y1 mean".into(), f(y.column(0).dot(&y.column(1)) / y.nrows() as f64));
    *names = b.names;
    b.values
}

struct Moments {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    count: usize,
}

impl Moments {
    fn new(k: usize) -> Self {
        Self {
            sum: vec![0.0; k],
            sum_sq: vec![0.0; k],
            count: 0,
        }
    }

    fn push(&mut self, v: &[f64]) {
        for (i, x) in v.iter().enumerate() {
            self.sum[i] += x;
            self.sum_sq[i] += x * x;
        }
        self.count += 1;
    }

    fn mean(&self, i: usize) -> f64 {
        self.sum[i] / self.count as f64
    }

    fn var(&self, i: usize) -> f64 {
        let m = self.mean(i);
        (self.sum_sq[i] / self.count as f64 - m * m).max(0.0)
    }
}

fn names_for(cfg: &GewekeConfig) -> Result<Vec<String>> {
    let mut rng = RngStream::new(0, 0);
    let (s, y) = prior_draw(&mut rng, &cfg.design, &cfg.hp, cfg.n)?;
    let mut names = Vec::new();
    test_functions(&s, &y, &cfg.hp, cfg.bounded, &mut names);
    Ok(names)
}

fn marginal(cfg: &GewekeConfig, seed: u64, names: &[String]) -> Result<Moments> {
    let mut rng = RngStream::new(seed, 1);
    let mut m = Moments::new(names.len());
    let mut scratch = names.to_vec();
    for _ in 0..cfg.n_marginal {
        let (s, y) = prior_draw(&mut rng, &cfg.design, &cfg.hp, cfg.n)?;
        m.push(&test_functions(&s, &y, &cfg.hp, cfg.bounded, &mut scratch));
    }
    Ok(m)
}

/// Returns per-batch means.
fn successive(cfg: &GewekeConfig, seed: u64, names: &[String]) -> Result<Vec<Moments>> {
    let mut rng = RngStream::new(seed, 2);
    let (mut state, y) = prior_draw(&mut rng, &cfg.design, &cfg.hp, cfg.n)?;
    let mut data = as_dataset(y, cfg.censor_limit);
    let opts = SweepOptions {
        cusp_enabled: true,
        cusp_update: cfg.cusp_update,
    };
    let batch_len = cfg.n_successive / cfg.n_batches;
    let mut batches: Vec<Moments> = (0..cfg.n_batches).map(|_| Moments::new(names.len())).collect();
    let mut scratch = names.to_vec();
    for it in 0..batch_len * cfg.n_batches {
        sweep(&mut rng, &mut state, &mut data, &cfg.design, &cfg.hp, opts).map_err(|e| e.at_iteration(it))?;
        let y = draw_y(&mut rng, &state);
        data = as_dataset(y, cfg.censor_limit);
        batches[it / batch_len].push(&test_functions(&state, &data.y, &cfg.hp, cfg.bounded, &mut scratch));
    }
    Ok(batches)
}

/// Run both simulators (in parallel) and compare every test function.
pub fn run_geweke(cfg: &GewekeConfig, seed: u64) -> Result<GewekeReport> {
    let names = names_for(cfg)?;
    let (mc, sc) = rayon::join(|| marginal(cfg, seed, &names), || successive(cfg, seed, &names));
    let (mc, sc) = (mc?, sc?);
    let nb = sc.len() as f64;
    let stats = names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let bm: Vec<f64> = sc.iter().map(|b| b.mean(i)).collect();
            let sc_mean = bm.iter().sum::<f64>() / nb;
            let bvar = bm.iter().map(|m| (m - sc_mean).powi(2)).sum::<f64>() / (nb - 1.0);
            let se2 = mc.var(i) / mc.count as f64 + bvar / nb;
            let diff = mc.mean(i) - sc_mean;
            // Constant test functions (e.g. a column that is always a spike)
            // differ only by rounding.
            let tiny = 1e-9 * (1.0 + mc.mean(i).abs());
            let z = if diff.abs() <= tiny {
                0.0
            } else if se2 > 0.0 {
                diff / se2.sqrt()
            } else {
                f64::INFINITY
            };
            GewekeStat {
                name: name.clone(),
                marginal_mean: mc.mean(i),
                successive_mean: sc_mean,
                z,
            }
        })
        .collect();
    Ok(GewekeReport { stats })
}

/// The four configurations exercised by the acceptance gate: base, ridge,
/// censoring and the no-covariate baseline (p = 4, n = 6, q = 2, r = 2).
pub fn standard_configs(n_marginal: usize, n_successive: usize) -> Vec<(&'static str, GewekeConfig)> {
    let (p, n, r) = (4, 6, 2);
    let base = GewekeConfig {
        design: geweke_design(p),
        hp: geweke_hyperparams(r, false),
        n,
        censor_limit: None,
        cusp_update: CuspUpdate::Collapsed,
        n_marginal,
        n_successive,
        n_batches: 100,
        bounded: false,
    };
    vec![
        ("base", base.clone()),
        (
            "ridge",
            GewekeConfig {
                hp: geweke_hyperparams(r, true),
                bounded: true,
                ..base.clone()
            },
        ),
        (
            "censoring",
            GewekeConfig {
                censor_limit: Some(-0.5),
                ..base.clone()
            },
        ),
        (
            "cusp_baseline",
            GewekeConfig {
                design: MetaDesign::empty(p),
                ..base
            },
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_draw_shapes_and_invariants() {
        let design = geweke_design(4);
        let hp = geweke_hyperparams(2, true);
        let mut rng = RngStream::new(1, 0);
        for _ in 0..100 {
            let (s, y) = prior_draw(&mut rng, &design, &hp, 6).unwrap();
            assert_eq!(y.shape(), (6, 4));
            assert_eq!(s.gamma.shape(), (2, 2));
            s.check_invariants(hp.theta_inf, true).unwrap();
        }
    }

    #[test]
    fn censored_dataset_limit() {
        let y = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.5, -2.0]);
        let ds = as_dataset(y, Some(-0.5));
        assert_eq!(ds.limit(0), -0.5);
        assert!(ds.censored[(0, 0)] && ds.censored[(1, 1)] && !ds.censored[(0, 1)]);
    }

    #[test]
    fn short_base_run_is_consistent() {
        let (_, cfg) = standard_configs(20_000, 40_000).swap_remove(0);
        let report = run_geweke(&cfg, 11).unwrap();
        assert!(report.max_abs_z() < 4.5, "{:?}", report.failures(4.5));
    }
}
