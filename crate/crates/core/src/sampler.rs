//! Gibbs sampler for the CMR factor model with the CUSP prior on `Θ`, the
//! optional group generalized-ridge prior on `Γ`, and data augmentation for
//! entries censored below a detection limit.
//!
//! Model, with `T = τ²Θ`:
//!
//! ```text
//! y_i = Λ η_i + ε_i,   ε_i ~ N_p(0, D),   η_i ~ N_r(0, I_r)
//! Λ  ~ N_{p×r}(XΓ, T ⊗ D)
//! Γ  ~ N_{q×r}(0, Θ ⊗ L)            L = I_q unless the ridge prior is on
//! d_j ~ IG(a_d/2, b_d/2),   τ² ~ IG(a_τ/2, b_τ/2),   l_i ~ IG(1/2, 1/2)
//! θ_h ~ (1 − π_h) IG(a_θ, b_θ) + π_h δ_{θ∞},   π_h = Σ_{l≤h} ω_l
//! ```
//!
//! The CUSP label and slab-variance updates integrate `Γ` (and, for the
//! label, `θ_h`) out of the column `λ_h`, which then has covariance
//! `θ_h (XLXᵀ + τ²D)`. Under [`CuspUpdate::Collapsed`] the sweep runs
//! `η, y_cens, D, Λ, τ², (z, ν, ω, θ), Γ, L`: the collapsed draws of
//! `(z, θ)` are immediately followed by a fresh `Γ`, so the triple
//! `(z, θ, Γ)` is a blocked draw and the sweep leaves the joint posterior
//! invariant. [`CuspUpdate::Printed`] reproduces the literal ordering
//! `η, y_cens, D, Λ, Γ, τ², CUSP, L` with an isotropic spike density
//! `N_p(0, θ∞ I_p)`; it is kept for comparison and fails the joint
//! distribution test.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CmrError, Result};
use crate::model::{init_state, stick_breaking, ChainSummary, CmrState, Dataset, Hyperparams, MetaDesign};
use crate::randcore::{
    chol_psd, chol_strict, log_mvn_pdf, log_mvt_pdf, sample_beta, sample_categorical_log, sample_inverse_gamma,
    sample_mvn_canonical, sample_truncnorm_upper, standard_normal_vector, RngStream,
};
use crate::summary::ChainAccumulator;

/// Lower bound applied to `θ_h` wherever it is inverted.
pub const THETA_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Meta-covariate regression prior on the loadings.
    #[default]
    Cmr,
    /// No meta covariates: `Λ` centred at zero and CUSP scale `τ²D`.
    CuspBaseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CuspUpdate {
    #[default]
    Collapsed,
    Printed,
}

/// How per-draw correlations are kept for credible intervals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorrStore {
    /// Full store up to p = 64, streaming P² estimates beyond.
    #[default]
    Auto,
    Full,
    Streaming,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub save_chain: bool,
    pub cusp_enabled: bool,
    pub model_variant: ModelVariant,
    pub cusp_update: CuspUpdate,
    pub credible_level: f64,
    pub corr_store: CorrStore,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_iter: 4000,
            burn_in: 2000,
            thin: 1,
            seed: 1,
            save_chain: false,
            cusp_enabled: true,
            model_variant: ModelVariant::Cmr,
            cusp_update: CuspUpdate::Collapsed,
            credible_level: 0.95,
            corr_store: CorrStore::Auto,
        }
    }
}

impl ChainConfig {
    /// 20,000 iterations with the first 10,000 discarded.
    pub fn paper() -> Self {
        Self {
            n_iter: 20_000,
            burn_in: 10_000,
            ..Self::default()
        }
    }

    pub fn kept_draws(&self) -> usize {
        self.n_iter.saturating_sub(self.burn_in) / self.thin.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 || self.thin == 0 || self.burn_in >= self.n_iter {
            return Err(CmrError::InvalidConfig(format!(
                "need n_iter > burn_in and thin >= 1, got n_iter={} burn_in={} thin={}",
                self.n_iter, self.burn_in, self.thin
            )));
        }
        if self.kept_draws() == 0 {
            return Err(CmrError::InvalidConfig("configuration keeps no draws".into()));
        }
        if !(self.credible_level > 0.0 && self.credible_level < 1.0) {
            return Err(CmrError::InvalidConfig(format!(
                "credible level {} outside (0, 1)",
                self.credible_level
            )));
        }
        Ok(())
    }
}

/// Which optional blocks a sweep runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepOptions {
    pub cusp_enabled: bool,
    pub cusp_update: CuspUpdate,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            cusp_enabled: true,
            cusp_update: CuspUpdate::Collapsed,
        }
    }
}

fn inv_theta(theta: &DVector<f64>) -> DVector<f64> {
    theta.map(|t| 1.0 / t.max(THETA_FLOOR))
}

/// Step 1: `η_i ~ N_r(S⁻¹ΛᵀD⁻¹y_i, S⁻¹)`, `S = ΛᵀD⁻¹Λ + I_r`.
pub fn step_eta<R: Rng + ?Sized>(rng: &mut R, state: &mut CmrState, y: &DMatrix<f64>) -> Result<()> {
    let r = state.rank();
    let mut dinv_lambda = state.lambda.clone();
    for (j, mut row) in dinv_lambda.row_iter_mut().enumerate() {
        row /= state.d[j];
    }
    let mut s = state.lambda.transpose() * &dinv_lambda;
    for h in 0..r {
        s[(h, h)] += 1.0;
    }
    let chol = chol_strict(&s).map_err(|_| CmrError::npd("S_eta"))?;
    // Row i of B is (ΛᵀD⁻¹y_i)ᵀ.
    let b = y * &dinv_lambda;
    for i in 0..y.nrows() {
        let bi = b.row(i).transpose();
        let draw = sample_mvn_canonical(rng, &bi, &chol);
        state.eta.set_row(i, &draw.transpose());
    }
    Ok(())
}

/// Step 2: `d_j ~ IG((n + r + a_d)/2, S_dj/2)` with
/// `S_dj = Σ_i (y_ij − λ_jᵀη_i)² + Σ_h (λ_jh − x_jᵀγ_h)²/(τ²θ_h) + b_d`.
pub fn step_d<R: Rng + ?Sized>(
    rng: &mut R,
    state: &mut CmrState,
    y: &DMatrix<f64>,
    design: &MetaDesign,
    hp: &Hyperparams,
) -> Result<()> {
    let (n, p) = y.shape();
    let r = state.rank();
    let fitted = &state.eta * state.lambda.transpose();
    let prior_mean = &design.x * &state.gamma;
    let t_inv = inv_theta(&state.theta) / state.tau2;
    let shape = 0.5 * (n as f64 + r as f64 + hp.a_d);
    for j in 0..p {
        let data_ss: f64 = (0..n).map(|i| (y[(i, j)] - fitted[(i, j)]).powi(2)).sum();
        let prior_ss: f64 = (0..r)
            .map(|h| (state.lambda[(j, h)] - prior_mean[(j, h)]).powi(2) * t_inv[h])
            .sum();
        state.d[j] = sample_inverse_gamma(rng, shape, 0.5 * (data_ss + prior_ss + hp.b_d))?;
    }
    Ok(())
}

/// Step 3: rows `λ_j ~ N_r(S⁻¹(T⁻¹Γᵀx_j + Σ_i η_i y_ij), d_j S⁻¹)`,
/// `S = T⁻¹ + Σ_i η_iη_iᵀ`; i.e. the matrix normal with column covariance
/// `S⁻¹` and row variances `D`.
pub fn step_lambda<R: Rng + ?Sized>(
    rng: &mut R,
    state: &mut CmrState,
    y: &DMatrix<f64>,
    design: &MetaDesign,
) -> Result<()> {
    let p = y.ncols();
    let r = state.rank();
    let t_inv = inv_theta(&state.theta) / state.tau2;
    let mut s = state.eta.transpose() * &state.eta;
    for h in 0..r {
        s[(h, h)] += t_inv[h];
    }
    let chol = chol_strict(&s).map_err(|_| CmrError::npd("S_Lambda"))?;
    let prior_mean = &design.x * &state.gamma;
    // Row j of B: T⁻¹(XΓ)_j + Σ_i y_ij η_iᵀ.
    let mut b = y.transpose() * &state.eta;
    for j in 0..p {
        for h in 0..r {
            b[(j, h)] += t_inv[h] * prior_mean[(j, h)];
        }
    }
    for j in 0..p {
        let mean = chol.solve(&b.row(j).transpose());
        let z = standard_normal_vector(rng, r);
        let draw = mean + chol.solve_upper(&z) * state.d[j].sqrt();
        state.lambda.set_row(j, &draw.transpose());
    }
    Ok(())
}

/// Step 4: columns `γ_h ~ N_q(S⁻¹XᵀD⁻¹λ_h/τ², θ_h S⁻¹)`,
/// `S = XᵀD⁻¹X/τ² + L⁻¹`.
pub fn step_gamma<R: Rng + ?Sized>(rng: &mut R, state: &mut CmrState, design: &MetaDesign) -> Result<()> {
    let q = design.q();
    if q == 0 {
        return Ok(());
    }
    let r = state.rank();
    let mut xt_dinv = design.x.transpose();
    for (j, mut col) in xt_dinv.column_iter_mut().enumerate() {
        col /= state.d[j] * state.tau2;
    }
    let mut s = &xt_dinv * &design.x;
    let l_diag = design.expand_scales(&state.l_scales);
    for k in 0..q {
        s[(k, k)] += 1.0 / l_diag[k];
    }
    let chol = chol_strict(&s).map_err(|_| CmrError::npd("S_Gamma"))?;
    let b = &xt_dinv * &state.lambda;
    for h in 0..r {
        let mean = chol.solve(&b.column(h).into_owned());
        let z = standard_normal_vector(rng, q);
        let draw = mean + chol.solve_upper(&z) * state.theta[h].max(THETA_FLOOR).sqrt();
        state.gamma.set_column(h, &draw);
    }
    Ok(())
}

/// Step 5: `τ² ~ IG((pr + a_τ)/2, S_τ/2)`,
/// `S_τ = tr(D⁻¹(Λ − XΓ)Θ⁻¹(Λ − XΓ)ᵀ) + b_τ`.
pub fn step_tau2<R: Rng + ?Sized>(
    rng: &mut R,
    state: &mut CmrState,
    design: &MetaDesign,
    hp: &Hyperparams,
) -> Result<()> {
    let (p, r) = state.lambda.shape();
    let resid = &state.lambda - &design.x * &state.gamma;
    let th_inv = inv_theta(&state.theta);
    let mut ss = 0.0;
    for j in 0..p {
        for h in 0..r {
            ss += resid[(j, h)].powi(2) * th_inv[h] / state.d[j];
        }
    }
    state.tau2 = sample_inverse_gamma(rng, 0.5 * ((p * r) as f64 + hp.a_tau), 0.5 * (ss + hp.b_tau))?;
    Ok(())
}

/// `XLXᵀ + τ²D`: the covariance of a loading column per unit `θ_h` once `Γ`
/// is integrated out.
pub fn cusp_scale_matrix(state: &CmrState, design: &MetaDesign) -> DMatrix<f64> {
    let l_diag = design.expand_scales(&state.l_scales);
    let mut xl = design.x.clone();
    for (k, mut col) in xl.column_iter_mut().enumerate() {
        col *= l_diag[k];
    }
    let mut m = &xl * design.x.transpose();
    for j in 0..m.nrows() {
        m[(j, j)] += state.tau2 * state.d[j];
    }
    m
}

/// Step 6: CUSP update of `(z, ν, ω, θ)`.
pub fn step_cusp<R: Rng + ?Sized>(
    rng: &mut R,
    state: &mut CmrState,
    design: &MetaDesign,
    hp: &Hyperparams,
    update: CuspUpdate,
) -> Result<()> {
    let (p, r) = state.lambda.shape();
    let m = cusp_scale_matrix(state, design);
    let chol = chol_psd(&m, 1e-8 * m.diagonal().max()).map_err(|_| CmrError::npd("CUSP scale matrix"))?;
    let slab_chol = chol.scaled(hp.b_theta / hp.a_theta);
    let spike_chol = match update {
        CuspUpdate::Collapsed => chol.scaled(hp.theta_inf),
        CuspUpdate::Printed => crate::randcore::CholFactor::from_lower(DMatrix::identity(p, p) * hp.theta_inf.sqrt()),
    };
    let zero = DVector::zeros(p);
    let log_omega: Vec<f64> = state.omega.iter().map(|w| w.ln()).collect();
    let mut quad = vec![0.0; r];

    // (a) labels
    for h in 0..r {
        let col = state.lambda.column(h).into_owned();
        quad[h] = chol.quad_form_inv(&col);
        let spike = log_mvn_pdf(&col, &zero, &spike_chol);
        let slab = log_mvt_pdf(&col, 2.0 * hp.a_theta, &slab_chol);
        let lw: Vec<f64> = (0..r)
            .map(|l| log_omega[l] + if l <= h { spike } else { slab })
            .collect();
        state.z[h] = sample_categorical_log(rng, &lw)?;
    }

    // (b) stick fractions
    for l in 0..r {
        if l + 1 == r {
            state.nu[l] = 1.0;
            continue;
        }
        let at = state.z.iter().filter(|z| **z == l).count() as f64;
        let beyond = state.z.iter().filter(|z| **z > l).count() as f64;
        state.nu[l] = sample_beta(rng, 1.0 + at, hp.alpha + beyond)?;
    }

    // (c) weights
    state.omega = stick_breaking(&state.nu);

    // (d) variances
    for h in 0..r {
        state.theta[h] = if state.z[h] <= h {
            hp.theta_inf
        } else {
            sample_inverse_gamma(rng, hp.a_theta + 0.5 * p as f64, hp.b_theta + 0.5 * quad[h])?.max(THETA_FLOOR)
        };
    }
    Ok(())
}

/// Step 7 (ridge prior): `l_i ~ IG((a_l + ñ_i r)/2, (tr(Γ̃_i Θ⁻¹ Γ̃_iᵀ) + b_l)/2)`
/// where `Γ̃_i` holds the rows of `Γ` in group `i`.
pub fn step_ridge<R: Rng + ?Sized>(
    rng: &mut R,
    state: &mut CmrState,
    design: &MetaDesign,
    hp: &Hyperparams,
) -> Result<()> {
    let r = state.rank();
    let th_inv = inv_theta(&state.theta);
    let sizes = design.group_sizes();
    let mut traces = vec![0.0; sizes.len()];
    for (k, g) in design.ridge_group.iter().enumerate() {
        traces[*g] += (0..r).map(|h| state.gamma[(k, h)].powi(2) * th_inv[h]).sum::<f64>();
    }
    for (g, n_g) in sizes.iter().enumerate() {
        state.l_scales[g] = sample_inverse_gamma(rng, 0.5 * (hp.a_l + (n_g * r) as f64), 0.5 * (traces[g] + hp.b_l))?;
    }
    Ok(())
}

/// Censored entries: `y_ij ~ N(λ_jᵀη_i, d_j)` truncated above at the
/// column's limit on the model scale.
pub fn step_impute<R: Rng + ?Sized>(rng: &mut R, state: &CmrState, data: &mut Dataset) {
    if !data.has_censoring() {
        return;
    }
    for j in 0..data.p() {
        let limit = data.limit(j);
        let sd = state.d[j].sqrt();
        let lam = state.lambda.row(j);
        for i in 0..data.n() {
            if data.censored[(i, j)] {
                let mean = lam.dot(&state.eta.row(i));
                data.y[(i, j)] = sample_truncnorm_upper(rng, mean, sd, limit);
            }
        }
    }
}

/// One full sweep.
pub fn sweep<R: Rng + ?Sized>(
    rng: &mut R,
    state: &mut CmrState,
    data: &mut Dataset,
    design: &MetaDesign,
    hp: &Hyperparams,
    opts: SweepOptions,
) -> Result<()> {
    step_eta(rng, state, &data.y)?;
    step_impute(rng, state, data);
    step_d(rng, state, &data.y, design, hp)?;
    step_lambda(rng, state, &data.y, design)?;
    match opts.cusp_update {
        CuspUpdate::Collapsed => {
            step_tau2(rng, state, design, hp)?;
            if opts.cusp_enabled {
                step_cusp(rng, state, design, hp, opts.cusp_update)?;
            }
            step_gamma(rng, state, design)?;
        }
        CuspUpdate::Printed => {
            step_gamma(rng, state, design)?;
            step_tau2(rng, state, design, hp)?;
            if opts.cusp_enabled {
                step_cusp(rng, state, design, hp, opts.cusp_update)?;
            }
        }
    }
    if hp.ridge_enabled && design.q() > 0 {
        step_ridge(rng, state, design, hp)?;
    }
    if state.d.iter().chain(state.theta.iter()).any(|v| !v.is_finite()) || !state.tau2.is_finite() {
        return Err(CmrError::Domain("non-finite variance after sweep".into()));
    }
    Ok(())
}

/// Result of [`run_chain`].
#[derive(Clone, Debug)]
pub struct ChainOutput {
    pub summary: ChainSummary,
    pub chain: Option<Vec<CmrState>>,
    pub final_state: CmrState,
}

/// The design a variant actually uses.
pub fn effective_design(design: &MetaDesign, variant: ModelVariant) -> MetaDesign {
    match variant {
        ModelVariant::Cmr => design.clone(),
        ModelVariant::CuspBaseline => MetaDesign::empty(design.p()),
    }
}

/// Run one chain and accumulate posterior summaries over kept draws.
pub fn run_chain(data: &Dataset, design: &MetaDesign, hp: &Hyperparams, config: &ChainConfig) -> Result<ChainOutput> {
    config.validate()?;
    if design.p() != data.p() {
        return Err(CmrError::DimensionMismatch(format!(
            "design has {} rows, data has {} columns",
            design.p(),
            data.p()
        )));
    }
    let design = effective_design(design, config.model_variant);
    let mut rng = RngStream::new(config.seed, 0);
    let mut data = data.clone();
    let mut state = init_state(&mut rng, &data, &design, hp)?;
    let opts = SweepOptions {
        cusp_enabled: config.cusp_enabled,
        cusp_update: config.cusp_update,
    };
    let mut acc = ChainAccumulator::new(&data, config);
    let mut saved = config.save_chain.then(Vec::new);
    let mut trace = Vec::with_capacity(config.n_iter);
    for it in 0..config.n_iter {
        sweep(&mut rng, &mut state, &mut data, &design, hp, opts).map_err(|e| e.at_iteration(it))?;
        trace.push(state.active_factors(hp.theta_inf));
        if it >= config.burn_in && (it - config.burn_in + 1).is_multiple_of(config.thin) {
            acc.push(&state, &data).map_err(|e| e.at_iteration(it))?;
            if let Some(s) = saved.as_mut() {
                s.push(state.clone());
            }
        }
    }
    let summary = acc.finish(&data, trace);
    Ok(ChainOutput {
        summary,
        chain: saved,
        final_state: state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::designs::build_intercept;
    use crate::model::{center_dataset, ColumnKind};

    fn scalar_state(lambda: f64, d: f64, theta: f64, tau2: f64, gamma: f64) -> CmrState {
        CmrState {
            lambda: DMatrix::from_element(1, 1, lambda),
            gamma: DMatrix::from_element(1, 1, gamma),
            d: DVector::from_element(1, d),
            theta: DVector::from_element(1, theta),
            tau2,
            eta: DMatrix::zeros(1, 1),
            nu: DVector::from_element(1, 1.0),
            omega: DVector::from_element(1, 1.0),
            z: vec![0],
            l_scales: DVector::from_element(1, 1.0),
        }
    }

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
    }

    #[test]
    fn eta_scalar_posterior() {
        // p = r = 1, λ = d = 1, y = 2: S = 2, so η ~ N(1, 1/2).
        let mut state = scalar_state(1.0, 1.0, 1.0, 1.0, 0.0);
        let y = DMatrix::from_element(1, 1, 2.0);
        let mut rng = RngStream::new(1, 0);
        let draws: Vec<f64> = (0..200_000)
            .map(|_| {
                step_eta(&mut rng, &mut state, &y).unwrap();
                state.eta[(0, 0)]
            })
            .collect();
        let (m, v) = mean_var(&draws);
        assert!((m - 1.0).abs() < 0.01 && (v - 0.5).abs() < 0.01, "{m} {v}");
    }

    #[test]
    fn eta_ignores_data_when_loadings_vanish() {
        let mut state = scalar_state(0.0, 1.0, 1.0, 1.0, 0.0);
        state.eta = DMatrix::zeros(3, 1);
        let y = DMatrix::from_element(3, 1, 50.0);
        let mut rng = RngStream::new(2, 0);
        let mut draws = Vec::new();
        for _ in 0..50_000 {
            step_eta(&mut rng, &mut state, &y).unwrap();
            draws.extend(state.eta.iter().copied());
        }
        let (m, v) = mean_var(&draws);
        assert!(m.abs() < 0.01 && (v - 1.0).abs() < 0.02);
    }

    #[test]
    fn d_scalar_rate() {
        // y = (1, -1), λη = 0 so residuals are (1, -1); λ = Γᵀx: S_d = 2 + b_d.
        let design = build_intercept(1).unwrap();
        let mut state = scalar_state(0.5, 1.0, 1.0, 1.0, 0.5);
        state.eta = DMatrix::zeros(2, 1);
        let y = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let hp = Hyperparams {
            a_d: 6.0,
            b_d: 1.0,
            r: 1,
            ..Hyperparams::for_dimension(1)
        };
        // IG((n + r + a_d)/2, (2 + b_d)/2) = IG(4.5, 1.5): mean 1.5/3.5.
        let mut rng = RngStream::new(3, 0);
        let draws: Vec<f64> = (0..200_000)
            .map(|_| {
                step_d(&mut rng, &mut state, &y, &design, &hp).unwrap();
                state.d[0]
            })
            .collect();
        let (m, _) = mean_var(&draws);
        assert!((m - 1.5 / 3.5).abs() < 0.005, "{m}");
    }

    #[test]
    fn lambda_scalar_conjugacy() {
        // Prior λ ~ N(xγ, τ²θ d); data y_i = λ η_i + N(0, d).
        let design = build_intercept(1).unwrap();
        let (gamma, tau2, theta, d) = (0.7, 2.0, 0.5, 1.5);
        let mut state = scalar_state(0.0, d, theta, tau2, gamma);
        state.eta = DMatrix::from_column_slice(3, 1, &[0.5, -1.0, 2.0]);
        let y = DMatrix::from_column_slice(3, 1, &[1.0, 0.2, 2.5]);
        let prec_prior = 1.0 / (tau2 * theta);
        let s = prec_prior + 0.25 + 1.0 + 4.0;
        let mean = (prec_prior * gamma + 0.5 - 0.2 + 5.0) / s;
        let var = d / s;
        let mut rng = RngStream::new(4, 0);
        let draws: Vec<f64> = (0..200_000)
            .map(|_| {
                step_lambda(&mut rng, &mut state, &y, &design).unwrap();
                state.lambda[(0, 0)]
            })
            .collect();
        let (m, v) = mean_var(&draws);
        assert!((m - mean).abs() < 0.005 && (v - var).abs() < 0.005, "{m} {v}");
    }

    #[test]
    fn gamma_scalar_conjugacy_and_prior_case() {
        let design = build_intercept(1).unwrap();
        let (lambda, tau2, theta, d) = (1.2, 0.5, 0.8, 2.0);
        let mut state = scalar_state(lambda, d, theta, tau2, 0.0);
        let s = 1.0 / (d * tau2) + 1.0;
        let mean = lambda / (d * tau2) / s;
        let var = theta / s;
        let mut rng = RngStream::new(5, 0);
        let draws: Vec<f64> = (0..200_000)
            .map(|_| {
                step_gamma(&mut rng, &mut state, &design).unwrap();
                state.gamma[(0, 0)]
            })
            .collect();
        let (m, v) = mean_var(&draws);
        assert!((m - mean).abs() < 0.005 && (v - var).abs() < 0.005);

        // X = 0: prior N(0, θ l).
        let zero = MetaDesign::new(DMatrix::zeros(1, 1), vec![ColumnKind::Continuous], vec![0]).unwrap();
        state.l_scales[0] = 3.0;
        let draws: Vec<f64> = (0..200_000)
            .map(|_| {
                step_gamma(&mut rng, &mut state, &zero).unwrap();
                state.gamma[(0, 0)]
            })
            .collect();
        let (m, v) = mean_var(&draws);
        assert!(m.abs() < 0.01 && (v - theta * 3.0).abs() < 0.03);
    }

    #[test]
    fn tau2_scalar_rate() {
        // S_τ = (λ − xγ)²/(dθ) + b_τ = 0.25 + 1; shape (1 + a_τ)/2 = 3.
        let design = build_intercept(1).unwrap();
        let mut state = scalar_state(1.0, 2.0, 0.5, 1.0, 0.5);
        let hp = Hyperparams {
            a_tau: 5.0,
            b_tau: 1.0,
            r: 1,
            ..Hyperparams::for_dimension(1)
        };
        let mut rng = RngStream::new(6, 0);
        let draws: Vec<f64> = (0..200_000)
            .map(|_| {
                step_tau2(&mut rng, &mut state, &design, &hp).unwrap();
                state.tau2
            })
            .collect();
        let (m, _) = mean_var(&draws);
        assert!((m - 0.5 * 1.25 / 2.0).abs() < 0.003, "{m}");
    }

    #[test]
    fn ridge_zero_coefficients() {
        let design = build_intercept(1).unwrap();
        let hp = Hyperparams::for_dimension(1);
        let mut state = scalar_state(0.0, 1.0, 1.0, 1.0, 0.0);
        let mut rng = RngStream::new(7, 0);
        // IG(1, 1/2): its reciprocal is Gamma(1, 1/2), mean 2.
        let draws: Vec<f64> = (0..200_000)
            .map(|_| {
                step_ridge(&mut rng, &mut state, &design, &hp).unwrap();
                1.0 / state.l_scales[0]
            })
            .collect();
        let (m, _) = mean_var(&draws);
        assert!((m - 2.0).abs() < 0.02);
        // γ = 2, θ = 4: tr = 1, IG(1, 1): reciprocal mean 1.
        state.gamma[(0, 0)] = 2.0;
        state.theta[0] = 4.0;
        let draws: Vec<f64> = (0..200_000)
            .map(|_| {
                step_ridge(&mut rng, &mut state, &design, &hp).unwrap();
                1.0 / state.l_scales[0]
            })
            .collect();
        let (m, _) = mean_var(&draws);
        assert!((m - 1.0).abs() < 0.01);
    }

    fn cusp_fixture(r: usize) -> (CmrState, MetaDesign, Hyperparams) {
        let p = 3;
        let design = build_intercept(p).unwrap();
        let hp = Hyperparams {
            r,
            ..Hyperparams::for_dimension(p)
        };
        let nu = DVector::from_fn(r, |l, _| if l + 1 == r { 1.0 } else { 0.5 });
        let state = CmrState {
            lambda: DMatrix::from_fn(p, r, |j, h| 0.3 * (j as f64 + 1.0) / (h as f64 + 1.0)),
            gamma: DMatrix::zeros(1, r),
            d: DVector::from_element(p, 1.0),
            theta: DVector::from_element(r, 1.0),
            tau2: 1.0,
            eta: DMatrix::zeros(2, r),
            omega: stick_breaking(&nu),
            nu,
            z: vec![0; r],
            l_scales: DVector::from_element(1, 1.0),
        };
        (state, design, hp)
    }

    #[test]
    fn cusp_keeps_state_invariants() {
        let (mut state, design, hp) = cusp_fixture(3);
        let mut rng = RngStream::new(8, 0);
        for update in [CuspUpdate::Collapsed, CuspUpdate::Printed] {
            for _ in 0..200 {
                step_cusp(&mut rng, &mut state, &design, &hp, update).unwrap();
                state.check_invariants(hp.theta_inf, true).unwrap();
            }
        }
    }

    #[test]
    fn cusp_label_probabilities_match_direct_evaluation() {
        // r = 2, h = 0: pr(z = 0) ∝ ω_0 N(λ; 0, θ∞ M), pr(z = 1) ∝ ω_1 t(λ; ...).
        let (mut state, design, hp) = cusp_fixture(2);
        let m = cusp_scale_matrix(&state, &design);
        let chol = chol_strict(&m).unwrap();
        let col = state.lambda.column(0).into_owned();
        let spike = log_mvn_pdf(&col, &DVector::zeros(3), &chol.scaled(hp.theta_inf));
        let slab = log_mvt_pdf(&col, 2.0 * hp.a_theta, &chol.scaled(hp.b_theta / hp.a_theta));
        let w0 = state.omega[0] * spike.exp();
        let w1 = state.omega[1] * slab.exp();
        let p_spike = w0 / (w0 + w1);
        let mut rng = RngStream::new(9, 0);
        let nu0 = state.nu.clone();
        let lam0 = state.lambda.clone();
        let n = 100_000;
        let mut hits = 0;
        for _ in 0..n {
            state.nu = nu0.clone();
            state.omega = stick_breaking(&nu0);
            state.lambda = lam0.clone();
            step_cusp(&mut rng, &mut state, &design, &hp, CuspUpdate::Collapsed).unwrap();
            hits += (state.z[0] == 0) as usize;
        }
        let freq = hits as f64 / n as f64;
        let sd = (p_spike * (1.0 - p_spike) / n as f64).sqrt();
        assert!((freq - p_spike).abs() < 5.0 * sd, "{freq} vs {p_spike}");
    }

    #[test]
    fn cusp_full_truncation_forces_spike() {
        // The last label can only be ≤ h for every h when r = 1.
        let (mut state, design, hp) = cusp_fixture(1);
        let mut rng = RngStream::new(10, 0);
        step_cusp(&mut rng, &mut state, &design, &hp, CuspUpdate::Collapsed).unwrap();
        assert_eq!(state.theta[0], hp.theta_inf);
    }

    #[test]
    fn impute_half_normal_and_inactive_limit() {
        let raw = DMatrix::from_column_slice(3, 1, &[0.0, 0.0, -5.0]);
        let mask = DMatrix::from_column_slice(3, 1, &[false, false, true]);
        let lod = DVector::from_element(1, 0.0);
        let mut ds = center_dataset(&raw, &mask, &lod).unwrap();
        let mut state = scalar_state(1.0, 4.0, 1.0, 1.0, 0.0);
        state.eta = DMatrix::zeros(3, 1);
        let mut rng = RngStream::new(11, 0);
        // Mean λη = 0 sits on the limit: half-normal with sd 2.
        let draws: Vec<f64> = (0..200_000)
            .map(|_| {
                step_impute(&mut rng, &state, &mut ds);
                ds.y[(2, 0)]
            })
            .collect();
        let (m, _) = mean_var(&draws);
        assert!((m + (2.0 * 4.0 / std::f64::consts::PI).sqrt()).abs() < 0.01);
        assert!(draws.iter().all(|v| *v <= 0.0));
        assert_eq!(ds.y[(0, 0)], 0.0);
        // Mean far below the limit: effectively unconstrained.
        state.eta[(2, 0)] = -40.0;
        let draws: Vec<f64> = (0..100_000)
            .map(|_| {
                step_impute(&mut rng, &state, &mut ds);
                ds.y[(2, 0)]
            })
            .collect();
        let (m, v) = mean_var(&draws);
        assert!((m + 40.0).abs() < 0.02 && (v - 4.0).abs() < 0.1);
    }

    fn toy_data(seed: u64, n: usize, p: usize) -> Dataset {
        let mut rng = RngStream::new(seed, 0);
        let common = standard_normal_vector(&mut rng, n);
        let raw = DMatrix::from_fn(n, p, |i, _| common[i] + 0.5 * crate::randcore::standard_normal(&mut rng));
        Dataset::complete(&raw).unwrap()
    }

    #[test]
    fn chain_bookkeeping_and_determinism() {
        let data = toy_data(1, 10, 4);
        let design = build_intercept(4).unwrap();
        let hp = Hyperparams::for_dimension(4);
        let cfg = ChainConfig {
            n_iter: 2,
            burn_in: 1,
            thin: 1,
            ..ChainConfig::default()
        };
        let out = run_chain(&data, &design, &hp, &cfg).unwrap();
        assert_eq!(out.summary.n_kept, 1);
        assert_eq!(out.summary.active_factors_trace.len(), 2);
        let cfg = ChainConfig {
            n_iter: 300,
            burn_in: 100,
            thin: 3,
            seed: 9,
            save_chain: true,
            ..ChainConfig::default()
        };
        let a = run_chain(&data, &design, &hp, &cfg).unwrap();
        let b = run_chain(&data, &design, &hp, &cfg).unwrap();
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.summary.n_kept, 66);
        assert_eq!(a.chain.as_ref().unwrap().len(), 66);
        let s = &a.summary;
        assert!((&s.mean_precision - s.mean_precision.transpose()).abs().max() < 1e-12);
        for j in 0..4 {
            assert_eq!(s.corr_lo[(j, j)], 1.0);
            assert_eq!(s.corr_hi[(j, j)], 1.0);
        }
        assert!(s.corr_lo.iter().zip(s.corr_hi.iter()).all(|(l, h)| l <= h));
    }

    #[test]
    fn every_sweep_preserves_state_invariants() {
        let data = toy_data(2, 8, 5);
        let design = build_intercept(5).unwrap();
        let hp = Hyperparams {
            ridge_enabled: true,
            ..Hyperparams::for_dimension(5)
        };
        let mut rng = RngStream::new(3, 0);
        let mut data = data;
        let mut state = init_state(&mut rng, &data, &design, &hp).unwrap();
        for _ in 0..300 {
            sweep(&mut rng, &mut state, &mut data, &design, &hp, SweepOptions::default()).unwrap();
            state.check_invariants(hp.theta_inf, true).unwrap();
        }
    }

    #[test]
    fn baseline_variant_drops_design() {
        let data = toy_data(3, 12, 4);
        let design = build_intercept(4).unwrap();
        let hp = Hyperparams::for_dimension(4);
        let cfg = ChainConfig {
            n_iter: 50,
            burn_in: 10,
            model_variant: ModelVariant::CuspBaseline,
            save_chain: true,
            ..ChainConfig::default()
        };
        let out = run_chain(&data, &design, &hp, &cfg).unwrap();
        assert_eq!(out.final_state.gamma.nrows(), 0);
        assert_eq!(out.final_state.l_scales.len(), 0);
    }

    #[test]
    fn config_validation() {
        let bad = ChainConfig {
            n_iter: 10,
            burn_in: 10,
            ..ChainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(ChainConfig::paper().kept_draws(), 10_000);
    }

    #[test]
    fn exchangeable_data_gives_high_posterior_correlation() {
        use crate::simharness::{gen_sigma_cor, sample_gaussian};
        let sigma = gen_sigma_cor(9, 0.9).unwrap();
        let mut rng = RngStream::new(12, 0);
        let raw = sample_gaussian(&mut rng, &sigma, 28).unwrap();
        let data = Dataset::complete(&raw).unwrap();
        let design = build_intercept(9).unwrap();
        let hp = Hyperparams::for_dimension(9);
        let cfg = ChainConfig {
            n_iter: 3000,
            burn_in: 1000,
            seed: 4,
            ..ChainConfig::default()
        };
        let out = run_chain(&data, &design, &hp, &cfg).unwrap();
        for j in 0..9 {
            for k in 0..9 {
                if j != k {
                    assert!(out.summary.mean_corr[(j, k)] > 0.5, "{}", out.summary.mean_corr[(j, k)]);
                }
            }
        }
    }

    #[test]
    fn fewer_active_factors_with_smaller_alpha() {
        use crate::simharness::{gen_sigma_cor, sample_gaussian};
        let sigma = gen_sigma_cor(8, 0.5).unwrap();
        let mut rng = RngStream::new(13, 0);
        let raw = sample_gaussian(&mut rng, &sigma, 30).unwrap();
        let data = Dataset::complete(&raw).unwrap();
        let design = build_intercept(8).unwrap();
        let cfg = ChainConfig {
            n_iter: 3000,
            burn_in: 1000,
            seed: 5,
            ..ChainConfig::default()
        };
        let mean_active = |alpha: f64| {
            let hp = Hyperparams {
                alpha,
                ..Hyperparams::for_dimension(8)
            };
            run_chain(&data, &design, &hp, &cfg).unwrap().summary.mean_active_factors
        };
        let (lo, hi) = (mean_active(0.5), mean_active(20.0));
        assert!(lo <= hi, "alpha 0.5 -> {lo}, alpha 20 -> {hi}");
    }
}
