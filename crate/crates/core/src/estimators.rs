//! Point estimators and losses: Stein's loss and its Bayes estimator, the
//! sample covariance, the separable (flip-flop) MLE, LOD/√2 fill and RMSE.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CmrError, Result};
use crate::model::ChainSummary;
use crate::randcore::{chol_strict, spd_inverse, symmetrize};

/// `tr(Σ⁻¹Σ̂) − log|Σ⁻¹Σ̂| − p`.
pub fn stein_loss(sigma: &DMatrix<f64>, sigma_hat: &DMatrix<f64>) -> Result<f64> {
    if sigma.shape() != sigma_hat.shape() || !sigma.is_square() {
        return Err(CmrError::DimensionMismatch(format!(
            "stein loss: {:?} vs {:?}",
            sigma.shape(),
            sigma_hat.shape()
        )));
    }
    let p = sigma.nrows();
    let cs = chol_strict(sigma).map_err(|_| CmrError::npd("sigma"))?;
    let ch = chol_strict(sigma_hat).map_err(|_| CmrError::npd("sigma_hat"))?;
    // tr(Σ⁻¹Σ̂) = ‖L_s⁻¹ L_h‖²_F
    let m = cs
        .lower()
        .solve_lower_triangular(ch.lower())
        .expect("Cholesky factor has a positive diagonal");
    let tr = m.norm_squared();
    Ok((tr - (ch.log_det() - cs.log_det()) - p as f64).max(0.0))
}

/// `E[Σ⁻¹ | y]⁻¹` from the chain's mean precision.
pub fn stein_bayes_estimate(summary: &ChainSummary) -> Result<DMatrix<f64>> {
    if summary.n_kept == 0 {
        return Err(CmrError::InvalidConfig("summary holds no draws".into()));
    }
    Ok(symmetrize(&spd_inverse(&summary.mean_precision).map_err(|_| CmrError::npd("mean precision"))?))
}

/// `YᵀY / n` for column-centred `Y`.
pub fn sample_covariance(y: &DMatrix<f64>) -> DMatrix<f64> {
    let n = y.nrows().max(1) as f64;
    symmetrize(&(y.transpose() * y)) / n
}

/// Subtract column means.
pub fn center_columns(y: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = y.clone();
    for mut col in out.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    out
}

/// Separable fit `Cov(vec Y) = col_cov ⊗ row_cov`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparableFit {
    pub row_cov: DMatrix<f64>,
    pub col_cov: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood at the start and after each iteration.
    pub loglik_trace: Vec<f64>,
}

impl SeparableFit {
    pub fn covariance(&self) -> DMatrix<f64> {
        self.col_cov.kronecker(&self.row_cov)
    }
}

/// Split each row of an `n × (p1 p2)` matrix into a `p1 × p2` sample,
/// variables stacked column-major.
pub fn unvec_samples(y: &DMatrix<f64>, p1: usize, p2: usize) -> Result<Vec<DMatrix<f64>>> {
    if y.ncols() != p1 * p2 {
        return Err(CmrError::DimensionMismatch(format!(
            "{} columns cannot be arranged as {p1} x {p2}",
            y.ncols()
        )));
    }
    Ok((0..y.nrows())
        .map(|i| DMatrix::from_fn(p1, p2, |a, b| y[(i, a + p1 * b)]))
        .collect())
}

/// Mean-zero matrix-normal log-likelihood of `samples` under `C ⊗ R`.
pub fn kron_loglik(samples: &[DMatrix<f64>], row_cov: &DMatrix<f64>, col_cov: &DMatrix<f64>) -> Result<f64> {
    let (p1, p2) = (row_cov.nrows(), col_cov.nrows());
    let n = samples.len() as f64;
    let cr = chol_strict(row_cov)?;
    let cc = chol_strict(col_cov)?;
    let mut quad = 0.0;
    for y in samples {
        // tr(C⁻¹ Yᵀ R⁻¹ Y) = ‖L_R⁻¹ Y L_C⁻ᵀ‖²_F
        let a = cr.lower().solve_lower_triangular(y).expect("positive diagonal");
        let b = cc
            .lower()
            .solve_lower_triangular(&a.transpose())
            .expect("positive diagonal");
        quad += b.norm_squared();
    }
    let p = (p1 * p2) as f64;
    Ok(-0.5 * n * p * (2.0 * std::f64::consts::PI).ln()
        - 0.5 * n * p1 as f64 * cc.log_det()
        - 0.5 * n * p2 as f64 * cr.log_det()
        - 0.5 * quad)
}

pub const FLIP_FLOP_TOL: f64 = 1e-8;
pub const FLIP_FLOP_MAX_ITER: usize = 500;

/// Alternating maximization of the separable normal likelihood, started at
/// `C = I`. Stops when the relative Frobenius change of `C ⊗ R` drops below
/// `tol`; the result is scaled so that `row_cov[(0, 0)] = 1`.
pub fn flip_flop_mle(samples: &[DMatrix<f64>], tol: f64, max_iter: usize) -> Result<SeparableFit> {
    let n = samples.len();
    let Some(first) = samples.first() else {
        return Err(CmrError::Singular("no samples".into()));
    };
    let (p1, p2) = first.shape();
    if samples.iter().any(|s| s.shape() != (p1, p2)) {
        return Err(CmrError::DimensionMismatch("samples differ in shape".into()));
    }
    if n * p2 <= p1 || n * p1 <= p2 {
        return Err(CmrError::Singular(format!("n = {n} too small for a {p1} x {p2} separable fit")));
    }
    let mut r = DMatrix::identity(p1, p1);
    let mut c = DMatrix::identity(p2, p2);
    let mut trace = vec![kron_loglik(samples, &r, &c)?];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let c_inv = spd_inverse(&c).map_err(|_| CmrError::Singular("column covariance".into()))?;
        let mut r_new = DMatrix::zeros(p1, p1);
        for y in samples {
            r_new += y * &c_inv * y.transpose();
        }
        r_new = symmetrize(&r_new) / (n * p2) as f64;
        let r_inv = spd_inverse(&r_new).map_err(|_| CmrError::Singular("row covariance".into()))?;
        let mut c_new = DMatrix::zeros(p2, p2);
        for y in samples {
            c_new += y.transpose() * &r_inv * y;
        }
        c_new = symmetrize(&c_new) / (n * p1) as f64;

        let change = kron_relative_change(&c, &r, &c_new, &r_new);
        r = r_new;
        c = c_new;
        trace.push(kron_loglik(samples, &r, &c).map_err(|_| CmrError::Singular("iterate lost definiteness".into()))?);
        if change < tol {
            converged = true;
            break;
        }
    }
    let s = r[(0, 0)];
    Ok(SeparableFit {
        row_cov: r / s,
        col_cov: c * s,
        iterations,
        converged,
        loglik_trace: trace,
    })
}

/// `‖C⊗R − C'⊗R'‖_F / ‖C'⊗R'‖_F` without forming either product.
fn kron_relative_change(c: &DMatrix<f64>, r: &DMatrix<f64>, c_new: &DMatrix<f64>, r_new: &DMatrix<f64>) -> f64 {
    let old = c.norm_squared() * r.norm_squared();
    let new = c_new.norm_squared() * r_new.norm_squared();
    let cross = c.dot(c_new) * r.dot(r_new);
    (old + new - 2.0 * cross).max(0.0).sqrt() / new.sqrt()
}

/// Replace masked entries by `lod_j / √2`.
pub fn single_impute_lod(y_raw: &DMatrix<f64>, mask: &DMatrix<bool>, lod: &DVector<f64>) -> Result<DMatrix<f64>> {
    if mask.shape() != y_raw.shape() || lod.len() != y_raw.ncols() {
        return Err(CmrError::DimensionMismatch("data, mask and lod disagree".into()));
    }
    let mut out = y_raw.clone();
    for j in 0..y_raw.ncols() {
        for i in 0..y_raw.nrows() {
            if mask[(i, j)] {
                if !lod[j].is_finite() {
                    return Err(CmrError::Domain(format!("column {j} has censored entries but no finite LOD")));
                }
                out[(i, j)] = lod[j] / std::f64::consts::SQRT_2;
            }
        }
    }
    Ok(out)
}

pub fn rmse(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    if truth.len() != estimate.len() || truth.is_empty() {
        return Err(CmrError::LengthMismatch(truth.len(), estimate.len()));
    }
    let ss: f64 = truth.iter().zip(estimate).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((ss / truth.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::randcore::{kron, sample_mvn, standard_normal, RngStream};
    use proptest::prelude::*;

    fn random_spd(rng: &mut RngStream, p: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(p, p, |_, _| standard_normal(rng));
        &a * a.transpose() + DMatrix::identity(p, p) * 0.5
    }

    fn stein_eigen_oracle(sigma: &DMatrix<f64>, hat: &DMatrix<f64>) -> f64 {
        let a = sigma.clone().try_inverse().unwrap() * hat;
        let eig = a.complex_eigenvalues();
        eig.iter().map(|l| l.re - l.re.ln() - 1.0).sum()
    }

    #[test]
    fn stein_loss_values() {
        let i3 = DMatrix::identity(3, 3);
        assert_eq!(stein_loss(&i3, &i3).unwrap(), 0.0);
        let v = stein_loss(&i3, &(&i3 * 2.0)).unwrap();
        assert!((v - 3.0 * (1.0 - 2f64.ln())).abs() < 1e-12);
        let mut rng = RngStream::new(1, 0);
        for p in [2, 5, 9] {
            let s = random_spd(&mut rng, p);
            let h = random_spd(&mut rng, p);
            assert!(stein_loss(&s, &s).unwrap() < 1e-10);
            assert!((stein_loss(&s, &h).unwrap() - stein_eigen_oracle(&s, &h)).abs() < 1e-9);
        }
        assert!(matches!(
            stein_loss(&i3, &DMatrix::zeros(3, 3)),
            Err(CmrError::NotPositiveDefinite(_))
        ));
    }

    proptest! {
        #[test]
        fn stein_loss_congruence_invariant(seed in any::<u64>(), p in 2usize..6) {
            let mut rng = RngStream::new(seed, 0);
            let s = random_spd(&mut rng, p);
            let h = random_spd(&mut rng, p);
            let a = DMatrix::from_fn(p, p, |_, _| standard_normal(&mut rng)) + DMatrix::identity(p, p) * 3.0;
            let base = stein_loss(&s, &h).unwrap();
            let moved = stein_loss(&(&a * &s * a.transpose()), &(&a * &h * a.transpose())).unwrap();
            prop_assert!((base - moved).abs() < 1e-8 * (1.0 + base));
            prop_assert!(base >= 0.0);
        }
    }

    fn summary_from_precisions(precs: &[DMatrix<f64>]) -> ChainSummary {
        let p = precs[0].nrows();
        let mean = precs.iter().fold(DMatrix::zeros(p, p), |a, b| a + b) / precs.len() as f64;
        ChainSummary {
            mean_precision: mean,
            mean_cov: DMatrix::identity(p, p),
            mean_corr: DMatrix::identity(p, p),
            corr_lo: DMatrix::identity(p, p),
            corr_hi: DMatrix::identity(p, p),
            level: 0.95,
            n_kept: precs.len(),
            imputed_mean: Default::default(),
            active_factors_trace: vec![],
            mean_active_factors: 0.0,
        }
    }

    #[test]
    fn stein_bayes_arithmetic() {
        let s1 = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let one = summary_from_precisions(&[s1.clone().try_inverse().unwrap()]);
        assert!((stein_bayes_estimate(&one).unwrap() - &s1).abs().max() < 1e-12);
        let p1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let p2 = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 3.0]);
        // ½(P1 + P2) = [[2, .5], [.5, 2]], inverse = [[2, -.5], [-.5, 2]] / 3.75.
        let est = stein_bayes_estimate(&summary_from_precisions(&[p1, p2])).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, -0.5, -0.5, 2.0]) / 3.75;
        assert!((est - expected).abs().max() < 1e-12);
    }

    #[test]
    fn stein_bayes_beats_mean_covariance_on_draws() {
        let mut rng = RngStream::new(2, 0);
        let draws: Vec<DMatrix<f64>> = (0..200).map(|_| random_spd(&mut rng, 4)).collect();
        let precs: Vec<DMatrix<f64>> = draws.iter().map(|s| s.clone().try_inverse().unwrap()).collect();
        let sb = stein_bayes_estimate(&summary_from_precisions(&precs)).unwrap();
        let mc = draws.iter().fold(DMatrix::zeros(4, 4), |a, b| a + b) / draws.len() as f64;
        let avg = |h: &DMatrix<f64>| draws.iter().map(|s| stein_loss(s, h).unwrap()).sum::<f64>();
        assert!(avg(&sb) <= avg(&mc));
    }

    #[test]
    fn sample_covariance_values() {
        assert_eq!(sample_covariance(&DMatrix::zeros(3, 2)), DMatrix::zeros(2, 2));
        let y = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        assert_eq!(sample_covariance(&y)[(0, 0)], 1.0);
        let mut rng = RngStream::new(3, 0);
        let raw = DMatrix::from_fn(15, 4, |_, _| standard_normal(&mut rng) + 2.0);
        let s = sample_covariance(&center_columns(&raw));
        for j in 0..4 {
            for k in 0..4 {
                let mj = raw.column(j).mean();
                let mk = raw.column(k).mean();
                let two_pass: f64 = (0..15).map(|i| (raw[(i, j)] - mj) * (raw[(i, k)] - mk)).sum::<f64>() / 15.0;
                assert!((s[(j, k)] - two_pass).abs() < 1e-12);
            }
        }
    }

    fn kron_samples(rng: &mut RngStream, r: &DMatrix<f64>, c: &DMatrix<f64>, n: usize) -> Vec<DMatrix<f64>> {
        let sigma = kron(c, r);
        let chol = chol_strict(&sigma).unwrap();
        let zero = DVector::zeros(sigma.nrows());
        (0..n)
            .map(|_| {
                let v = sample_mvn(rng, &zero, &chol).unwrap();
                DMatrix::from_column_slice(r.nrows(), c.nrows(), v.as_slice())
            })
            .collect()
    }

    #[test]
    fn flip_flop_isotropic_and_normalized() {
        let mut rng = RngStream::new(4, 0);
        let samples = kron_samples(&mut rng, &DMatrix::identity(2, 2), &DMatrix::identity(3, 3), 4000);
        let fit = flip_flop_mle(&samples, FLIP_FLOP_TOL, FLIP_FLOP_MAX_ITER).unwrap();
        assert!(fit.converged);
        assert_eq!(fit.row_cov[(0, 0)], 1.0);
        assert!((fit.covariance() - DMatrix::identity(6, 6)).abs().max() < 0.1);
    }

    #[test]
    fn flip_flop_monotone_and_fixed_point() {
        let mut rng = RngStream::new(5, 0);
        for _ in 0..5 {
            let r = random_spd(&mut rng, 3);
            let c = random_spd(&mut rng, 4);
            let samples = kron_samples(&mut rng, &r, &c, 6);
            let fit = flip_flop_mle(&samples, 1e-12, 2000).unwrap();
            for w in fit.loglik_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9 * w[0].abs());
            }
            // Both updates hold at the limit (up to the scale split).
            let n = samples.len() as f64;
            let c_inv = fit.col_cov.clone().try_inverse().unwrap();
            let r_upd = samples.iter().fold(DMatrix::zeros(3, 3), |a, y| a + y * &c_inv * y.transpose()) / (n * 4.0);
            assert!((r_upd - &fit.row_cov).abs().max() < 1e-6);
        }
    }

    #[test]
    fn flip_flop_beats_sample_covariance() {
        let r = DMatrix::from_fn(2, 2, |a, b| if a == b { 1.0 } else { 0.9 });
        let c = DMatrix::from_fn(4, 4, |a, b| if a == b { 1.0 } else { 0.6 });
        let truth = kron(&c, &r);
        let mut wins = 0;
        for seed in 0..10 {
            let mut rng = RngStream::new(100 + seed, 0);
            let samples = kron_samples(&mut rng, &r, &c, 400);
            let fit = flip_flop_mle(&samples, FLIP_FLOP_TOL, FLIP_FLOP_MAX_ITER).unwrap();
            let flat = DMatrix::from_fn(400, 8, |i, j| samples[i][(j % 2, j / 2)]);
            let mle = sample_covariance(&flat);
            if stein_loss(&truth, &fit.covariance()).unwrap() < stein_loss(&truth, &mle).unwrap() {
                wins += 1;
            }
        }
        assert!(wins >= 9, "{wins}");
    }

    #[test]
    fn flip_flop_rejects_tiny_samples() {
        let samples = vec![DMatrix::identity(3, 1)];
        assert!(matches!(flip_flop_mle(&samples, 1e-8, 10), Err(CmrError::Singular(_))));
    }

    #[test]
    fn unvec_is_column_major() {
        let y = DMatrix::from_row_slice(1, 6, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let s = unvec_samples(&y, 2, 3).unwrap();
        assert_eq!(s[0], DMatrix::from_row_slice(2, 3, &[0.0, 2.0, 4.0, 1.0, 3.0, 5.0]));
    }

    #[test]
    fn lod_fill() {
        let y = DMatrix::from_row_slice(3, 2, &[5.0, 6.0, 0.0, 7.0, 8.0, 0.0]);
        let mask = DMatrix::from_row_slice(3, 2, &[false, false, true, false, false, true]);
        let lod = DVector::from_vec(vec![2f64.sqrt(), 2.0 * 2f64.sqrt()]);
        let out = single_impute_lod(&y, &mask, &lod).unwrap();
        let expected = DMatrix::from_row_slice(3, 2, &[5.0, 6.0, 1.0, 7.0, 8.0, 2.0]);
        assert!((out - expected).abs().max() < 1e-15);
        let none = DMatrix::from_element(3, 2, false);
        assert_eq!(single_impute_lod(&y, &none, &lod).unwrap(), y);
    }

    #[test]
    fn rmse_values() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(rmse(&[4.0, 0.0], &[0.0, 3.0]).unwrap(), rmse(&[0.0, 4.0], &[3.0, 0.0]).unwrap());
        assert_eq!(rmse(&[1.0], &[]), Err(CmrError::LengthMismatch(1, 0)));
    }
}
