//! Zero-correlation tests with Benjamini–Yekutieli FDR control, and
//! credible-interval zero inclusion.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{CmrError, Result};
use crate::model::ChainSummary;

pub const P_VALUE_FLOOR: f64 = 1e-300;

/// Pearson correlation matrix of the columns of `y`.
pub fn sample_correlation(y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = y.nrows();
    let mut centered = y.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        let m = col.sum() / n as f64;
        col.add_scalar_mut(-m);
        let ss = col.norm_squared();
        if !(ss > 0.0) {
            return Err(CmrError::DegenerateColumn(j));
        }
        col /= ss.sqrt();
    }
    let mut r = centered.transpose() * &centered;
    for j in 0..r.nrows() {
        r[(j, j)] = 1.0;
    }
    Ok(r.map(|v| v.clamp(-1.0, 1.0)))
}

/// Two-sided p-value of `t = r √((n − 2)/(1 − r²))` on `n − 2` degrees of
/// freedom.
pub fn correlation_pvalue(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    if r.abs() >= 1.0 {
        return P_VALUE_FLOOR;
    }
    let t = r.abs() * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    (2.0 * dist.sf(t)).clamp(P_VALUE_FLOOR, 1.0)
}

/// Pairwise zero-correlation p-values (diagonal 0).
pub fn correlation_pvalues(y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = y.nrows();
    if n < 4 {
        return Err(CmrError::Domain(format!("need at least 4 rows, got {n}")));
    }
    let r = sample_correlation(y)?;
    let p = r.nrows();
    Ok(DMatrix::from_fn(p, p, |j, k| if j == k { 0.0 } else { correlation_pvalue(r[(j, k)], n) }))
}

/// `Σ_{i≤m} 1/i`.
pub fn harmonic(m: usize) -> f64 {
    (1..=m).map(|i| 1.0 / i as f64).sum()
}

/// Benjamini–Yekutieli step-up. Returns the rejection mask and adjusted
/// p-values, both in input order.
pub fn benjamini_yekutieli(pvals: &[f64], q: f64) -> Result<(Vec<bool>, Vec<f64>)> {
    step_up(pvals, q, harmonic(pvals.len()))
}

/// Benjamini–Hochberg step-up.
pub fn benjamini_hochberg(pvals: &[f64], q: f64) -> Result<(Vec<bool>, Vec<f64>)> {
    step_up(pvals, q, 1.0)
}

fn step_up(pvals: &[f64], q: f64, c: f64) -> Result<(Vec<bool>, Vec<f64>)> {
    if let Some(bad) = pvals.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(CmrError::Domain(format!("p-value {bad} outside [0, 1]")));
    }
    let m = pvals.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|a, b| pvals[*a].total_cmp(&pvals[*b]).then(a.cmp(b)));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let idx = order[rank];
        running = running.min(pvals[idx] * m as f64 * c / (rank + 1) as f64);
        adjusted[idx] = running.min(1.0);
    }
    let k_hat = (0..m)
        .rev()
        .find(|&k| pvals[order[k]] <= (k + 1) as f64 * q / (m as f64 * c));
    let mut reject = vec![false; m];
    if let Some(k) = k_hat {
        for &idx in &order[..=k] {
            reject[idx] = true;
        }
    }
    Ok((reject, adjusted))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjustMethod {
    BenjaminiYekutieli,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceMatrix {
    pub p_adjusted: DMatrix<f64>,
    pub reject: DMatrix<bool>,
    pub method: AdjustMethod,
    pub level: f64,
}

/// BY adjustment over the `p(p − 1)/2` off-diagonal pairs of a p-value
/// matrix.
pub fn significance_matrix(pvals: &DMatrix<f64>, level: f64) -> Result<SignificanceMatrix> {
    let p = pvals.nrows();
    let pairs: Vec<(usize, usize)> = (1..p).flat_map(|k| (0..k).map(move |j| (j, k))).collect();
    let flat: Vec<f64> = pairs.iter().map(|&(j, k)| pvals[(j, k)]).collect();
    let (rej, adj) = benjamini_yekutieli(&flat, level)?;
    let mut p_adjusted = DMatrix::zeros(p, p);
    let mut reject = DMatrix::from_element(p, p, false);
    for j in 0..p {
        reject[(j, j)] = true;
    }
    for (i, &(j, k)) in pairs.iter().enumerate() {
        p_adjusted[(j, k)] = adj[i];
        p_adjusted[(k, j)] = adj[i];
        reject[(j, k)] = rej[i];
        reject[(k, j)] = rej[i];
    }
    Ok(SignificanceMatrix {
        p_adjusted,
        reject,
        method: AdjustMethod::BenjaminiYekutieli,
        level,
    })
}

/// True where the credible interval contains zero; diagonal false.
pub fn ci_zero_inclusion(summary: &ChainSummary, level: f64) -> Result<DMatrix<bool>> {
    if (summary.level - level).abs() > 1e-12 {
        return Err(CmrError::InvalidConfig(format!(
            "summary holds {} intervals, {} requested",
            summary.level, level
        )));
    }
    let p = summary.corr_lo.nrows();
    Ok(DMatrix::from_fn(p, p, |j, k| {
        j != k && summary.corr_lo[(j, k)] <= 0.0 && 0.0 <= summary.corr_hi[(j, k)]
    }))
}
