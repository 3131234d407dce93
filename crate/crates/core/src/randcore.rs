//! Seedable random streams, variate generators and the dense linear-algebra
//! kernels shared by the sampler, the estimators and the simulation harness.
//!
//! Inverse-gamma draws use the shape/rate parameterization throughout: the
//! density is proportional to `x^(-shape-1) exp(-rate/x)`, so a full
//! conditional written as `IG(a/2, b/2)` is `sample_inverse_gamma(rng, a/2, b/2)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Exp, Gamma, StandardNormal};
use std::f64::consts::PI;

use crate::error::{CmrError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A reproducible random stream: ChaCha8 keyed by `seed`, with `stream_id`
/// selecting one of 2^64 independent sub-streams.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Fresh stream under the same seed whose id is a hash of this stream's id
    /// and `child`. Independent of how much of `self` has been consumed.
    pub fn substream(&self, child: u64) -> Self {
        Self::new(self.seed, mix64(self.stream_id ^ mix64(child.wrapping_add(0x9E37_79B9))))
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// SplitMix64 finalizer; used to derive seeds and stream ids from indices.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a 64-bit seed from a master seed and a path of indices.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(master), |acc, &k| mix64(acc ^ mix64(k)))
}

/// Lower Cholesky factor `L` with `L Lᵀ = A`.
#[derive(Clone, Debug, PartialEq)]
pub struct CholFactor {
    lower: DMatrix<f64>,
}

impl CholFactor {
    /// Wrap an existing lower-triangular factor. No positivity check, so a
    /// zero factor (degenerate covariance) is representable.
    pub fn from_lower(lower: DMatrix<f64>) -> Self {
        assert!(lower.is_square(), "Cholesky factor must be square");
        Self { lower }
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Factor of `c · A` for `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            lower: &self.lower * c.sqrt(),
        }
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Solve `L x = b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        forward_substitute(&self.lower, x.as_mut_slice());
        x
    }

    /// Solve `Lᵀ x = b`.
    pub fn solve_upper(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        backward_substitute_transposed(&self.lower, x.as_mut_slice());
        x
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// Solve `A X = B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        for mut col in out.column_iter_mut() {
            let s = col.as_mut_slice();
            forward_substitute(&self.lower, s);
            backward_substitute_transposed(&self.lower, s);
        }
        out
    }

    /// `xᵀ A⁻¹ x`.
    pub fn quad_form_inv(&self, x: &DVector<f64>) -> f64 {
        self.solve_lower(x).norm_squared()
    }

    /// `A⁻¹` as a dense symmetric matrix.
    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.solve_matrix(&DMatrix::identity(self.dim(), self.dim()));
        symmetrize_in_place(&mut inv);
        inv
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }
}

fn forward_substitute(l: &DMatrix<f64>, x: &mut [f64]) {
    let n = x.len();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
}

fn backward_substitute_transposed(l: &DMatrix<f64>, x: &mut [f64]) {
    let n = x.len();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
}

pub fn symmetrize_in_place(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = a.clone();
    symmetrize_in_place(&mut s);
    s
}

fn try_cholesky(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = nalgebra::Cholesky::new(a.clone())?;
    let l = chol.unpack();
    if l.diagonal().iter().all(|v| v.is_finite() && *v > 0.0) {
        Some(l)
    } else {
        None
    }
}

/// Cholesky factorization of the symmetric part of `a`. On failure, retries
/// with diagonal jitter starting at `1e-12 · ‖a‖_F` and doubling while the
/// jitter stays within `jitter_max`.
pub fn chol_psd(a: &DMatrix<f64>, jitter_max: f64) -> Result<CholFactor> {
    if !a.is_square() {
        return Err(CmrError::DimensionMismatch(format!(
            "cholesky of a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    let sym = symmetrize(a);
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(CmrError::npd("non-finite entries"));
    }
    if let Some(l) = try_cholesky(&sym) {
        return Ok(CholFactor { lower: l });
    }
    let mut jitter = 1e-12 * sym.norm();
    if jitter == 0.0 {
        jitter = 1e-300;
    }
    while jitter <= jitter_max {
        let mut shifted = sym.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(l) = try_cholesky(&shifted) {
            return Ok(CholFactor { lower: l });
        }
        jitter *= 2.0;
    }
    Err(CmrError::npd(&format!("jitter budget {jitter_max:e} exhausted")))
}

/// Factorization with no jitter allowance.
pub fn chol_strict(a: &DMatrix<f64>) -> Result<CholFactor> {
    chol_psd(a, 0.0)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn standard_normal_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| standard_normal(rng))
}

/// `mean + L z` with `z` standard normal.
pub fn sample_mvn<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &DVector<f64>,
    chol: &CholFactor,
) -> Result<DVector<f64>> {
    if chol.dim() != mean.len() {
        return Err(CmrError::DimensionMismatch(format!(
            "mean has length {} but factor has dimension {}",
            mean.len(),
            chol.dim()
        )));
    }
    let z = standard_normal_vector(rng, mean.len());
    Ok(mean + chol.lower() * z)
}

/// Draw from `N(P⁻¹ b, P⁻¹)` given the Cholesky factor of the precision `P`.
pub fn sample_mvn_canonical<R: Rng + ?Sized>(
    rng: &mut R,
    b: &DVector<f64>,
    precision: &CholFactor,
) -> DVector<f64> {
    let mean = precision.solve(b);
    let z = standard_normal_vector(rng, b.len());
    mean + precision.solve_upper(&z)
}

/// Matrix-normal draw with `Cov(vec(X)) = col_cov ⊗ diag(row_var)`, columns
/// stacked: `m + diag(row_var)^{1/2} E chol(col_cov)ᵀ`.
pub fn sample_matrix_normal<R: Rng + ?Sized>(
    rng: &mut R,
    m: &DMatrix<f64>,
    row_var: &DVector<f64>,
    col_cov: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (p, r) = m.shape();
    if row_var.len() != p || col_cov.nrows() != r || col_cov.ncols() != r {
        return Err(CmrError::DimensionMismatch(format!(
            "matrix normal: mean {p}x{r}, row variance {}, column covariance {}x{}",
            row_var.len(),
            col_cov.nrows(),
            col_cov.ncols()
        )));
    }
    if let Some(v) = row_var.iter().find(|v| !(**v > 0.0)) {
        return Err(CmrError::Domain(format!("row variance entry {v} must be > 0")));
    }
    let chol = chol_psd(col_cov, 0.0)?;
    let mut e = DMatrix::from_fn(p, r, |_, _| standard_normal(rng));
    for (i, mut row) in e.row_iter_mut().enumerate() {
        row *= row_var[i].sqrt();
    }
    Ok(m + e * chol.lower().transpose())
}

/// Inverse-gamma draw in shape/rate form: reciprocal of `Gamma(shape, rate)`.
pub fn sample_inverse_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> Result<f64> {
    if !(shape > 0.0 && shape.is_finite()) || !(rate > 0.0 && rate.is_finite()) {
        return Err(CmrError::Domain(format!(
            "inverse gamma requires shape > 0 and rate > 0, got ({shape}, {rate})"
        )));
    }
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| CmrError::Domain(e.to_string()))?
        .sample(rng);
    // Gamma draws can underflow to zero for tiny shapes.
    Ok(1.0 / g.max(f64::MIN_POSITIVE))
}

pub fn sample_beta<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && a.is_finite()) || !(b > 0.0 && b.is_finite()) {
        return Err(CmrError::Domain(format!("beta requires a, b > 0, got ({a}, {b})")));
    }
    let x: f64 = Beta::new(a, b)
        .map_err(|e| CmrError::Domain(e.to_string()))?
        .sample(rng);
    Ok(x.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}

/// Index (0-based) drawn with probability proportional to `exp(log_weights[i])`.
/// Non-finite weights other than `+inf` are treated as zero mass.
pub fn sample_categorical_log<R: Rng + ?Sized>(rng: &mut R, log_weights: &[f64]) -> Result<usize> {
    let max = log_weights
        .iter()
        .copied()
        .filter(|w| !w.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(CmrError::AllWeightsDegenerate);
    }
    if max == f64::INFINITY {
        return Err(CmrError::Domain("log-weight of +inf".into()));
    }
    let weights: Vec<f64> = log_weights
        .iter()
        .map(|&w| if w.is_nan() { 0.0 } else { (w - max).exp() })
        .collect();
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            last_positive = i;
            acc += w;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last_positive)
}

/// Exact draw from `N(mu, sigma²)` restricted to `x ≤ upper`.
///
/// Standardized bound `b ≥ 0`: plain rejection from the normal (acceptance
/// ≥ 1/2). `b < 0`: by symmetry draw from the upper tail `x ≥ -b` using the
/// translated-exponential rejection sampler, which stays exact arbitrarily
/// far into the tail.
pub fn sample_truncnorm_upper<R: Rng + ?Sized>(rng: &mut R, mu: f64, sigma: f64, upper: f64) -> f64 {
    assert!(sigma > 0.0, "truncated normal requires sigma > 0");
    let b = (upper - mu) / sigma;
    if b.is_nan() {
        return mu;
    }
    if b == f64::INFINITY {
        return mu + sigma * standard_normal(rng);
    }
    let z = if b >= 0.0 {
        loop {
            let z = standard_normal(rng);
            if z <= b {
                break z;
            }
        }
    } else {
        // The exponential proposal accepts > 0.7 of the time for every b < 0,
        // and never degrades in the far tail.
        -sample_normal_tail(rng, -b)
    };
    (mu + sigma * z).min(upper)
}

/// Standard normal restricted to `[a, ∞)`, `a ≥ 0`, via an exponential
/// proposal with the acceptance-optimal rate.
fn sample_normal_tail<R: Rng + ?Sized>(rng: &mut R, a: f64) -> f64 {
    let rate = 0.5 * (a + (a * a + 4.0).sqrt());
    let exp = Exp::new(rate).expect("positive rate");
    loop {
        let z = a + exp.sample(rng);
        let u: f64 = rng.random();
        if u <= (-(z - rate) * (z - rate) / 2.0).exp() {
            return z;
        }
    }
}

/// Multivariate normal log-density via triangular solves.
pub fn log_mvn_pdf(x: &DVector<f64>, mean: &DVector<f64>, cov_chol: &CholFactor) -> f64 {
    let p = x.len() as f64;
    let diff = x - mean;
    -0.5 * (p * LN_2PI + cov_chol.log_det() + cov_chol.quad_form_inv(&diff))
}

/// Zero-location multivariate Student-t log-density with `df` degrees of
/// freedom and scale matrix given by its Cholesky factor.
pub fn log_mvt_pdf(x: &DVector<f64>, df: f64, scale_chol: &CholFactor) -> f64 {
    let p = x.len() as f64;
    let q = scale_chol.quad_form_inv(x);
    ln_gamma(0.5 * (df + p)) - ln_gamma(0.5 * df) - 0.5 * p * (df * PI).ln() - 0.5 * scale_chol.log_det()
        - 0.5 * (df + p) * (q / df).ln_1p()
}

pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// `(D + ΛΛᵀ)⁻¹` and `log|D + ΛΛᵀ|` through the `r × r` capacitance matrix
/// `I + ΛᵀD⁻¹Λ`.
pub fn woodbury_precision(d: &DVector<f64>, lambda: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let (p, r) = lambda.shape();
    if d.len() != p {
        return Err(CmrError::DimensionMismatch(format!(
            "woodbury: d has length {} but lambda has {p} rows",
            d.len()
        )));
    }
    if let Some(v) = d.iter().find(|v| !(**v > 0.0)) {
        return Err(CmrError::Domain(format!("diagonal entry {v} must be > 0")));
    }
    let dinv = d.map(|v| 1.0 / v);
    let mut w = lambda.clone();
    for (i, mut row) in w.row_iter_mut().enumerate() {
        row *= dinv[i];
    }
    let mut cap = lambda.transpose() * &w;
    for h in 0..r {
        cap[(h, h)] += 1.0;
    }
    let cap_chol = chol_strict(&cap).map_err(|_| CmrError::npd("woodbury capacitance"))?;
    let correction = &w * cap_chol.solve_matrix(&w.transpose());
    let mut prec = DMatrix::from_diagonal(&dinv) - correction;
    symmetrize_in_place(&mut prec);
    let log_det = d.iter().map(|v| v.ln()).sum::<f64>() + cap_chol.log_det();
    Ok((prec, log_det))
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(chol_strict(a)?.inverse())
}

/// Correlation matrix of a covariance matrix.
pub fn cov_to_corr(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let sd: Vec<f64> = cov.diagonal().iter().map(|v| v.sqrt()).collect();
    DMatrix::from_fn(cov.nrows(), cov.ncols(), |i, j| {
        if i == j {
            1.0
        } else {
            cov[(i, j)] / (sd[i] * sd[j])
        }
    })
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}
