//! Running posterior summaries: mean precision (through Woodbury), mean
//! covariance and correlation, equal-tailed correlation intervals and
//! imputed-value means.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::Result;
use crate::model::{ChainSummary, CmrState, Dataset};
use crate::randcore::{cov_to_corr, woodbury_precision};
use crate::sampler::{ChainConfig, CorrStore};

/// Largest dimension for which every per-draw correlation is stored.
pub const FULL_STORE_MAX_P: usize = 64;

/// Sample quantile with linear interpolation between order statistics
/// (`h = (n − 1)q`). `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty sample");
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// P² single-quantile estimator (Jain & Chlamtac), O(1) memory.
#[derive(Clone, Debug)]
pub struct P2Quantile {
    p: f64,
    heights: [f64; 5],
    pos: [f64; 5],
    desired: [f64; 5],
    incr: [f64; 5],
    count: usize,
}

impl P2Quantile {
    pub fn new(p: f64) -> Self {
        Self {
            p,
            heights: [0.0; 5],
            pos: [1.0, 2.0, 3.0, 4.0, 5.0],
            desired: [1.0, 1.0 + 2.0 * p, 1.0 + 4.0 * p, 3.0 + 2.0 * p, 5.0],
            incr: [0.0, p / 2.0, p, (1.0 + p) / 2.0, 1.0],
            count: 0,
        }
    }

    pub fn push(&mut self, x: f64) {
        if self.count < 5 {
            self.heights[self.count] = x;
            self.count += 1;
            if self.count == 5 {
                self.heights.sort_by(|a, b| a.total_cmp(b));
            }
            return;
        }
        self.count += 1;
        let k = if x < self.heights[0] {
            self.heights[0] = x;
            0
        } else if x >= self.heights[4] {
            self.heights[4] = x;
            3
        } else {
            (0..4).find(|&i| x < self.heights[i + 1]).unwrap_or(3)
        };
        for i in (k + 1)..5 {
            self.pos[i] += 1.0;
        }
        for i in 0..5 {
            self.desired[i] += self.incr[i];
        }
        for i in 1..4 {
            let d = self.desired[i] - self.pos[i];
            if (d >= 1.0 && self.pos[i + 1] - self.pos[i] > 1.0) || (d <= -1.0 && self.pos[i - 1] - self.pos[i] < -1.0) {
                let s = d.signum();
                let cand = self.parabolic(i, s);
                self.heights[i] = if self.heights[i - 1] < cand && cand < self.heights[i + 1] {
                    cand
                } else {
                    self.linear(i, s)
                };
                self.pos[i] += s;
            }
        }
    }

    fn parabolic(&self, i: usize, s: f64) -> f64 {
        let (q, n) = (&self.heights, &self.pos);
        q[i] + s / (n[i + 1] - n[i - 1])
            * ((n[i] - n[i - 1] + s) * (q[i + 1] - q[i]) / (n[i + 1] - n[i])
                + (n[i + 1] - n[i] - s) * (q[i] - q[i - 1]) / (n[i] - n[i - 1]))
    }

    fn linear(&self, i: usize, s: f64) -> f64 {
        let j = if s > 0.0 { i + 1 } else { i - 1 };
        self.heights[i] + s * (self.heights[j] - self.heights[i]) / (self.pos[j] - self.pos[i])
    }

    /// Current estimate; exact (type 7) while fewer than five values are seen.
    pub fn estimate(&self) -> f64 {
        if self.count >= 5 {
            return self.heights[2];
        }
        let mut v = self.heights[..self.count].to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        quantile_sorted(&v, self.p)
    }
}

enum CorrDraws {
    Full(Vec<Vec<f64>>),
    Streaming(Vec<(P2Quantile, P2Quantile)>),
}

/// Accumulates kept draws of a chain into a [`ChainSummary`].
pub struct ChainAccumulator {
    p: usize,
    level: f64,
    n: usize,
    prec_sum: DMatrix<f64>,
    cov_sum: DMatrix<f64>,
    corr_sum: DMatrix<f64>,
    corr_draws: CorrDraws,
    imputed_sum: Vec<((usize, usize), f64)>,
}

impl ChainAccumulator {
    pub fn new(data: &Dataset, config: &ChainConfig) -> Self {
        let p = data.p();
        let pairs = p * p.saturating_sub(1) / 2;
        let full = match config.corr_store {
            CorrStore::Full => true,
            CorrStore::Streaming => false,
            CorrStore::Auto => p <= FULL_STORE_MAX_P,
        };
        let tail = 0.5 * (1.0 - config.credible_level);
        let corr_draws = if full {
            CorrDraws::Full(vec![Vec::with_capacity(config.kept_draws()); pairs])
        } else {
            CorrDraws::Streaming(vec![(P2Quantile::new(tail), P2Quantile::new(1.0 - tail)); pairs])
        };
        Self {
            p,
            level: config.credible_level,
            n: 0,
            prec_sum: DMatrix::zeros(p, p),
            cov_sum: DMatrix::zeros(p, p),
            corr_sum: DMatrix::zeros(p, p),
            corr_draws,
            imputed_sum: data.censored_entries().into_iter().map(|e| (e, 0.0)).collect(),
        }
    }

    pub fn push(&mut self, state: &CmrState, data: &Dataset) -> Result<()> {
        let (prec, _) = woodbury_precision(&state.d, &state.lambda)?;
        let cov = state.covariance();
        let corr = cov_to_corr(&cov);
        self.prec_sum += prec;
        self.cov_sum += &cov;
        self.corr_sum += &corr;
        let mut idx = 0;
        for k in 1..self.p {
            for j in 0..k {
                let v = corr[(j, k)];
                match &mut self.corr_draws {
                    CorrDraws::Full(d) => d[idx].push(v),
                    CorrDraws::Streaming(q) => {
                        q[idx].0.push(v);
                        q[idx].1.push(v);
                    }
                }
                idx += 1;
            }
        }
        for ((i, j), s) in self.imputed_sum.iter_mut() {
            *s += data.y[(*i, *j)];
        }
        self.n += 1;
        Ok(())
    }

    pub fn finish(self, data: &Dataset, trace: Vec<usize>) -> ChainSummary {
        let p = self.p;
        let inv_n = 1.0 / self.n.max(1) as f64;
        let tail = 0.5 * (1.0 - self.level);
        let mut lo = DMatrix::identity(p, p);
        let mut hi = DMatrix::identity(p, p);
        let mut idx = 0;
        let mut corr_draws = self.corr_draws;
        for k in 1..p {
            for j in 0..k {
                let (a, b) = match &mut corr_draws {
                    CorrDraws::Full(d) => {
                        let v = &mut d[idx];
                        v.sort_by(|x, y| x.total_cmp(y));
                        (quantile_sorted(v, tail), quantile_sorted(v, 1.0 - tail))
                    }
                    CorrDraws::Streaming(q) => {
                        let (a, b) = (q[idx].0.estimate(), q[idx].1.estimate());
                        (a.min(b), a.max(b))
                    }
                };
                lo[(j, k)] = a;
                lo[(k, j)] = a;
                hi[(j, k)] = b;
                hi[(k, j)] = b;
                idx += 1;
            }
        }
        let imputed_mean: BTreeMap<(usize, usize), f64> = self
            .imputed_sum
            .into_iter()
            .map(|((i, j), s)| ((i, j), data.to_raw(j, s * inv_n)))
            .collect();
        let mean_active_factors = if trace.is_empty() {
            0.0
        } else {
            trace.iter().sum::<usize>() as f64 / trace.len() as f64
        };
        let mut mean_corr = self.corr_sum * inv_n;
        for j in 0..p {
            mean_corr[(j, j)] = 1.0;
        }
        ChainSummary {
            mean_precision: self.prec_sum * inv_n,
            mean_cov: self.cov_sum * inv_n,
            mean_corr,
            corr_lo: lo,
            corr_hi: hi,
            level: self.level,
            n_kept: self.n,
            imputed_mean,
            active_factors_trace: trace,
            mean_active_factors,
        }
    }
}
