//! Meta-covariate design builders and the induced prior marginal covariance
//! `(1 + tr T) I_p + XΓΓᵀXᵀ`.
//!
//! Category labels passed to the builders are 1-based (`1..=q`), matching how
//! groupings are written in data files. Matrix-variate variables are ordered
//! column-major: variable `j = l + p₁·k` sits in row `l`, column `k`.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{CmrError, Result};
use crate::model::{ColumnKind, MetaDesign};
use crate::randcore::standard_normal;

/// Standard deviation of the simulated continuous group covariate.
pub const MRC_DEFAULT_SD: f64 = 0.25;

/// Which family of design a [`DesignSpec`] describes.
#[derive(Clone, Debug, PartialEq)]
pub enum DesignSpec {
    Intercept { p: usize },
    Categorical { groups: Vec<usize> },
    MultiCategorical { groupings: Vec<Vec<usize>> },
    MatrixVariate { p1: usize, p2: usize },
    GeneralTable { columns: Vec<MetaColumn>, standardize: bool },
}

impl DesignSpec {
    pub fn build(&self) -> Result<MetaDesign> {
        match self {
            DesignSpec::Intercept { p } => build_intercept(*p),
            DesignSpec::Categorical { groups } => build_categorical(groups),
            DesignSpec::MultiCategorical { groupings } => build_multi_categorical(groupings),
            DesignSpec::MatrixVariate { p1, p2 } => build_matrix_variate(*p1, *p2),
            DesignSpec::GeneralTable { columns, standardize } => build_general(columns, *standardize),
        }
    }
}

/// One column of a mixed-type meta-covariate table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaColumn {
    pub name: String,
    pub values: MetaValues,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetaValues {
    Categorical(Vec<String>),
    Continuous(Vec<f64>),
}

impl MetaValues {
    fn len(&self) -> usize {
        match self {
            MetaValues::Categorical(v) => v.len(),
            MetaValues::Continuous(v) => v.len(),
        }
    }
}

pub fn build_intercept(p: usize) -> Result<MetaDesign> {
    if p == 0 {
        return Err(CmrError::DimensionMismatch("intercept design needs p >= 1".into()));
    }
    MetaDesign::new(DMatrix::from_element(p, 1, 1.0), vec![ColumnKind::Intercept], vec![0])
}

fn one_hot(groups: &[usize], source_index: usize) -> Result<DMatrix<f64>> {
    let q = groups.iter().copied().max().unwrap_or(0);
    if groups.is_empty() {
        return Err(CmrError::DimensionMismatch("empty grouping".into()));
    }
    if groups.contains(&0) {
        return Err(CmrError::Domain("category labels are 1-based".into()));
    }
    let present: BTreeSet<usize> = groups.iter().copied().collect();
    if let Some(label) = (1..=q).find(|l| !present.contains(l)) {
        return Err(CmrError::MissingCategory { source_index, label });
    }
    Ok(DMatrix::from_fn(groups.len(), q, |j, k| if groups[j] == k + 1 { 1.0 } else { 0.0 }))
}

/// One-hot encoding with all `q` levels kept; one ridge group per category.
pub fn build_categorical(groups: &[usize]) -> Result<MetaDesign> {
    let x = one_hot(groups, 0)?;
    let q = x.ncols();
    MetaDesign::new(x, vec![ColumnKind::Indicator; q], (0..q).collect())
}

/// Horizontal concatenation of one-hot blocks; each source grouping shares
/// one ridge group.
pub fn build_multi_categorical(groupings: &[Vec<usize>]) -> Result<MetaDesign> {
    let Some(first) = groupings.first() else {
        return Err(CmrError::DimensionMismatch("no groupings supplied".into()));
    };
    let p = first.len();
    let mut blocks = Vec::with_capacity(groupings.len());
    for (s, g) in groupings.iter().enumerate() {
        if g.len() != p {
            return Err(CmrError::DimensionMismatch(format!("grouping {s} has length {}, expected {p}", g.len())));
        }
        blocks.push(one_hot(g, s)?);
    }
    let q: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut x = DMatrix::zeros(p, q);
    let mut ridge_group = Vec::with_capacity(q);
    let mut offset = 0;
    for (s, b) in blocks.iter().enumerate() {
        x.view_mut((0, offset), (p, b.ncols())).copy_from(b);
        ridge_group.extend(std::iter::repeat_n(s, b.ncols()));
        offset += b.ncols();
    }
    MetaDesign::new(x, vec![ColumnKind::Indicator; q], ridge_group)
}

/// Row-membership block followed by column-membership block.
pub fn build_matrix_variate(p1: usize, p2: usize) -> Result<MetaDesign> {
    if p1 == 0 || p2 == 0 {
        return Err(CmrError::DimensionMismatch("matrix-variate design needs p1, p2 >= 1".into()));
    }
    let (rows, cols) = matrix_variate_labels(p1, p2);
    build_multi_categorical(&[rows, cols])
}

/// 1-based row and column labels of the `p₁p₂` variables in column-major order.
pub fn matrix_variate_labels(p1: usize, p2: usize) -> (Vec<usize>, Vec<usize>) {
    let rows = (0..p1 * p2).map(|j| j % p1 + 1).collect();
    let cols = (0..p1 * p2).map(|j| j / p1 + 1).collect();
    (rows, cols)
}

/// Intercept, then each source column in order: categorical columns expanded
/// one-hot over their sorted distinct levels, continuous columns optionally
/// standardized over the `p` variables. One ridge group per source column and
/// one for the intercept.
pub fn build_general(columns: &[MetaColumn], standardize: bool) -> Result<MetaDesign> {
    let p = columns
        .first()
        .map(|c| c.values.len())
        .ok_or_else(|| CmrError::DimensionMismatch("meta table has no columns".into()))?;
    if p == 0 {
        return Err(CmrError::DimensionMismatch("meta table has no rows".into()));
    }
    let mut cols: Vec<DVector<f64>> = vec![DVector::from_element(p, 1.0)];
    let mut kinds = vec![ColumnKind::Intercept];
    let mut groups = vec![0];
    for (s, col) in columns.iter().enumerate() {
        if col.values.len() != p {
            return Err(CmrError::DimensionMismatch(format!(
                "meta column `{}` has {} rows, expected {p}",
                col.name,
                col.values.len()
            )));
        }
        match &col.values {
            MetaValues::Categorical(levels) => {
                let distinct: Vec<&String> = levels.iter().collect::<BTreeSet<_>>().into_iter().collect();
                for level in distinct {
                    cols.push(DVector::from_fn(p, |j, _| if &levels[j] == level { 1.0 } else { 0.0 }));
                    kinds.push(ColumnKind::Indicator);
                    groups.push(s + 1);
                }
            }
            MetaValues::Continuous(values) => {
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(CmrError::Domain(format!("meta column `{}` has missing or non-finite cells", col.name)));
                }
                let mut v = DVector::from_column_slice(values);
                if standardize {
                    let mean = v.mean();
                    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / p as f64).sqrt();
                    if !(sd > 0.0) {
                        return Err(CmrError::ConstantContinuousColumn(col.name.clone()));
                    }
                    v = v.map(|x| (x - mean) / sd);
                }
                cols.push(v);
                kinds.push(ColumnKind::Continuous);
                groups.push(s + 1);
            }
        }
    }
    MetaDesign::new(DMatrix::from_columns(&cols), kinds, groups)
}

/// `(1 + tr T) I_p + XΓΓᵀXᵀ`.
pub fn prior_marginal_cov(design: &MetaDesign, gamma: &DMatrix<f64>, t_trace: f64) -> Result<DMatrix<f64>> {
    if gamma.nrows() != design.q() {
        return Err(CmrError::DimensionMismatch(format!(
            "Γ has {} rows but the design has {} columns",
            gamma.nrows(),
            design.q()
        )));
    }
    if !(t_trace >= 0.0) {
        return Err(CmrError::Domain(format!("tr(T) must be nonnegative, got {t_trace}")));
    }
    let xg = &design.x * gamma;
    let mut cov = &xg * xg.transpose();
    for j in 0..cov.nrows() {
        cov[(j, j)] += 1.0 + t_trace;
    }
    Ok(cov)
}

/// Continuous covariate `x_j ~ N(g_j, sd²)` centred at each variable's group.
pub fn gen_mrc_covariate<R: Rng + ?Sized>(rng: &mut R, groups: &[usize], sd: f64) -> Result<Vec<f64>> {
    if !(sd > 0.0) {
        return Err(CmrError::Domain(format!("sd must be > 0, got {sd}")));
    }
    Ok(groups.iter().map(|&g| g as f64 + sd * standard_normal(rng)).collect())
}

/// Intercept plus one continuous column.
pub fn intercept_plus_continuous(values: &[f64]) -> Result<MetaDesign> {
    build_general(
        &[MetaColumn {
            name: "x".into(),
            values: MetaValues::Continuous(values.to_vec()),
        }],
        false,
    )
}
