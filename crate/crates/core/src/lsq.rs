//! Dense least squares via Householder QR, plus classical and cluster-robust
//! covariance and Student-t inference.
//!
//! The factorization processes columns left to right. A column whose
//! component orthogonal to the already retained columns has norm at most
//! `RANK_TOLERANCE` times the largest column norm is dropped, so among a set of
//! linearly dependent columns the last ones in order are the ones removed.

use std::collections::HashMap;
use std::hash::Hash;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

/// Relative column-norm threshold below which a column counts as dependent.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum LsqError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("design matrix has no rows or no columns")]
    EmptyDesign,
    #[error("design matrix contains a non-finite entry in column `{0}`")]
    NonFinite(String),
    #[error("design matrix has rank zero")]
    SingularDesign,
    #[error("no residual degrees of freedom (n = {n}, rank = {rank})")]
    InsufficientDof { n: usize, rank: usize },
    #[error("cluster-robust covariance needs at least 2 clusters, found {0}")]
    TooFewClusters(usize),
    #[error("standard error must be positive, found {0}")]
    NonpositiveSe(f64),
    #[error("degrees of freedom must be positive")]
    ZeroDof,
}

/// How standard errors are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inference {
    Classical,
    ClusterByUnit,
}

/// Regressor matrix with column labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    values: DMatrix<f64>,
    labels: Vec<String>,
}

impl DesignMatrix {
    pub fn new(values: DMatrix<f64>, labels: Vec<String>) -> Result<Self, LsqError> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(LsqError::EmptyDesign);
        }
        if labels.len() != values.ncols() {
            return Err(LsqError::DimensionMismatch {
                expected: values.ncols(),
                found: labels.len(),
            });
        }
        for (k, col) in values.column_iter().enumerate() {
            if col.iter().any(|v| !v.is_finite()) {
                return Err(LsqError::NonFinite(labels[k].clone()));
            }
        }
        Ok(Self { values, labels })
    }

    /// Builds a design from labelled columns of equal length.
    pub fn from_columns(columns: Vec<(String, Vec<f64>)>) -> Result<Self, LsqError> {
        let n = columns.first().map_or(0, |(_, c)| c.len());
        let mut values = DMatrix::zeros(n, columns.len());
        let mut labels = Vec::with_capacity(columns.len());
        for (k, (label, col)) in columns.into_iter().enumerate() {
            if col.len() != n {
                return Err(LsqError::DimensionMismatch {
                    expected: n,
                    found: col.len(),
                });
            }
            values.set_column(k, &DVector::from_vec(col));
            labels.push(label);
        }
        Self::new(values, labels)
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

struct Reflector {
    start: usize,
    v: DVector<f64>,
    v_norm_sq: f64,
}

impl Reflector {
    fn apply(&self, target: &mut [f64]) {
        let tail = &mut target[self.start..];
        let dot: f64 = self.v.iter().zip(tail.iter()).map(|(a, b)| a * b).sum();
        let s = 2.0 * dot / self.v_norm_sq;
        for (t, v) in tail.iter_mut().zip(self.v.iter()) {
            *t -= s * v;
        }
    }
}

/// Householder QR of a design, reusable across right-hand sides.
pub struct QrFactorization {
    design: DesignMatrix,
    reflectors: Vec<Reflector>,
    r: DMatrix<f64>,
    retained: Vec<usize>,
    dropped: Vec<usize>,
}

impl QrFactorization {
    pub fn new(design: &DesignMatrix) -> Result<Self, LsqError> {
        let x = design.values();
        let (n, k) = x.shape();
        let max_norm = x.column_iter().map(|c| c.norm()).fold(0.0_f64, f64::max);
        let tol = RANK_TOLERANCE * max_norm;

        let mut work = x.clone();
        let mut reflectors = Vec::new();
        let mut retained = Vec::new();
        let mut dropped = Vec::new();
        for j in 0..k {
            let r = retained.len();
            if r == n {
                dropped.push(j);
                continue;
            }
            let sub = work.view((r, j), (n - r, 1)).column(0).clone_owned();
            let norm = sub.norm();
            if norm <= tol || norm == 0.0 {
                dropped.push(j);
                continue;
            }
            let alpha = if sub[0] >= 0.0 { -norm } else { norm };
            let mut v = sub;
            v[0] -= alpha;
            let reflector = Reflector {
                start: r,
                v_norm_sq: v.norm_squared(),
                v,
            };
            for c in j..k {
                reflector.apply(work.column_mut(c).as_mut_slice());
            }
            reflectors.push(reflector);
            retained.push(j);
        }
        if retained.is_empty() {
            return Err(LsqError::SingularDesign);
        }
        let rank = retained.len();
        let r = DMatrix::from_fn(rank, rank, |i, c| if i <= c { work[(i, retained[c])] } else { 0.0 });
        Ok(Self {
            design: design.clone(),
            reflectors,
            r,
            retained,
            dropped,
        })
    }

    pub fn rank(&self) -> usize {
        self.retained.len()
    }

    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    pub fn solve(&self, y: &[f64]) -> Result<LsqFit, LsqError> {
        let x = self.design.values();
        let (n, k) = x.shape();
        if y.len() != n {
            return Err(LsqError::DimensionMismatch {
                expected: n,
                found: y.len(),
            });
        }
        let mut qty = y.to_vec();
        for h in &self.reflectors {
            h.apply(&mut qty);
        }
        let rank = self.rank();
        let rhs = DVector::from_column_slice(&qty[..rank]);
        let solved = self.r.solve_upper_triangular(&rhs).ok_or(LsqError::SingularDesign)?;

        let mut coefficients = vec![0.0; k];
        for (pos, &col) in self.retained.iter().enumerate() {
            coefficients[col] = solved[pos];
        }
        let fitted: Vec<f64> = (0..n)
            .map(|i| self.retained.iter().map(|&c| x[(i, c)] * coefficients[c]).sum())
            .collect();
        let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(y, f)| y - f).collect();
        let rss = residuals.iter().map(|e| e * e).sum();
        Ok(LsqFit {
            coefficients,
            residuals,
            fitted,
            rss,
            rank,
            dof_residual: n - rank,
            labels: self.design.labels().to_vec(),
            retained: self.retained.clone(),
            dropped: self.dropped.clone(),
            r: self.r.clone(),
        })
    }
}

/// Result of a least-squares solve. Dropped columns get a zero coefficient.
#[derive(Debug, Clone)]
pub struct LsqFit {
    pub coefficients: Vec<f64>,
    pub residuals: Vec<f64>,
    pub fitted: Vec<f64>,
    pub rss: f64,
    pub rank: usize,
    pub dof_residual: usize,
    pub labels: Vec<String>,
    pub retained: Vec<usize>,
    pub dropped: Vec<usize>,
    r: DMatrix<f64>,
}

impl LsqFit {
    /// `(XᵀX)⁻¹` over the retained columns, embedded in a K×K matrix.
    pub fn unscaled_covariance(&self) -> DMatrix<f64> {
        embed(&self.inner_unscaled(), &self.retained, self.coefficients.len())
    }

    fn inner_unscaled(&self) -> DMatrix<f64> {
        let rank = self.rank;
        let r_inv = self
            .r
            .solve_upper_triangular(&DMatrix::identity(rank, rank))
            .expect("R has a nonzero diagonal by construction");
        &r_inv * r_inv.transpose()
    }
}

fn embed(inner: &DMatrix<f64>, retained: &[usize], k: usize) -> DMatrix<f64> {
    let mut full = DMatrix::zeros(k, k);
    for (a, &i) in retained.iter().enumerate() {
        for (b, &j) in retained.iter().enumerate() {
            full[(i, j)] = inner[(a, b)];
        }
    }
    full
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let k = m.nrows();
    for i in 0..k {
        for j in (i + 1)..k {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn solve_least_squares(x: &DesignMatrix, y: &[f64]) -> Result<LsqFit, LsqError> {
    QrFactorization::new(x)?.solve(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    Classical,
    ClusterRobust,
}

#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    pub matrix: DMatrix<f64>,
    pub kind: CovarianceKind,
    pub clusters: Option<usize>,
    pub small_sample_factor: f64,
    /// Degrees of freedom for t-based inference: `N − rank` or `G − 1`.
    pub dof: usize,
}

impl CovarianceEstimate {
    pub fn standard_error(&self, k: usize) -> f64 {
        self.matrix[(k, k)].max(0.0).sqrt()
    }
}

/// `σ̂² (XᵀX)⁻¹` with `σ̂² = RSS / (N − rank)`.
pub fn classical_covariance(fit: &LsqFit) -> Result<CovarianceEstimate, LsqError> {
    if fit.dof_residual == 0 {
        return Err(LsqError::InsufficientDof {
            n: fit.residuals.len(),
            rank: fit.rank,
        });
    }
    let sigma2 = fit.rss / fit.dof_residual as f64;
    let mut matrix = fit.unscaled_covariance() * sigma2;
    symmetrize(&mut matrix);
    Ok(CovarianceEstimate {
        matrix,
        kind: CovarianceKind::Classical,
        clusters: None,
        small_sample_factor: 1.0,
        dof: fit.dof_residual,
    })
}

/// Cluster sandwich `(XᵀX)⁻¹ (Σ_g X_gᵀ u_g u_gᵀ X_g) (XᵀX)⁻¹`, scaled by
/// `G/(G−1) · (N−1)/(N−K)` with `K` the rank of `X`.
pub fn cluster_robust_covariance<C: Eq + Hash>(
    fit: &LsqFit,
    x: &DesignMatrix,
    cluster_ids: &[C],
) -> Result<CovarianceEstimate, LsqError> {
    let n = x.nrows();
    if cluster_ids.len() != n {
        return Err(LsqError::DimensionMismatch {
            expected: n,
            found: cluster_ids.len(),
        });
    }
    if fit.residuals.len() != n || fit.coefficients.len() != x.ncols() {
        return Err(LsqError::DimensionMismatch {
            expected: n,
            found: fit.residuals.len(),
        });
    }
    let mut index: HashMap<&C, usize> = HashMap::new();
    let mut cluster_of = Vec::with_capacity(n);
    for id in cluster_ids {
        let next = index.len();
        cluster_of.push(*index.entry(id).or_insert(next));
    }
    let g = index.len();
    if g < 2 {
        return Err(LsqError::TooFewClusters(g));
    }
    if fit.dof_residual == 0 {
        return Err(LsqError::InsufficientDof { n, rank: fit.rank });
    }

    let rank = fit.rank;
    let values = x.values();
    let mut scores = DMatrix::<f64>::zeros(g, rank);
    for i in 0..n {
        let u = fit.residuals[i];
        let gi = cluster_of[i];
        for (pos, &c) in fit.retained.iter().enumerate() {
            scores[(gi, pos)] += values[(i, c)] * u;
        }
    }
    let meat = scores.transpose() * &scores;
    let bread = fit.inner_unscaled();
    let factor = (g as f64 / (g as f64 - 1.0)) * ((n as f64 - 1.0) / (n as f64 - rank as f64));
    let inner = &bread * meat * &bread * factor;
    let mut matrix = embed(&inner, &fit.retained, x.ncols());
    symmetrize(&mut matrix);
    Ok(CovarianceEstimate {
        matrix,
        kind: CovarianceKind::ClusterRobust,
        clusters: Some(g),
        small_sample_factor: factor,
        dof: g - 1,
    })
}

/// Two-sided Student-t test of a zero null. Returns `(t, p)`.
pub fn t_test(coefficient: f64, standard_error: f64, dof: usize) -> Result<(f64, f64), LsqError> {
    if standard_error.is_nan() || standard_error <= 0.0 {
        return Err(LsqError::NonpositiveSe(standard_error));
    }
    let dist = student_t(dof)?;
    let t = coefficient / standard_error;
    let p = (2.0 * dist.cdf(-t.abs())).clamp(0.0, 1.0);
    Ok((t, p))
}

/// Two-sided critical value: `t` with `P(|T| ≤ t) = level`.
pub fn t_critical(level: f64, dof: usize) -> Result<f64, LsqError> {
    let dist = student_t(dof)?;
    Ok(dist.inverse_cdf(0.5 + level / 2.0))
}

fn student_t(dof: usize) -> Result<StudentsT, LsqError> {
    if dof == 0 {
        return Err(LsqError::ZeroDof);
    }
    Ok(StudentsT::new(0.0, 1.0, dof as f64).expect("positive dof"))
}
