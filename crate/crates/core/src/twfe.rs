//! Two-way fixed-effects estimation and its representation as a weighted sum
//! of outcomes.
//!
//! Fixed effects enter as explicit dummies: an intercept, one dummy per unit
//! except the first in appearance order, and one per period except the
//! earliest. The treatment column comes last so that, if it is collinear with
//! the fixed effects, it is the column the solver drops.

use serde::Serialize;
use thiserror::Error;

use crate::lsq::{
    classical_covariance, cluster_robust_covariance, t_test, DesignMatrix, Inference, LsqError, QrFactorization,
};
use crate::panel::PanelDataset;

#[derive(Debug, Error, PartialEq)]
pub enum TwfeError {
    #[error("estimation sample has {treated} treated and {untreated} untreated observations; need both")]
    DegenerateTreatment { treated: usize, untreated: usize },
    #[error(
        "treatment is collinear with the fixed effects (sum of squared residuals {norm_sq:e} over {n} observations)"
    )]
    CollinearTreatment { norm_sq: f64, n: usize },
    #[error("estimation sample has {0} unit(s); need at least 2")]
    TooFewUnits(usize),
    #[error("estimation sample has {0} period(s); need at least 2")]
    TooFewPeriods(usize),
    #[error("closed-form residuals need a balanced panel")]
    UnbalancedPanel,
    #[error("residualized treatment has zero variance")]
    ZeroVariance,
    #[error("length mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error(transparent)]
    Lsq(#[from] LsqError),
}

/// One row of the estimation sample (non-missing outcome).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRow {
    pub unit: String,
    pub period: i64,
    pub treated: bool,
    pub outcome: f64,
}

/// Estimation sample with integer codes for units and periods.
#[derive(Debug, Clone)]
pub struct EstimationSample {
    pub rows: Vec<SampleRow>,
    pub units: Vec<String>,
    pub periods: Vec<i64>,
    pub unit_index: Vec<usize>,
    pub period_index: Vec<usize>,
}

impl EstimationSample {
    pub fn from_dataset(dataset: &PanelDataset) -> Result<Self, TwfeError> {
        let rows: Vec<SampleRow> = dataset
            .estimation_rows()
            .map(|o| SampleRow {
                unit: o.unit.clone(),
                period: o.period,
                treated: o.treated,
                outcome: o.outcome.expect("estimation rows have outcomes"),
            })
            .collect();
        let mut units: Vec<String> = Vec::new();
        for row in &rows {
            if !units.contains(&row.unit) {
                units.push(row.unit.clone());
            }
        }
        let mut periods: Vec<i64> = rows.iter().map(|r| r.period).collect();
        periods.sort_unstable();
        periods.dedup();
        if units.len() < 2 {
            return Err(TwfeError::TooFewUnits(units.len()));
        }
        if periods.len() < 2 {
            return Err(TwfeError::TooFewPeriods(periods.len()));
        }
        let unit_index = rows
            .iter()
            .map(|r| units.iter().position(|u| *u == r.unit).expect("unit listed"))
            .collect();
        let period_index = rows
            .iter()
            .map(|r| periods.binary_search(&r.period).expect("period listed"))
            .collect();
        Ok(Self {
            rows,
            units,
            periods,
            unit_index,
            period_index,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn treatment(&self) -> Vec<f64> {
        self.rows.iter().map(|r| if r.treated { 1.0 } else { 0.0 }).collect()
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.outcome).collect()
    }

    fn fixed_effect_columns(&self) -> Vec<(String, Vec<f64>)> {
        let n = self.len();
        let mut columns = vec![("intercept".to_string(), vec![1.0; n])];
        for (u, name) in self.units.iter().enumerate().skip(1) {
            let col = self
                .unit_index
                .iter()
                .map(|&i| if i == u { 1.0 } else { 0.0 })
                .collect();
            columns.push((format!("unit[{name}]"), col));
        }
        for (t, period) in self.periods.iter().enumerate().skip(1) {
            let col = self
                .period_index
                .iter()
                .map(|&i| if i == t { 1.0 } else { 0.0 })
                .collect();
            columns.push((format!("period[{period}]"), col));
        }
        columns
    }

    /// Intercept plus unit and period dummies.
    pub fn fixed_effects_design(&self) -> Result<DesignMatrix, TwfeError> {
        Ok(DesignMatrix::from_columns(self.fixed_effect_columns())?)
    }

    /// Fixed-effects design with the treatment indicator as the last column.
    pub fn full_design(&self) -> Result<DesignMatrix, TwfeError> {
        let mut columns = self.fixed_effect_columns();
        columns.push(("treatment".to_string(), self.treatment()));
        Ok(DesignMatrix::from_columns(columns)?)
    }

    fn check_treatment_variation(&self) -> Result<(), TwfeError> {
        let treated = self.rows.iter().filter(|r| r.treated).count();
        let untreated = self.len() - treated;
        if treated == 0 || untreated == 0 {
            return Err(TwfeError::DegenerateTreatment { treated, untreated });
        }
        Ok(())
    }
}

fn check_not_collinear(dtilde: &[f64]) -> Result<(), TwfeError> {
    let norm_sq: f64 = dtilde.iter().map(|d| d * d).sum();
    let n = dtilde.len();
    if norm_sq < 1e-12 * n as f64 {
        return Err(TwfeError::CollinearTreatment { norm_sq, n });
    }
    Ok(())
}

/// Fitted two-way fixed-effects model. Vectors run over the estimation sample
/// in dataset row order.
#[derive(Debug, Clone, Serialize)]
pub struct TwfeFit {
    pub beta: f64,
    /// `None` when the model leaves no residual degrees of freedom.
    pub se: Option<f64>,
    /// `None` when the standard error is missing or exactly zero.
    pub t_stat: Option<f64>,
    pub p_value: Option<f64>,
    pub dof: usize,
    pub inference: Inference,
    pub clusters: usize,
    pub n_obs: usize,
    pub n_treated: usize,
    pub residualized_treatment: Vec<f64>,
    pub residualized_outcome: Vec<f64>,
    pub weights: Vec<f64>,
    pub unit_effects: Vec<(String, f64)>,
    pub period_effects: Vec<(i64, f64)>,
    pub sample: Vec<SampleRow>,
    /// Every unit and period of the input dataset, including ones without outcomes.
    pub panel_units: Vec<String>,
    pub panel_periods: Vec<i64>,
    pub dropped_regressors: Vec<String>,
}

impl TwfeFit {
    pub fn sample_index(&self) -> impl Iterator<Item = (&str, i64)> {
        self.sample.iter().map(|r| (r.unit.as_str(), r.period))
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.sample.iter().map(|r| r.outcome).collect()
    }

    pub fn treatment(&self) -> Vec<f64> {
        self.sample.iter().map(|r| if r.treated { 1.0 } else { 0.0 }).collect()
    }
}

pub fn fit_twfe(dataset: &PanelDataset, inference: Inference) -> Result<TwfeFit, TwfeError> {
    let sample = EstimationSample::from_dataset(dataset)?;
    sample.check_treatment_variation()?;

    let fe_design = sample.fixed_effects_design()?;
    let fe_qr = QrFactorization::new(&fe_design)?;
    let d = sample.treatment();
    let y = sample.outcomes();
    let dtilde = fe_qr.solve(&d)?.residuals;
    check_not_collinear(&dtilde)?;
    let ytilde = fe_qr.solve(&y)?.residuals;
    let weights = fwl_weights(&dtilde)?;

    let design = sample.full_design()?;
    let k_treat = design.ncols() - 1;
    let fit = QrFactorization::new(&design)?.solve(&y)?;
    if fit.dropped.contains(&k_treat) {
        let norm_sq = dtilde.iter().map(|v| v * v).sum();
        return Err(TwfeError::CollinearTreatment {
            norm_sq,
            n: sample.len(),
        });
    }
    let beta = fit.coefficients[k_treat];

    let cov = match inference {
        Inference::Classical => classical_covariance(&fit),
        Inference::ClusterByUnit => cluster_robust_covariance(&fit, &design, &sample.unit_index),
    };
    let (se, dof) = match cov {
        Ok(cov) => (Some(cov.standard_error(k_treat)), cov.dof),
        Err(LsqError::InsufficientDof { .. }) => (None, 0),
        Err(e) => return Err(e.into()),
    };
    let (t_stat, p_value) = match se {
        Some(se) if se > 0.0 => {
            let (t, p) = t_test(beta, se, dof)?;
            (Some(t), Some(p))
        }
        _ => (None, None),
    };

    let intercept = fit.coefficients[0];
    let n_units = sample.units.len();
    let unit_effects = sample
        .units
        .iter()
        .enumerate()
        .map(|(u, name)| {
            let shift = if u == 0 { 0.0 } else { fit.coefficients[u] };
            (name.clone(), intercept + shift)
        })
        .collect();
    let period_effects = sample
        .periods
        .iter()
        .enumerate()
        .map(|(t, &p)| (p, if t == 0 { 0.0 } else { fit.coefficients[n_units - 1 + t] }))
        .collect();
    let dropped_regressors = fit.dropped.iter().map(|&k| fit.labels[k].clone()).collect();

    Ok(TwfeFit {
        beta,
        se,
        t_stat,
        p_value,
        dof,
        inference,
        clusters: n_units,
        n_obs: sample.len(),
        n_treated: sample.rows.iter().filter(|r| r.treated).count(),
        residualized_treatment: dtilde,
        residualized_outcome: ytilde,
        weights,
        unit_effects,
        period_effects,
        sample: sample.rows,
        panel_units: dataset.units().to_vec(),
        panel_periods: dataset.periods().to_vec(),
        dropped_regressors,
    })
}

/// Residuals of the treatment indicator on unit and period dummies.
pub fn residualize_treatment(dataset: &PanelDataset) -> Result<Vec<f64>, TwfeError> {
    let sample = EstimationSample::from_dataset(dataset)?;
    let qr = QrFactorization::new(&sample.fixed_effects_design()?)?;
    let dtilde = qr.solve(&sample.treatment())?.residuals;
    check_not_collinear(&dtilde)?;
    Ok(dtilde)
}

/// Residuals of the outcome on unit and period dummies. A zero vector is valid.
pub fn residualize_outcome(dataset: &PanelDataset) -> Result<Vec<f64>, TwfeError> {
    let sample = EstimationSample::from_dataset(dataset)?;
    let qr = QrFactorization::new(&sample.fixed_effects_design()?)?;
    Ok(qr.solve(&sample.outcomes())?.residuals)
}

/// `D̃_it = D_it − D̄_t − D̄_i + D̄_all`, valid only on a balanced panel.
pub fn balanced_weights_closed_form(dataset: &PanelDataset) -> Result<Vec<f64>, TwfeError> {
    if !dataset.is_balanced() {
        return Err(TwfeError::UnbalancedPanel);
    }
    let sample = EstimationSample::from_dataset(dataset)?;
    let d = sample.treatment();
    let mut unit_sum = vec![0.0; sample.units.len()];
    let mut unit_n = vec![0usize; sample.units.len()];
    let mut period_sum = vec![0.0; sample.periods.len()];
    let mut period_n = vec![0usize; sample.periods.len()];
    for ((&u, &t), &v) in sample.unit_index.iter().zip(&sample.period_index).zip(&d) {
        unit_sum[u] += v;
        unit_n[u] += 1;
        period_sum[t] += v;
        period_n[t] += 1;
    }
    let mean_all = d.iter().sum::<f64>() / d.len() as f64;
    Ok(d.iter()
        .zip(sample.unit_index.iter().zip(&sample.period_index))
        .map(|(&v, (&u, &t))| v - period_sum[t] / period_n[t] as f64 - unit_sum[u] / unit_n[u] as f64 + mean_all)
        .collect())
}

/// `w_it = D̃_it / Σ D̃²`.
pub fn fwl_weights(dtilde: &[f64]) -> Result<Vec<f64>, TwfeError> {
    let ss: f64 = dtilde.iter().map(|d| d * d).sum();
    if ss.is_nan() || ss <= 0.0 {
        return Err(TwfeError::ZeroVariance);
    }
    Ok(dtilde.iter().map(|d| d / ss).collect())
}

/// `Σ w_it y_it`.
pub fn beta_from_weights(weights: &[f64], outcomes: &[f64]) -> Result<f64, TwfeError> {
    if weights.len() != outcomes.len() {
        return Err(TwfeError::DimensionMismatch {
            left: weights.len(),
            right: outcomes.len(),
        });
    }
    Ok(weights.iter().zip(outcomes).map(|(w, y)| w * y).sum())
}
