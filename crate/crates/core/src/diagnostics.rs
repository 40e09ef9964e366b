//! Where the implicit TWFE weights fall, and whether the residualized outcome
//! is the same linear function of residualized treatment in the treated and
//! untreated groups.

use std::cmp::Ordering;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::lsq::{
    classical_covariance, cluster_robust_covariance, solve_least_squares, t_test, DesignMatrix, Inference, LsqError,
    RANK_TOLERANCE,
};
use crate::panel::{Adoption, AdoptionSchedule};
use crate::twfe::TwfeFit;
use crate::NEGATIVE_WEIGHT_THRESHOLD;

pub const DEFAULT_HISTOGRAM_BINS: usize = 40;
pub const DEFAULT_BANDWIDTH: f64 = 0.8;
pub const DEFAULT_GRID_POINTS: usize = 50;

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("{group} group is degenerate: {reason}")]
    DegenerateGroup { group: Group, reason: String },
    #[error("homogeneity regressors are collinear; dropped {0:?}")]
    CollinearDesign(Vec<String>),
    #[error("unit `{0}` is not in the adoption schedule")]
    UnknownUnit(String),
    #[error("bandwidth fraction must lie in (0, 1], found {0}")]
    InvalidBandwidth(f64),
    #[error("need at least 2 grid points, found {0}")]
    InvalidGrid(usize),
    #[error("need at least 1 histogram bin")]
    InvalidBins,
    #[error(transparent)]
    Lsq(#[from] LsqError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Control,
    Treated,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Control => "control",
            Group::Treated => "treated",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub treated: usize,
    pub control: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightedObservation {
    pub unit: String,
    pub period: i64,
    pub treated: bool,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightReport {
    pub n_treated: usize,
    pub n_treated_negative: usize,
    pub share_treated_negative: f64,
    pub n_control_positive: usize,
    pub histogram: Vec<HistogramBin>,
    pub per_observation: Vec<WeightedObservation>,
}

pub fn weight_report(fit: &TwfeFit) -> WeightReport {
    weight_report_with_bins(fit, DEFAULT_HISTOGRAM_BINS).expect("default bin count is positive")
}

/// Sign counts plus an equal-width histogram spanning `[min w, max w]`.
pub fn weight_report_with_bins(fit: &TwfeFit, bins: usize) -> Result<WeightReport, DiagnosticsError> {
    if bins == 0 {
        return Err(DiagnosticsError::InvalidBins);
    }
    let per_observation: Vec<WeightedObservation> = fit
        .sample
        .iter()
        .zip(&fit.weights)
        .map(|(row, &weight)| WeightedObservation {
            unit: row.unit.clone(),
            period: row.period,
            treated: row.treated,
            weight,
        })
        .collect();

    let n_treated = per_observation.iter().filter(|o| o.treated).count();
    let n_treated_negative = per_observation
        .iter()
        .filter(|o| o.treated && o.weight < NEGATIVE_WEIGHT_THRESHOLD)
        .count();
    let n_control_positive = per_observation
        .iter()
        .filter(|o| !o.treated && o.weight > -NEGATIVE_WEIGHT_THRESHOLD)
        .count();
    let share_treated_negative = if n_treated == 0 {
        0.0
    } else {
        n_treated_negative as f64 / n_treated as f64
    };

    let min = fit.weights.iter().copied().fold(f64::INFINITY, f64::min);
    let max = fit.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (max - min) / bins as f64;
    let mut histogram: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lower: min + i as f64 * width,
            upper: if i + 1 == bins {
                max
            } else {
                min + (i + 1) as f64 * width
            },
            treated: 0,
            control: 0,
        })
        .collect();
    for obs in &per_observation {
        let idx = if width > 0.0 {
            (((obs.weight - min) / width).floor() as usize).min(bins - 1)
        } else {
            0
        };
        if obs.treated {
            histogram[idx].treated += 1;
        } else {
            histogram[idx].control += 1;
        }
    }

    Ok(WeightReport {
        n_treated,
        n_treated_negative,
        share_treated_negative,
        n_control_positive,
        histogram,
        per_observation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", content = "weight", rename_all = "snake_case")]
pub enum GridCell {
    Missing,
    Untreated(f64),
    TreatedPositive(f64),
    TreatedNegative(f64),
}

impl GridCell {
    pub fn weight(self) -> Option<f64> {
        match self {
            GridCell::Missing => None,
            GridCell::Untreated(w) | GridCell::TreatedPositive(w) | GridCell::TreatedNegative(w) => Some(w),
        }
    }

    pub fn status(self) -> &'static str {
        match self {
            GridCell::Missing => "missing",
            GridCell::Untreated(_) => "untreated",
            GridCell::TreatedPositive(_) => "treated_positive",
            GridCell::TreatedNegative(_) => "treated_negative",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub unit: String,
    pub adoption: Adoption,
    pub cells: Vec<GridCell>,
}

/// Unit × period layout of the weights. Rows run from earliest adopter to
/// latest, never-treated last, ties broken by unit name.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightGrid {
    pub periods: Vec<i64>,
    pub rows: Vec<GridRow>,
}

impl WeightGrid {
    pub fn negative_treated_cells(&self) -> usize {
        self.negative_treated_cells_in_first_rows(self.rows.len())
    }

    pub fn negative_treated_cells_in_first_rows(&self, k: usize) -> usize {
        self.rows
            .iter()
            .take(k)
            .flat_map(|r| &r.cells)
            .filter(|c| matches!(c, GridCell::TreatedNegative(_)))
            .count()
    }

    /// Earliest period holding a negatively weighted treated cell.
    pub fn first_negative_treated_period(&self) -> Option<i64> {
        self.rows
            .iter()
            .flat_map(|r| r.cells.iter().zip(&self.periods))
            .filter(|(c, _)| matches!(c, GridCell::TreatedNegative(_)))
            .map(|(_, &p)| p)
            .min()
    }
}

pub fn weight_grid(fit: &TwfeFit, schedule: &AdoptionSchedule) -> Result<WeightGrid, DiagnosticsError> {
    let lookup = schedule.lookup();
    let mut units: Vec<(String, Adoption)> = fit
        .panel_units
        .iter()
        .map(|u| {
            lookup
                .get(u.as_str())
                .map(|a| (u.clone(), *a))
                .ok_or_else(|| DiagnosticsError::UnknownUnit(u.clone()))
        })
        .collect::<Result<_, _>>()?;
    units.sort_by(|(ua, a), (ub, b)| adoption_order(*a, *b).then_with(|| ua.cmp(ub)));

    let periods = fit.panel_periods.clone();
    let mut rows: Vec<GridRow> = units
        .into_iter()
        .map(|(unit, adoption)| GridRow {
            unit,
            adoption,
            cells: vec![GridCell::Missing; periods.len()],
        })
        .collect();
    for (row, &w) in fit.sample.iter().zip(&fit.weights) {
        let r = rows
            .iter()
            .position(|g| g.unit == row.unit)
            .expect("sample unit is a panel unit");
        let c = periods
            .binary_search(&row.period)
            .expect("sample period is a panel period");
        rows[r].cells[c] = match (row.treated, w < NEGATIVE_WEIGHT_THRESHOLD) {
            (false, _) => GridCell::Untreated(w),
            (true, false) => GridCell::TreatedPositive(w),
            (true, true) => GridCell::TreatedNegative(w),
        };
    }
    Ok(WeightGrid { periods, rows })
}

fn adoption_order(a: Adoption, b: Adoption) -> Ordering {
    match (a, b) {
        (Adoption::Period(x), Adoption::Period(y)) => x.cmp(&y),
        (Adoption::Period(_), Adoption::Never) => Ordering::Less,
        (Adoption::Never, Adoption::Period(_)) => Ordering::Greater,
        (Adoption::Never, Adoption::Never) => Ordering::Equal,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Coefficient {
    pub estimate: f64,
    pub se: f64,
    pub t_stat: Option<f64>,
    pub p_value: Option<f64>,
}

/// Regression of `Ỹ` on `{1, D̃, D, D·D̃}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HomogeneityTest {
    pub resid_treatment: Coefficient,
    pub treat_group: Coefficient,
    pub interaction: Coefficient,
    pub intercept: f64,
    pub n_obs: usize,
    pub dof: usize,
    pub inference: Inference,
}

fn check_group(group: Group, xs: &[f64]) -> Result<(), DiagnosticsError> {
    if xs.len() < 2 {
        return Err(DiagnosticsError::DegenerateGroup {
            group,
            reason: format!("{} observation(s)", xs.len()),
        });
    }
    // Spread is judged relative to the group's scale, with the solver's rank
    // tolerance, so rounding noise around a constant does not count.
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let spread = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>().sqrt();
    let scale = xs.iter().map(|x| x * x).sum::<f64>().sqrt();
    if spread.is_nan() || spread <= RANK_TOLERANCE * scale {
        return Err(DiagnosticsError::DegenerateGroup {
            group,
            reason: "residualized treatment does not vary".to_string(),
        });
    }
    Ok(())
}

fn split_groups(fit: &TwfeFit) -> [(Group, Vec<f64>, Vec<f64>); 2] {
    let mut control = (Group::Control, Vec::new(), Vec::new());
    let mut treated = (Group::Treated, Vec::new(), Vec::new());
    for ((row, &d), &y) in fit
        .sample
        .iter()
        .zip(&fit.residualized_treatment)
        .zip(&fit.residualized_outcome)
    {
        let g = if row.treated { &mut treated } else { &mut control };
        g.1.push(d);
        g.2.push(y);
    }
    [control, treated]
}

pub fn homogeneity_test(fit: &TwfeFit, inference: Inference) -> Result<HomogeneityTest, DiagnosticsError> {
    for (group, xs, _) in &split_groups(fit) {
        check_group(*group, xs)?;
    }
    let d = fit.treatment();
    let dtilde = &fit.residualized_treatment;
    let n = dtilde.len();
    let design = DesignMatrix::from_columns(vec![
        ("intercept".to_string(), vec![1.0; n]),
        ("resid_treatment".to_string(), dtilde.clone()),
        ("treat_group".to_string(), d.clone()),
        (
            "interaction".to_string(),
            d.iter().zip(dtilde).map(|(a, b)| a * b).collect(),
        ),
    ])?;
    let ols = solve_least_squares(&design, &fit.residualized_outcome)?;
    if !ols.dropped.is_empty() {
        return Err(DiagnosticsError::CollinearDesign(
            ols.dropped.iter().map(|&k| ols.labels[k].clone()).collect(),
        ));
    }
    let cov = match inference {
        Inference::Classical => classical_covariance(&ols)?,
        Inference::ClusterByUnit => {
            let units: Vec<&str> = fit.sample.iter().map(|r| r.unit.as_str()).collect();
            cluster_robust_covariance(&ols, &design, &units)?
        }
    };
    let coefficient = |k: usize| -> Result<Coefficient, DiagnosticsError> {
        let estimate = ols.coefficients[k];
        let se = cov.standard_error(k);
        let (t_stat, p_value) = if se > 0.0 {
            let (t, p) = t_test(estimate, se, cov.dof)?;
            (Some(t), Some(p))
        } else {
            (None, None)
        };
        Ok(Coefficient {
            estimate,
            se,
            t_stat,
            p_value,
        })
    };
    Ok(HomogeneityTest {
        resid_treatment: coefficient(1)?,
        treat_group: coefficient(2)?,
        interaction: coefficient(3)?,
        intercept: ols.coefficients[0],
        n_obs: n,
        dof: cov.dof,
        inference,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterPoint {
    pub unit: String,
    pub period: i64,
    pub dtilde: f64,
    pub ytilde: f64,
    pub treated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupLine {
    pub group: Group,
    pub slope: f64,
    pub intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothedCurve {
    pub group: Group,
    pub bandwidth: f64,
    /// `(x, smoothed y)` on the evaluation grid; points with too few
    /// in-window observations are omitted.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualScatter {
    pub points: Vec<ScatterPoint>,
    pub lines: Vec<GroupLine>,
    pub smoothed: Vec<SmoothedCurve>,
}

/// Per-group OLS lines and tricube local-linear curves of `Ỹ` on `D̃`.
///
/// The smoothing window is `bandwidth_fraction` times the group's `D̃` range.
pub fn residual_scatter(
    fit: &TwfeFit,
    bandwidth_fraction: f64,
    grid_points: usize,
) -> Result<ResidualScatter, DiagnosticsError> {
    if !(bandwidth_fraction > 0.0 && bandwidth_fraction <= 1.0) {
        return Err(DiagnosticsError::InvalidBandwidth(bandwidth_fraction));
    }
    if grid_points < 2 {
        return Err(DiagnosticsError::InvalidGrid(grid_points));
    }
    let groups = split_groups(fit);
    for (group, xs, _) in &groups {
        check_group(*group, xs)?;
    }

    let points = fit
        .sample
        .iter()
        .zip(&fit.residualized_treatment)
        .zip(&fit.residualized_outcome)
        .map(|((row, &dtilde), &ytilde)| ScatterPoint {
            unit: row.unit.clone(),
            period: row.period,
            dtilde,
            ytilde,
            treated: row.treated,
        })
        .collect();

    let mut lines = Vec::new();
    let mut smoothed = Vec::new();
    for (group, xs, ys) in &groups {
        let n = xs.len();
        let design = DesignMatrix::from_columns(vec![
            ("intercept".to_string(), vec![1.0; n]),
            ("dtilde".to_string(), xs.clone()),
        ])?;
        let ols = solve_least_squares(&design, ys)?;
        lines.push(GroupLine {
            group: *group,
            slope: ols.coefficients[1],
            intercept: ols.coefficients[0],
        });

        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bandwidth = bandwidth_fraction * (hi - lo);
        let step = (hi - lo) / (grid_points - 1) as f64;
        let curve = (0..grid_points)
            .map(|i| if i + 1 == grid_points { hi } else { lo + i as f64 * step })
            .filter_map(|x| local_linear(xs, ys, x, bandwidth).map(|y| (x, y)))
            .collect();
        smoothed.push(SmoothedCurve {
            group: *group,
            bandwidth,
            points: curve,
        });
    }
    Ok(ResidualScatter {
        points,
        lines,
        smoothed,
    })
}

fn tricube(u: f64) -> f64 {
    let a = u.abs();
    if a >= 1.0 {
        0.0
    } else {
        let c = 1.0 - a * a * a;
        c * c * c
    }
}

/// Tricube-weighted local linear fit evaluated at `x0`. `None` if fewer than
/// three observations fall strictly inside the window or the weighted design
/// is singular.
pub fn local_linear(xs: &[f64], ys: &[f64], x0: f64, bandwidth: f64) -> Option<f64> {
    if bandwidth.is_nan() || bandwidth <= 0.0 {
        return None;
    }
    let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut in_window = 0usize;
    for (&x, &y) in xs.iter().zip(ys) {
        let w = tricube((x - x0) / bandwidth);
        if w <= 0.0 {
            continue;
        }
        in_window += 1;
        let dx = x - x0;
        s0 += w;
        s1 += w * dx;
        s2 += w * dx * dx;
        t0 += w * y;
        t1 += w * dx * y;
    }
    if in_window < 3 {
        return None;
    }
    let det = s0 * s2 - s1 * s1;
    if det.is_nan() || det <= 1e-14 * s0 * s2 {
        return None;
    }
    Some((s2 * t0 - s1 * t1) / det)
}
