//! Re-estimation on restricted samples. Under a constant treatment effect
//! and common trends none of these restrictions should move the expected
//! estimate, so large movements point to heterogeneity.

use serde::Serialize;
use thiserror::Error;

use crate::diagnostics::weight_report;
use crate::lsq::{t_critical, Inference, LsqError};
use crate::panel::{Adoption, AdoptionSchedule, PanelDataset};
use crate::twfe::{fit_twfe, TwfeError, TwfeFit};

#[derive(Debug, Error, PartialEq)]
pub enum RobustnessError {
    #[error("no sweep point could be estimated")]
    NoFeasiblePoint,
    #[error("first end period {first} is after last end period {last}")]
    InvalidRange { first: i64, last: i64 },
    #[error("no horizons given")]
    EmptyHorizons,
    #[error("leave-one-out needs at least 3 units, found {0}")]
    TooFewUnits(usize),
    #[error("unit `{0}` is not in the adoption schedule")]
    UnknownUnit(String),
    #[error("confidence level must lie in (0, 1), found {0}")]
    InvalidLevel(f64),
    #[error("full-sample fit failed: {0}")]
    Baseline(TwfeError),
    #[error(transparent)]
    Lsq(#[from] LsqError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    EndYear,
    PostHorizon,
    LeaveOneOut,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub inference: Inference,
    /// Two-sided confidence level for the intervals.
    pub level: f64,
}

impl SweepOptions {
    pub fn new(inference: Inference) -> Self {
        Self { inference, level: 0.95 }
    }

    pub fn with_level(mut self, level: f64) -> Self {
        self.level = level;
        self
    }
}

/// One re-estimation. The interval is absent when the fit has no standard error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub label: String,
    pub beta: f64,
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub share_negative_treated: f64,
    pub n_obs: usize,
    pub n_treated: usize,
}

impl SweepPoint {
    pub fn from_fit(label: impl Into<String>, fit: &TwfeFit, level: f64) -> Result<Self, RobustnessError> {
        let (ci_low, ci_high) = match fit.se {
            Some(se) if fit.dof > 0 => {
                let half = t_critical(level, fit.dof)? * se;
                (Some(fit.beta - half), Some(fit.beta + half))
            }
            _ => (None, None),
        };
        Ok(Self {
            label: label.into(),
            beta: fit.beta,
            se: fit.se,
            ci_low,
            ci_high,
            share_negative_treated: weight_report(fit).share_treated_negative,
            n_obs: fit.n_obs,
            n_treated: fit.n_treated,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedPoint {
    pub label: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessSweep {
    pub kind: SweepKind,
    pub level: f64,
    pub baseline: SweepPoint,
    pub points: Vec<SweepPoint>,
    pub skipped: Vec<SkippedPoint>,
}

fn run_sweep<I>(
    kind: SweepKind,
    dataset: &PanelDataset,
    options: &SweepOptions,
    subsamples: I,
) -> Result<RobustnessSweep, RobustnessError>
where
    I: IntoIterator<Item = (String, PanelDataset)>,
{
    if !(options.level > 0.0 && options.level < 1.0) {
        return Err(RobustnessError::InvalidLevel(options.level));
    }
    let full = fit_twfe(dataset, options.inference).map_err(RobustnessError::Baseline)?;
    let baseline = SweepPoint::from_fit("baseline", &full, options.level)?;

    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for (label, subsample) in subsamples {
        match fit_twfe(&subsample, options.inference) {
            Ok(fit) => points.push(SweepPoint::from_fit(label, &fit, options.level)?),
            Err(e) => skipped.push(SkippedPoint {
                label,
                reason: e.to_string(),
            }),
        }
    }
    if points.is_empty() {
        return Err(RobustnessError::NoFeasiblePoint);
    }
    Ok(RobustnessSweep {
        kind,
        level: options.level,
        baseline,
        points,
        skipped,
    })
}

/// One fit per end period `e` in `first_end..=last_end`, using periods `<= e`.
pub fn sweep_end_year(
    dataset: &PanelDataset,
    first_end: i64,
    last_end: i64,
    options: &SweepOptions,
) -> Result<RobustnessSweep, RobustnessError> {
    if first_end > last_end {
        return Err(RobustnessError::InvalidRange {
            first: first_end,
            last: last_end,
        });
    }
    let subsamples = (first_end..=last_end).map(|end| (end.to_string(), dataset.filter(|o| o.period <= end)));
    run_sweep(SweepKind::EndYear, dataset, options, subsamples)
}

/// One fit per horizon `h`: each ever-treated unit keeps periods up to its
/// adoption period plus `h`; never-treated units keep everything.
pub fn sweep_post_horizon(
    dataset: &PanelDataset,
    schedule: &AdoptionSchedule,
    horizons: &[u32],
    options: &SweepOptions,
) -> Result<RobustnessSweep, RobustnessError> {
    if horizons.is_empty() {
        return Err(RobustnessError::EmptyHorizons);
    }
    let lookup = schedule.lookup();
    if let Some(unit) = dataset.units().iter().find(|u| !lookup.contains_key(u.as_str())) {
        return Err(RobustnessError::UnknownUnit(unit.clone()));
    }
    let subsamples = horizons.iter().map(|&h| {
        let subsample = dataset.filter(|o| match lookup[o.unit.as_str()] {
            Adoption::Never => true,
            Adoption::Period(a) => o.period <= a + i64::from(h),
        });
        (h.to_string(), subsample)
    });
    run_sweep(SweepKind::PostHorizon, dataset, options, subsamples)
}

/// One fit per unit with that unit removed, ordered by first treated period
/// (never-treated last, ties by unit name).
pub fn leave_one_unit_out(dataset: &PanelDataset, options: &SweepOptions) -> Result<RobustnessSweep, RobustnessError> {
    let n_units = dataset.units().len();
    if n_units < 3 {
        return Err(RobustnessError::TooFewUnits(n_units));
    }
    let mut order = dataset.first_treated_periods();
    order.sort_by(|(ua, a), (ub, b)| {
        let key = |p: &Option<i64>| (p.is_none(), p.unwrap_or(0));
        key(a).cmp(&key(b)).then_with(|| ua.cmp(ub))
    });
    let subsamples = order.into_iter().map(|(unit, _)| {
        let subsample = dataset.filter(|o| o.unit != unit);
        (unit, subsample)
    });
    run_sweep(SweepKind::LeaveOneOut, dataset, options, subsamples)
}
