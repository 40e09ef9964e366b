//! Synthetic staggered-adoption panels with known treatment effects.
//!
//! Outcomes follow `Y_it = μ_i + Σ_{τ ≤ t} η_τ + effect(i, t)·D_it + σ·z_it`.
//! The first period's shock is zero, so `μ_i` is unit `i`'s untreated outcome
//! in the first period. The noise term is an extension of the noiseless
//! process and is off when `σ = 0`.
//!
//! Noise draws come from ChaCha20 (`rand_chacha::ChaCha20Rng::seed_from_u64`)
//! mapped through `rand_distr::StandardNormal`, one draw per cell in unit-major
//! order, drawn even when `σ = 0`. The stream is fixed for a given seed and
//! the pinned dependency versions.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{Adoption, AdoptionCoding, AdoptionSchedule, Observation, PanelDataset};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

fn invalid(msg: impl Into<String>) -> SynthError {
    SynthError::InvalidSpec(msg.into())
}

/// Treatment effect on a treated cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EffectModel {
    Constant {
        delta: f64,
    },
    ByUnit {
        effects: BTreeMap<String, f64>,
    },
    /// `intercept + slope · e` at event time `e = t − adoption ≥ 0`.
    EventTime {
        intercept: f64,
        slope: f64,
    },
}

impl EffectModel {
    fn effect(&self, unit: &str, event_time: i64) -> Option<f64> {
        match self {
            EffectModel::Constant { delta } => Some(*delta),
            EffectModel::ByUnit { effects } => effects.get(unit).copied(),
            EffectModel::EventTime { intercept, slope } => Some(intercept + slope * event_time as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub units: Vec<String>,
    pub periods: Vec<i64>,
    /// `μ_i` per unit.
    pub baselines: BTreeMap<String, f64>,
    /// `η_t` per period; the earliest period's shock must be zero.
    pub period_shocks: BTreeMap<i64, f64>,
    pub adoption: BTreeMap<String, Adoption>,
    pub effect: EffectModel,
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn schedule(&self) -> AdoptionSchedule {
        AdoptionSchedule::from_entries(self.units.iter().map(|u| (u.clone(), self.adoption[u])))
            .expect("validated specs have unique units")
    }

    fn sorted_periods(&self) -> Vec<i64> {
        let mut periods = self.periods.clone();
        periods.sort_unstable();
        periods
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.units.len() < 2 {
            return Err(invalid("need at least 2 units"));
        }
        if self.periods.len() < 2 {
            return Err(invalid("need at least 2 periods"));
        }
        let mut units = self.units.clone();
        units.sort();
        units.dedup();
        if units.len() != self.units.len() {
            return Err(invalid("unit names must be unique"));
        }
        let periods = self.sorted_periods();
        if periods.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("periods must be unique"));
        }
        for unit in &self.units {
            match self.baselines.get(unit) {
                None => return Err(invalid(format!("no baseline for unit `{unit}`"))),
                Some(mu) if !mu.is_finite() => return Err(invalid(format!("non-finite baseline for unit `{unit}`"))),
                _ => {}
            }
            let adoption = self
                .adoption
                .get(unit)
                .ok_or_else(|| invalid(format!("no adoption entry for unit `{unit}`")))?;
            if let (EffectModel::ByUnit { effects }, Adoption::Period(_)) = (&self.effect, adoption) {
                if !effects.contains_key(unit) {
                    return Err(invalid(format!("no effect for treated unit `{unit}`")));
                }
            }
        }
        for period in &periods {
            match self.period_shocks.get(period) {
                None => return Err(invalid(format!("no shock for period {period}"))),
                Some(eta) if !eta.is_finite() => return Err(invalid(format!("non-finite shock for period {period}"))),
                _ => {}
            }
        }
        if self.period_shocks[&periods[0]] != 0.0 {
            return Err(invalid(format!(
                "shock in the first period ({}) must be zero",
                periods[0]
            )));
        }
        let effect_ok = match &self.effect {
            EffectModel::Constant { delta } => delta.is_finite(),
            EffectModel::ByUnit { effects } => effects.values().all(|v| v.is_finite()),
            EffectModel::EventTime { intercept, slope } => intercept.is_finite() && slope.is_finite(),
        };
        if !effect_ok {
            return Err(invalid("non-finite effect parameter"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(invalid(format!(
                "noise_sd must be finite and >= 0, found {}",
                self.noise_sd
            )));
        }
        Ok(())
    }

    /// Treated cells with their true effect, in generation order.
    fn treated_cells(&self) -> Vec<(String, i64, f64)> {
        let coding = AdoptionCoding::default();
        let mut out = Vec::new();
        for unit in &self.units {
            let adoption = self.adoption[unit];
            for &t in &self.sorted_periods() {
                if let (true, Adoption::Period(a)) = (coding.is_treated(t, adoption), adoption) {
                    let effect = self.effect.effect(unit, t - a).expect("validated");
                    out.push((unit.clone(), t, effect));
                }
            }
        }
        out
    }
}

/// Balanced panel drawn from `spec`; deterministic given the seed.
pub fn generate_panel(spec: &SyntheticSpec) -> Result<PanelDataset, SynthError> {
    spec.validate()?;
    let coding = AdoptionCoding::default();
    let periods = spec.sorted_periods();
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let mut observations = Vec::with_capacity(spec.units.len() * periods.len());
    for unit in &spec.units {
        let mu = spec.baselines[unit];
        let adoption = spec.adoption[unit];
        let mut trend = 0.0;
        for &t in &periods {
            trend += spec.period_shocks[&t];
            let z: f64 = StandardNormal.sample(&mut rng);
            let treated = coding.is_treated(t, adoption);
            let effect = match adoption {
                Adoption::Period(a) if treated => spec.effect.effect(unit, t - a).expect("validated"),
                _ => 0.0,
            };
            let y = mu + trend + effect + spec.noise_sd * z;
            observations.push(Observation::new(unit.clone(), t, Some(y), treated));
        }
    }
    Ok(PanelDataset::new(observations).expect("synthetic keys are unique and finite"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EffectSummary {
    pub min: f64,
    pub max: f64,
    /// Unweighted mean over treated cells.
    pub mean: f64,
    pub n_treated_cells: usize,
}

/// Exact range and mean of the true effect over treated cells.
pub fn true_effect_summary(spec: &SyntheticSpec) -> Result<EffectSummary, SynthError> {
    spec.validate()?;
    let cells = spec.treated_cells();
    if cells.is_empty() {
        return Err(invalid("spec has no treated cells"));
    }
    let effects = cells.iter().map(|c| c.2);
    let min = effects.clone().fold(f64::INFINITY, f64::min);
    let max = effects.clone().fold(f64::NEG_INFINITY, f64::max);
    let mean = effects.sum::<f64>() / cells.len() as f64;
    Ok(EffectSummary {
        min,
        max,
        mean,
        n_treated_cells: cells.len(),
    })
}
