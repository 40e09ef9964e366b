#![allow(dead_code)]

use std::collections::BTreeMap;

use twfe_core::panel::Observation;
use twfe_core::{generate_panel, Adoption, EffectModel, PanelDataset, SyntheticSpec, TwfeFit};
use twfe_testkit::{random_design, RandomDesign};

pub fn spec_from_design(d: &RandomDesign, effect: EffectModel, noise_sd: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        units: d.units.clone(),
        periods: d.periods.clone(),
        baselines: d.units.iter().cloned().zip(d.baselines.iter().copied()).collect(),
        period_shocks: d
            .periods
            .iter()
            .copied()
            .zip(d.shocks.iter().copied())
            .collect::<BTreeMap<_, _>>(),
        adoption: d
            .units
            .iter()
            .cloned()
            .zip(d.adoption.iter().map(|a| a.map_or(Adoption::Never, Adoption::Period)))
            .collect(),
        effect,
        noise_sd,
        seed,
    }
}

/// Blanks the outcomes of the design's missing cells.
pub fn with_missing(ds: &PanelDataset, d: &RandomDesign) -> PanelDataset {
    let obs = ds
        .observations()
        .iter()
        .map(|o| {
            let u = d.units.iter().position(|x| *x == o.unit).unwrap();
            let t = d.periods.iter().position(|&p| p == o.period).unwrap();
            let outcome = if d.missing.contains(&(u, t)) { None } else { o.outcome };
            Observation::new(o.unit.clone(), o.period, outcome, o.treated)
        })
        .collect();
    PanelDataset::new(obs).unwrap()
}

/// Noisy constant-effect panel with optional missingness.
pub fn noisy_panel(seed: u64, missing_rate: f64) -> (RandomDesign, PanelDataset) {
    let d = random_design(seed, missing_rate);
    let spec = spec_from_design(&d, EffectModel::Constant { delta: d.delta }, 1.0, seed);
    let ds = with_missing(&generate_panel(&spec).unwrap(), &d);
    (d, ds)
}

/// Noiseless constant-effect spec.
pub fn noiseless_spec(seed: u64) -> (RandomDesign, SyntheticSpec) {
    let d = random_design(seed, 0.0);
    let spec = spec_from_design(&d, EffectModel::Constant { delta: d.delta }, 0.0, seed);
    (d, spec)
}

/// Integer codes for the fit's sample rows, in first-appearance and sorted order.
pub fn sample_codes(fit: &TwfeFit) -> (Vec<usize>, Vec<usize>) {
    let mut units: Vec<&str> = Vec::new();
    for r in &fit.sample {
        if !units.contains(&r.unit.as_str()) {
            units.push(&r.unit);
        }
    }
    let mut periods: Vec<i64> = fit.sample.iter().map(|r| r.period).collect();
    periods.sort_unstable();
    periods.dedup();
    let u = fit
        .sample
        .iter()
        .map(|r| units.iter().position(|x| *x == r.unit).unwrap())
        .collect();
    let t = fit
        .sample
        .iter()
        .map(|r| periods.binary_search(&r.period).unwrap())
        .collect();
    (u, t)
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}
