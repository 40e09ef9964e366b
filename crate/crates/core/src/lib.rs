//! Two-way fixed-effects (TWFE) difference-in-differences on staggered-adoption
//! panels, with the diagnostics needed to judge whether the pooled estimate can
//! be trusted:
//!
//! - [`twfe`] fits `Y_it = λ_i + γ_t + β·D_it + ε_it` by explicit dummy
//!   expansion and exposes the implicit per-observation weights
//!   `w_it = D̃_it / Σ D̃²`, where `D̃` is treatment residualized on both sets of
//!   fixed effects.
//! - [`diagnostics`] counts negatively weighted treated observations, lays the
//!   weights out on a unit × period grid, and tests treatment-effect
//!   homogeneity by comparing the `Ỹ`-on-`D̃` slope between treated and
//!   untreated observations.
//! - [`robustness`] re-fits on truncated samples (end year, post-adoption
//!   horizon, leave one unit out).
//! - [`synth`] generates noiseless or noisy panels with known effects, used to
//!   validate all of the above.

pub mod diagnostics;
pub mod lsq;
pub mod panel;
pub mod robustness;
pub mod synth;
pub mod twfe;

pub use diagnostics::{
    homogeneity_test, residual_scatter, weight_grid, weight_report, HomogeneityTest, ResidualScatter, WeightGrid,
    WeightReport,
};
pub use lsq::Inference;
pub use panel::{
    apply_adoption_schedule, load_panel_csv, validate, Adoption, AdoptionCoding, AdoptionSchedule, ColumnSchema,
    Observation, PanelDataset, ValidationReport,
};
pub use robustness::{leave_one_unit_out, sweep_end_year, sweep_post_horizon, RobustnessSweep, SweepPoint};
pub use synth::{generate_panel, true_effect_summary, EffectModel, SyntheticSpec};
pub use twfe::{fit_twfe, TwfeFit};

/// Weights below this value count as negative.
pub const NEGATIVE_WEIGHT_THRESHOLD: f64 = -1e-12;
