mod common;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twfe_core::panel::Observation;
use twfe_core::twfe::{
    balanced_weights_closed_form, beta_from_weights, fwl_weights, residualize_outcome, residualize_treatment, TwfeError,
};
use twfe_core::{fit_twfe, generate_panel, EffectModel, Inference, PanelDataset, TwfeFit};
use twfe_testkit::{cluster_sandwich, dummy_design, dummy_ols_beta, dummy_residuals, random_design};

fn fit(ds: &PanelDataset) -> Option<TwfeFit> {
    fit_twfe(ds, Inference::Classical).ok()
}

#[test]
fn beta_matches_dummy_expansion_oracle() {
    let mut checked = 0;
    for seed in 0..120 {
        let (_, ds) = noisy_panel(seed, 0.15);
        let Some(f) = fit(&ds) else { continue };
        let (u, t) = sample_codes(&f);
        let oracle = dummy_ols_beta(&u, &t, &f.treatment(), &f.outcomes());
        assert!(rel_close(f.beta, oracle, 1e-8), "seed {seed}: {} vs {oracle}", f.beta);
        checked += 1;
    }
    assert!(checked >= 100, "only {checked} feasible panels");
}

#[test]
fn residualized_treatment_matches_dummy_residuals() {
    for seed in 0..60 {
        let (_, ds) = noisy_panel(seed, 0.1);
        let Some(f) = fit(&ds) else { continue };
        let (u, t) = sample_codes(&f);
        let oracle = dummy_residuals(&u, &t, &f.treatment());
        for (a, b) in f.residualized_treatment.iter().zip(&oracle) {
            assert!(close(*a, *b, 1e-10), "seed {seed}");
        }
        let oracle_y = dummy_residuals(&u, &t, &f.outcomes());
        for (a, b) in f.residualized_outcome.iter().zip(&oracle_y) {
            assert!(close(*a, *b, 1e-8 * (1.0 + b.abs())), "seed {seed}");
        }
    }
}

#[test]
fn fwl_identity_holds_on_mixed_panels() {
    for seed in 0..200 {
        let (_, ds) = noisy_panel(seed, if seed % 2 == 0 { 0.0 } else { 0.2 });
        let Some(f) = fit(&ds) else { continue };
        let w = fwl_weights(&residualize_treatment(&ds).unwrap()).unwrap();
        let beta = beta_from_weights(&w, &f.outcomes()).unwrap();
        assert!((beta - f.beta).abs() <= 1e-8 * (1.0 + f.beta.abs()), "seed {seed}");
        let sum_w: f64 = f.weights.iter().sum();
        assert!(sum_w.abs() <= 1e-10, "seed {seed}: Σw = {sum_w}");
        let wd: f64 = f
            .weights
            .iter()
            .zip(&f.residualized_treatment)
            .map(|(a, b)| a * b)
            .sum();
        assert!((wd - 1.0).abs() <= 1e-12, "seed {seed}: Σ w·D̃ = {wd}");
        let mean_d: f64 = f.residualized_treatment.iter().sum::<f64>() / f.n_obs as f64;
        assert!(mean_d.abs() <= 1e-12, "seed {seed}");
    }
}

#[test]
fn closed_form_matches_regression_on_balanced_panels() {
    for seed in 0..100 {
        let (_, ds) = noisy_panel(1000 + seed, 0.0);
        assert!(ds.is_balanced());
        let cf = balanced_weights_closed_form(&ds).unwrap();
        // Common adoption timing makes D a period effect: the regression
        // refuses, and the residual is zero.
        let reg = match residualize_treatment(&ds) {
            Ok(r) => r,
            Err(TwfeError::CollinearTreatment { .. }) => vec![0.0; cf.len()],
            Err(e) => panic!("seed {seed}: {e}"),
        };
        let err = cf.iter().zip(&reg).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-10, "seed {seed}: {err}");
    }
}

#[test]
fn clustered_standard_error_matches_sandwich_oracle() {
    for seed in 0..40 {
        let (_, ds) = noisy_panel(seed, 0.1);
        let Ok(f) = fit_twfe(&ds, Inference::ClusterByUnit) else {
            continue;
        };
        let (u, t) = sample_codes(&f);
        let d = f.treatment();
        let x = dummy_design(&u, &t, &[&d]);
        let (n, k) = x.shape();
        let g = f.clusters as f64;
        let scale = g / (g - 1.0) * (n as f64 - 1.0) / (n - k) as f64;
        let oracle = cluster_sandwich(&x, &f.outcomes(), &u, scale)[(k - 1, k - 1)].sqrt();
        let se = f.se.unwrap();
        assert!(rel_close(se, oracle, 1e-8), "seed {seed}: {se} vs {oracle}");
        assert_eq!(f.dof, f.clusters - 1);
    }
}

#[test]
fn noiseless_constant_effect_is_recovered_exactly() {
    for seed in 0..50 {
        let (d, spec) = noiseless_spec(seed);
        let ds = generate_panel(&spec).unwrap();
        let Some(f) = fit(&ds) else { continue };
        assert!(close(f.beta, d.delta, 1e-8), "seed {seed}: {} vs {}", f.beta, d.delta);
        let ytilde = residualize_outcome(&ds).unwrap();
        for (y, dt) in ytilde.iter().zip(&f.residualized_treatment) {
            assert!(close(*y, d.delta * dt, 1e-10), "seed {seed}");
        }
    }
}

#[test]
fn zero_effect_gives_zero_beta() {
    let d = random_design(5, 0.0);
    let spec = spec_from_design(&d, EffectModel::Constant { delta: 0.0 }, 0.0, 0);
    let f = fit(&generate_panel(&spec).unwrap()).unwrap();
    assert!(f.beta.abs() <= 1e-10);
}

#[test]
fn delta_three_is_recovered() {
    let d = random_design(11, 0.0);
    let spec = spec_from_design(&d, EffectModel::Constant { delta: 3.0 }, 0.0, 0);
    let f = fit(&generate_panel(&spec).unwrap()).unwrap();
    assert!(close(f.beta, 3.0, 1e-8));
}

fn shifted(ds: &PanelDataset, by: impl Fn(&Observation) -> f64) -> PanelDataset {
    ds.map_outcomes(|o| o.outcome.map(|y| y + by(o))).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn period_shock_leaves_beta_unchanged(seed in 0u64..10_000, pick in any::<prop::sample::Index>(), c in -1e3f64..1e3) {
        let (_, ds) = noisy_panel(seed, 0.15);
        let base = fit(&ds);
        prop_assume!(base.is_some());
        let base = base.unwrap();
        let period = ds.periods()[pick.index(ds.periods().len())];
        let moved = fit(&shifted(&ds, |o| if o.period == period { c } else { 0.0 })).unwrap();
        prop_assert!(close(moved.beta, base.beta, 1e-8 * (1.0 + base.beta.abs())));
    }

    #[test]
    fn unit_shift_leaves_beta_unchanged(seed in 0u64..10_000, pick in any::<prop::sample::Index>(), c in -1e3f64..1e3) {
        let (_, ds) = noisy_panel(seed, 0.15);
        let base = fit(&ds);
        prop_assume!(base.is_some());
        let base = base.unwrap();
        let unit = ds.units()[pick.index(ds.units().len())].clone();
        let moved = fit(&shifted(&ds, |o| if o.unit == unit { c } else { 0.0 })).unwrap();
        prop_assert!(close(moved.beta, base.beta, 1e-8 * (1.0 + base.beta.abs())));
    }

    #[test]
    fn affine_outcome_transform_scales_beta(seed in 0u64..10_000, a in -20.0f64..20.0, b in -100.0f64..100.0) {
        prop_assume!(a.abs() > 1e-2);
        let (_, ds) = noisy_panel(seed, 0.15);
        let base = fit(&ds);
        prop_assume!(base.is_some());
        let base = base.unwrap();
        let moved = fit(&ds.map_outcomes(|o| o.outcome.map(|y| a * y + b)).unwrap()).unwrap();
        prop_assert!(rel_close(moved.beta, a * base.beta, 1e-10));
    }

    #[test]
    fn row_order_does_not_matter(seed in 0u64..10_000, shuffle_seed in any::<u64>()) {
        let (_, ds) = noisy_panel(seed, 0.15);
        let base = fit_twfe(&ds, Inference::ClusterByUnit);
        prop_assume!(base.is_ok());
        let base = base.unwrap();
        let mut obs = ds.observations().to_vec();
        obs.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let permuted = fit_twfe(&PanelDataset::new(obs).unwrap(), Inference::ClusterByUnit).unwrap();
        prop_assert!(rel_close(permuted.beta, base.beta, 1e-10));
        prop_assert!(rel_close(permuted.se.unwrap(), base.se.unwrap(), 1e-8));
        for (row, w) in permuted.sample.iter().zip(&permuted.weights) {
            let i = base.sample.iter().position(|r| r.unit == row.unit && r.period == row.period).unwrap();
            prop_assert!(close(*w, base.weights[i], 1e-10));
        }
    }
}
