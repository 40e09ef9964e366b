//! Reference computations for tests. Everything here takes the slow, obvious
//! route (normal equations, explicit dummy matrices, numerical quadrature) and
//! shares no code with the estimators it checks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Solves `(XᵀX) b = Xᵀy` through an explicit pseudo-inverse of `XᵀX`.
pub fn normal_equations(x: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
    let xtx = x.transpose() * x;
    let xty = x.transpose() * DVector::from_column_slice(y);
    let pinv = xtx.pseudo_inverse(1e-10).expect("pseudo-inverse");
    (pinv * xty).iter().copied().collect()
}

/// Full dummy design: intercept, units `1..n_units`, periods `1..n_periods`,
/// then any extra columns.
pub fn dummy_design(unit: &[usize], period: &[usize], extra: &[&[f64]]) -> DMatrix<f64> {
    let n = unit.len();
    let n_units = unit.iter().max().map_or(0, |m| m + 1);
    let n_periods = period.iter().max().map_or(0, |m| m + 1);
    let k = 1 + n_units.saturating_sub(1) + n_periods.saturating_sub(1) + extra.len();
    let mut x = DMatrix::zeros(n, k);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        if unit[i] > 0 {
            x[(i, unit[i])] = 1.0;
        }
        if period[i] > 0 {
            x[(i, n_units - 1 + period[i])] = 1.0;
        }
        for (e, col) in extra.iter().enumerate() {
            x[(i, k - extra.len() + e)] = col[i];
        }
    }
    x
}

/// Treatment coefficient from OLS of `y` on the full dummy design plus `d`.
pub fn dummy_ols_beta(unit: &[usize], period: &[usize], d: &[f64], y: &[f64]) -> f64 {
    let x = dummy_design(unit, period, &[d]);
    *normal_equations(&x, y).last().unwrap()
}

/// Residuals of `v` on unit and period dummies.
pub fn dummy_residuals(unit: &[usize], period: &[usize], v: &[f64]) -> Vec<f64> {
    let x = dummy_design(unit, period, &[]);
    let b = DVector::from_vec(normal_equations(&x, v));
    let fitted = &x * b;
    v.iter().zip(fitted.iter()).map(|(a, f)| a - f).collect()
}

/// `σ̂² (XᵀX)⁻¹` from the textbook formula.
pub fn classical_covariance(x: &DMatrix<f64>, y: &[f64]) -> DMatrix<f64> {
    let (n, k) = x.shape();
    let b = DVector::from_vec(normal_equations(x, y));
    let resid = DVector::from_column_slice(y) - x * b;
    let sigma2 = resid.norm_squared() / (n - k) as f64;
    (x.transpose() * x).try_inverse().expect("nonsingular") * sigma2
}

/// Heteroskedasticity-robust sandwich `(XᵀX)⁻¹ Σ_i u_i² x_i x_iᵀ (XᵀX)⁻¹`
/// multiplied by `scale`.
pub fn hc_sandwich(x: &DMatrix<f64>, y: &[f64], scale: f64) -> DMatrix<f64> {
    let (n, k) = x.shape();
    let b = DVector::from_vec(normal_equations(x, y));
    let resid = DVector::from_column_slice(y) - x * &b;
    let bread = (x.transpose() * x).try_inverse().expect("nonsingular");
    let mut meat = DMatrix::zeros(k, k);
    for i in 0..n {
        let row = x.row(i).transpose();
        meat += &row * row.transpose() * (resid[i] * resid[i]);
    }
    &bread * meat * &bread * scale
}

/// Cluster sandwich `(XᵀX)⁻¹ Σ_g (X_gᵀu_g)(X_gᵀu_g)ᵀ (XᵀX)⁻¹` times `scale`,
/// accumulated cluster by cluster with an explicit inverse.
pub fn cluster_sandwich(x: &DMatrix<f64>, y: &[f64], cluster: &[usize], scale: f64) -> DMatrix<f64> {
    let k = x.ncols();
    let b = DVector::from_vec(normal_equations(x, y));
    let resid = DVector::from_column_slice(y) - x * &b;
    let bread = (x.transpose() * x).try_inverse().expect("nonsingular");
    let n_clusters = cluster.iter().max().map_or(0, |m| m + 1);
    let mut meat = DMatrix::zeros(k, k);
    for g in 0..n_clusters {
        let mut score = DVector::zeros(k);
        for (i, &c) in cluster.iter().enumerate() {
            if c == g {
                score += x.row(i).transpose() * resid[i];
            }
        }
        meat += &score * score.transpose();
    }
    &bread * meat * &bread * scale
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7, n = 9.
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Student-t density.
pub fn t_density(x: f64, dof: f64) -> f64 {
    let log_c = ln_gamma((dof + 1.0) / 2.0) - ln_gamma(dof / 2.0) - 0.5 * (dof * std::f64::consts::PI).ln();
    (log_c - (dof + 1.0) / 2.0 * (1.0 + x * x / dof).ln()).exp()
}

/// Two-sided p-value `2 ∫_{|t|}^∞ f(x) dx`, computed as `1 − 2 ∫_0^{|t|} f`
/// with composite Simpson's rule.
pub fn t_two_sided_p_quadrature(t: f64, dof: f64) -> f64 {
    let a = t.abs();
    let n = 20_000;
    let h = a / n as f64;
    let mut s = t_density(0.0, dof) + t_density(a, dof);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * t_density(i as f64 * h, dof);
    }
    1.0 - 2.0 * s * h / 3.0
}

/// A random staggered-adoption layout in plain types.
#[derive(Debug, Clone)]
pub struct RandomDesign {
    pub units: Vec<String>,
    pub periods: Vec<i64>,
    /// First treated period per unit, `None` for never treated.
    pub adoption: Vec<Option<i64>>,
    pub baselines: Vec<f64>,
    /// Per-period shocks; the first is zero.
    pub shocks: Vec<f64>,
    /// Treatment effect scale drawn for the design.
    pub delta: f64,
    /// `(unit index, period index)` cells whose outcome should be dropped.
    pub missing: Vec<(usize, usize)>,
}

/// Draws a design with 3–8 units, 4–12 periods starting at 2000, adoption
/// periods after the first period (or never), and, when `missing_rate > 0`,
/// randomly missing outcomes. At least one unit is treated and at least one
/// untreated cell exists in every period.
pub fn random_design(seed: u64, missing_rate: f64) -> RandomDesign {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_units = rng.random_range(3..=8);
    let n_periods = rng.random_range(4..=12);
    let periods: Vec<i64> = (0..n_periods).map(|t| 2000 + t as i64).collect();
    let mut adoption: Vec<Option<i64>> = (0..n_units)
        .map(|_| {
            if rng.random_bool(0.25) {
                None
            } else {
                Some(periods[rng.random_range(1..n_periods)])
            }
        })
        .collect();
    if adoption.iter().all(|a| a.is_none()) {
        adoption[0] = Some(periods[1]);
    }
    let units = (0..n_units).map(|i| format!("u{i:02}")).collect();
    let baselines = (0..n_units).map(|_| rng.random_range(-50.0..50.0)).collect();
    let shocks = (0..n_periods)
        .map(|t| if t == 0 { 0.0 } else { rng.random_range(-5.0..5.0) })
        .collect();
    let delta = rng.random_range(-10.0..10.0);
    let mut missing = Vec::new();
    if missing_rate > 0.0 {
        for u in 0..n_units {
            for t in 0..n_periods {
                if rng.random_bool(missing_rate) {
                    missing.push((u, t));
                }
            }
        }
    }
    RandomDesign {
        units,
        periods,
        adoption,
        baselines,
        shocks,
        delta,
        missing,
    }
}
