use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use pseudopanel::diagnostics::het_test;
use pseudopanel::estimators::{estimate, EstimatorOptions, TransformKind as K};
use pseudopanel::mc::{generate, run_study, DgpConfig, StudySpec, MEASUREMENT, X, Y};
use pseudopanel::regress::{ols, CovarianceKind, Design, ModelSpec};

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

#[test]
fn measurement_error_variance_matches_reliability() {
    let cfg = DgpConfig {
        reliability: 0.5,
        seed: 21,
        ..DgpConfig::default()
    };
    let t = generate(&cfg).unwrap();
    let v = variance(t.column(MEASUREMENT).unwrap());
    assert!((v / cfg.sigma_m2() - 1.0).abs() < 0.05, "{v} vs {}", cfg.sigma_m2());
}

#[test]
fn no_endogeneity_no_noise_is_unbiased() {
    let cfg = DgpConfig {
        n_units: 1000,
        seed: 22,
        ..DgpConfig::default()
    };
    let study = StudySpec {
        estimators: vec![K::Between, K::Within, K::FirstDifference],
        iv: vec![false],
        ..StudySpec::default()
    };
    let r = run_study(&cfg, &study, 60).unwrap();
    for row in &r.rows {
        assert!(row.bias.abs() < 4.0 * row.mc_se + 0.005, "{:?} bias {}", row.estimator, row.bias);
    }
}

#[test]
fn pooled_ols_hits_its_probability_limit() {
    let cfg = DgpConfig {
        reliability: 0.6,
        delta_endog: -0.2,
        seed: 23,
        ..DgpConfig::default()
    };
    let t = generate(&cfg).unwrap();
    let fit = ols(&Design::from_table(&ModelSpec::new(Y, [X]), &t).unwrap(), CovarianceKind::Homoscedastic).unwrap();
    let b = fit.coef_of(X).unwrap();
    assert!((b - cfg.pooled_ols_plim()).abs() < 0.03, "{b} vs {}", cfg.pooled_ols_plim());
}

#[test]
fn grouping_reduces_attenuation() {
    let cfg = DgpConfig {
        reliability: 0.5,
        seed: 24,
        ..DgpConfig::default()
    };
    let unit = StudySpec {
        estimators: vec![K::Within],
        iv: vec![false],
        ..StudySpec::default()
    };
    let grouped = StudySpec {
        grouped: true,
        ..unit.clone()
    };
    let u = run_study(&cfg, &unit, 30).unwrap().rows[0].mean;
    let g = run_study(&cfg, &grouped, 30).unwrap().rows[0].mean;
    assert!(u < 0.3, "unit-level within {u}");
    assert!((g - 0.4).abs() < (u - 0.4).abs(), "grouped {g} vs unit {u}");
}

#[test]
fn grouped_within_tracks_panel_within_without_noise() {
    let cfg = DgpConfig {
        seed: 25,
        ..DgpConfig::default()
    };
    let unit = StudySpec {
        estimators: vec![K::Within],
        iv: vec![false],
        ..StudySpec::default()
    };
    let grouped = StudySpec {
        grouped: true,
        ..unit.clone()
    };
    let u = run_study(&cfg, &unit, 30).unwrap().rows[0].clone();
    let g = run_study(&cfg, &grouped, 30).unwrap().rows[0].clone();
    assert!((u.mean - g.mean).abs() < 4.0 * (u.mc_se.powi(2) + g.mc_se.powi(2)).sqrt() + 0.01);
}

#[test]
fn within_is_deterministic_per_seed() {
    let cfg = DgpConfig {
        n_units: 200,
        n_cells: 10,
        seed: 26,
        ..DgpConfig::default()
    };
    let spec = ModelSpec::new(Y, [X]);
    let a = estimate(K::Within, &spec, &generate(&cfg).unwrap(), &EstimatorOptions::default()).unwrap();
    let b = estimate(K::Within, &spec, &generate(&cfg).unwrap(), &EstimatorOptions::default()).unwrap();
    assert_eq!(a.coef, b.coef);
}

#[test]
fn het_test_size_and_power() {
    let nd = Normal::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let n = 200;
    let reps = 400;
    let mut rejections = [0usize; 2];
    for _ in 0..reps {
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { nd.sample(&mut rng) });
        for (k, het) in [false, true].into_iter().enumerate() {
            let y = DVector::from_fn(n, |i, _| {
                let scale: f64 = if het { f64::exp(0.8 * x[(i, 1)]) } else { 1.0 };
                1.0 + 0.5 * x[(i, 1)] + scale * nd.sample(&mut rng)
            });
            let d = Design::from_parts(y, x.clone(), vec!["const".into(), "x".into()]);
            let fit = ols(&d, CovarianceKind::Homoscedastic).unwrap();
            let (_, _, p) = het_test(&d, &fit.residuals).unwrap();
            if p < 0.05 {
                rejections[k] += 1;
            }
        }
    }
    let size = rejections[0] as f64 / reps as f64;
    let power = rejections[1] as f64 / reps as f64;
    assert!((size - 0.05).abs() < 0.03, "size {size}");
    assert!(power > 0.9, "power {power}");
}
