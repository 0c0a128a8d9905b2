use pseudopanel_web::{mc_bias_json, shadow_price_json, spectral_json};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn shadow_price_frisch_and_given() {
    let v = parse(&shadow_price_json(1.0, 0.39, f64::NAN).unwrap());
    assert_eq!(v["gamma_source"], "frisch");
    assert!((v["shadow_income_elasticity"].as_f64().unwrap() + 3.13).abs() < 0.01);
    let v = parse(&shadow_price_json(0.4, 0.6, -0.5).unwrap());
    assert_eq!(v["shadow_income_elasticity"].as_f64().unwrap(), 0.4);
    assert!(shadow_price_json(0.4, 0.6, 0.0).is_err());
}

#[test]
fn spectral_constant_and_varying() {
    let v = parse(&spectral_json("[[0.1,0.1,0.1],[0.2,0.2,0.2]]", 0.3, 0.5).unwrap());
    assert_eq!(v["decomposable"], true);
    assert_eq!(v["time_invariant_delta"], true);
    let v = parse(&spectral_json("[[0.1,0.2,0.1],[0.2,0.2,0.2]]", 0.3, 0.5).unwrap());
    assert_eq!(v["decomposable"], false);
    assert!(spectral_json("[[0.1],[0.2,0.3]]", 0.3, 0.5).is_err());
    assert!(spectral_json("[[0.1,-1.0]]", 0.3, 0.5).is_err());
}

#[test]
fn explorer_rows_cover_the_grid() {
    let input = r#"{"dgp": {"n_units": 200, "n_cells": 10, "delta_endog": -0.2, "seed": 1}, "reps": 5}"#;
    let v = parse(&mc_bias_json(input).unwrap());
    assert_eq!(v["rows"].as_array().unwrap().len(), 8);
    assert_eq!(v["beta"].as_f64().unwrap(), 0.4);
    assert_eq!(mc_bias_json(input).unwrap(), mc_bias_json(input).unwrap());
    assert!(mc_bias_json(r#"{"reps": 0}"#).is_err());
    assert!(mc_bias_json(r#"{"dgp": {"reliability": 2.0}}"#).is_err());
}
