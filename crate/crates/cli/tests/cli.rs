use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pseudopanel::data::{load_csv, RoleSchema};
use pseudopanel::estimators::{estimate, CorrectionKind, EstimatorOptions, TransformKind};
use pseudopanel::mc::{generate, DgpConfig};
use pseudopanel::pseudo::{aggregate, AggregateOptions, Weighting};
use pseudopanel::regress::ModelSpec;
use pseudopanel::report::{round_sig, FitReport};
use tempfile::TempDir;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pseudopanel"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    cli(args).status.code().unwrap()
}

const SCHEMA: &str = r#"{"unit": "unit_id", "wave": "wave", "y": "regressor", "x": "log_outlay",
    "z": "instrument", "cohort_key": "cohort_key"}"#;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DgpConfig {
            n_units: 200,
            n_cells: 10,
            delta_endog: -0.2,
            seed: 9,
            ..DgpConfig::default()
        };
        generate(&cfg).unwrap().save_csv(dir.path().join("data.csv")).unwrap();
        std::fs::write(dir.path().join("schema.json"), SCHEMA).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }
}

fn fit_from(text: &str) -> FitReport {
    let v: serde_json::Value = serde_json::from_str(text).unwrap();
    serde_json::from_value(v.get("fit").cloned().unwrap_or(v)).unwrap()
}

fn schema(path: &Path) -> RoleSchema {
    RoleSchema::load(path).unwrap()
}

#[test]
fn estimate_matches_library_call() {
    let f = Fixture::new();
    let table = load_csv(f.path("data.csv"), &schema(&f.path("schema.json"))).unwrap();
    let spec = ModelSpec::new("y", ["x"]);
    for kind in ["between", "within", "fd", "cs"] {
        let text = ok(&[
            "estimate", "--input", &f.s("data.csv"), "--schema", &f.s("schema.json"),
            "--dependent", "y", "--regressors", "x", "--estimator", kind,
        ]);
        let lib = estimate(TransformKind::parse(kind).unwrap(), &spec, &table, &EstimatorOptions::default()).unwrap();
        let got = fit_from(&text);
        assert_eq!(got.names, lib.names, "{kind}");
        for (a, b) in got.coef.iter().zip(&lib.coef) {
            assert_eq!(*a, round_sig(*b), "{kind}");
        }
    }
}

#[test]
fn group_then_estimate_matches_library() {
    let f = Fixture::new();
    ok(&[
        "group", "--input", &f.s("data.csv"), "--schema", &f.s("schema.json"), "--min-cell-size", "1",
        "--report", &f.s("cells.json"), "--out", &f.s("grouped.csv"),
    ]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.path("cells.json")).unwrap()).unwrap();
    assert_eq!(report["n_cells"], 40);

    let text = ok(&[
        "estimate", "--input", &f.s("grouped.csv"), "--dependent", "y", "--regressors", "x",
        "--estimator", "within", "--correction", "exact",
    ]);
    let table = load_csv(f.path("data.csv"), &schema(&f.path("schema.json"))).unwrap();
    let pp = aggregate(
        &table,
        &AggregateOptions {
            weighting: Weighting::IncomeShare,
            min_cell_size: 1,
            ..AggregateOptions::default()
        },
    )
    .unwrap();
    let lib = estimate(
        TransformKind::Within,
        &ModelSpec::new("y", ["x"]),
        &pp.to_table().unwrap(),
        &EstimatorOptions::with_correction(CorrectionKind::ExactB),
    )
    .unwrap();
    // The CSV round trip keeps 12 significant digits.
    let got = fit_from(&text).coef[0];
    assert!((got - lib.coef[0]).abs() < 1e-8, "{got} vs {}", lib.coef[0]);
}

#[test]
fn iv_output_carries_first_stages() {
    let f = Fixture::new();
    let text = ok(&[
        "estimate", "--input", &f.s("data.csv"), "--schema", &f.s("schema.json"), "--dependent", "y",
        "--regressors", "x", "--iv", "--instruments", "z", "--estimator", "between",
    ]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["first_stages"].as_array().unwrap().len(), 4);
    assert!(v["fit"]["method"].as_str().unwrap().contains("iv"));
}

#[test]
fn grid_reports_eight_cells() {
    let f = Fixture::new();
    let text = ok(&[
        "estimate", "--input", &f.s("data.csv"), "--schema", &f.s("schema.json"), "--dependent", "y",
        "--regressors", "x", "--instruments", "z", "--all",
    ]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r["error"].is_null()));
}

#[test]
fn hausman_from_saved_fits() {
    let f = Fixture::new();
    for kind in ["between", "within"] {
        ok(&[
            "estimate", "--input", &f.s("data.csv"), "--schema", &f.s("schema.json"), "--dependent", "y",
            "--regressors", "x", "--estimator", kind, "--out", &f.s(&format!("{kind}.json")),
        ]);
    }
    let text = ok(&["hausman", "--fit-a", &f.s("between.json"), "--fit-b", &f.s("within.json"), "--subset", "x"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["dof"], 1);
    assert!(v["statistic"].as_f64().unwrap() > 0.0);
    assert_eq!(v["naive_biased"], false);
}

#[test]
fn shadow_price_outputs() {
    let text = ok(&["shadow-price", "--cs", "1.22", "--ts", "0.36", "--frisch"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!((v["shadow_income_elasticity"].as_f64().unwrap() + 4.78).abs() < 0.01);
    let text = ok(&["shadow-price", "--cs", "0.4", "--ts", "0.6", "--gamma", "-0.5", "--good", "food"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["shadow_income_elasticity"].as_f64().unwrap(), 0.4);
    assert_eq!(v["good"], "food");
}

#[test]
fn filter_writes_retained_rows() {
    let f = Fixture::new();
    let text = ok(&[
        "filter", "--input", &f.s("data.csv"), "--schema", &f.s("schema.json"), "--dependent", "y",
        "--regressors", "x", "--threshold-auto", "--retained", &f.s("kept.csv"),
    ]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let flagged = v["flagged"].as_array().unwrap().len();
    let kept = std::fs::read_to_string(f.path("kept.csv")).unwrap().lines().count() - 1;
    assert_eq!(flagged + kept, 800);
    assert_eq!(v["threshold"].as_f64().unwrap(), round_sig(2.0 / 800f64.sqrt()));
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    let base = ["estimate", "--input", &f.s("data.csv"), "--schema", &f.s("schema.json"), "--dependent", "y"];
    // --iv without instruments
    let mut args = base.to_vec();
    args.extend(["--regressors", "x", "--iv"]);
    assert_eq!(code(&args), 2);
    // unknown column
    let mut args = base.to_vec();
    args.extend(["--regressors", "nope"]);
    assert_eq!(code(&args), 2);
    // unknown estimator
    let mut args = base.to_vec();
    args.extend(["--regressors", "x", "--estimator", "gmm"]);
    assert_eq!(code(&args), 2);
    // missing required flag
    assert_eq!(code(&["estimate", "--input", &f.s("data.csv")]), 2);
    // exact correction on an ungrouped panel
    let mut args = base.to_vec();
    args.extend(["--regressors", "x", "--correction", "exact"]);
    assert_eq!(code(&args), 2);
    // zero direct price elasticity is a numerical failure
    assert_eq!(code(&["shadow-price", "--cs", "0.5", "--ts", "0.2", "--gamma", "0"]), 3);
    // time-invariant regressor only: not identified under within
    std::fs::write(f.path("s2.json"), r#"{"unit": "unit_id", "wave": "wave", "y": "regressor", "alpha": "regressor"}"#)
        .unwrap();
    assert_eq!(
        code(&[
            "estimate", "--input", &f.s("data.csv"), "--schema", &f.s("s2.json"), "--dependent", "y",
            "--regressors", "alpha", "--estimator", "within",
        ]),
        3
    );
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn simulate_seed_controls_output() {
    let f = Fixture::new();
    std::fs::write(f.path("sim.json"), r#"{"dgp": {"n_units": 100, "n_cells": 10}, "study": {"iv": [false]}}"#).unwrap();
    let run = |seed: &str| ok(&["--seed", seed, "simulate", "--config", &f.s("sim.json"), "--reps", "4"]);
    let a = run("1");
    assert_eq!(a, run("1"));
    assert_ne!(a, run("2"));
    assert!(a.starts_with("estimator,correction,iv,mean,bias,rmse,sd,mc_se,rejection,n_ok,n_failed"));
    assert_eq!(a.lines().count(), 5);
}
