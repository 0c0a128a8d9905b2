//! Browser bindings. Every export takes plain numbers or JSON text and
//! returns JSON text; errors surface as JS exceptions carrying the message.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use pseudopanel::demand;
use pseudopanel::estimators::{self, TransformKind, VarianceComponents};
use pseudopanel::mc::{self, DgpConfig, McRow, StudySpec};

/// Largest replication count accepted from the page.
pub const MAX_REPS: usize = 2000;

fn js(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    pseudopanel::report::to_json_string(v).map_err(|e| e.to_string())
}

/// Income elasticity of the shadow price. `gamma` is the direct price
/// elasticity; pass NaN to use the Frisch rule.
pub fn shadow_price_json(cs: f64, ts: f64, gamma: f64) -> Result<String, String> {
    let gamma = (!gamma.is_nan()).then_some(gamma);
    let r = demand::shadow_price_elasticity(cs, ts, gamma).map_err(|e| e.to_string())?;
    to_json(&r)
}

#[derive(Debug, Deserialize)]
struct ExplorerInput {
    #[serde(default)]
    dgp: DgpConfig,
    #[serde(default = "default_reps")]
    reps: usize,
    #[serde(default)]
    grouped: bool,
}

fn default_reps() -> usize {
    50
}

#[derive(Debug, Serialize)]
struct ExplorerOutput {
    beta: f64,
    reps: usize,
    pooled_ols_plim: f64,
    rows: Vec<McRow>,
    failures: usize,
}

/// Monte Carlo bias of every estimator, with and without instruments, for a
/// DGP given as JSON (`{"dgp": {...}, "reps": 50, "grouped": false}`).
pub fn mc_bias_json(input: &str) -> Result<String, String> {
    let input: ExplorerInput = serde_json::from_str(input).map_err(|e| e.to_string())?;
    if input.reps == 0 || input.reps > MAX_REPS {
        return Err(format!("reps must be between 1 and {MAX_REPS}"));
    }
    let study = StudySpec {
        estimators: TransformKind::ALL.to_vec(),
        grouped: input.grouped,
        ..StudySpec::default()
    };
    let report = mc::run_study(&input.dgp, &study, input.reps).map_err(|e| e.to_string())?;
    to_json(&ExplorerOutput {
        beta: report.beta,
        reps: report.reps,
        pooled_ols_plim: input.dgp.pooled_ols_plim(),
        failures: report.failures.len(),
        rows: report.rows,
    })
}

#[derive(Debug, Serialize)]
struct SpectralOutput {
    cells: usize,
    waves: usize,
    decomposable: bool,
    asymmetry: f64,
    time_invariant_delta: bool,
}

/// Symmetry of `BΩ` for a cells × waves δ matrix given as JSON rows.
pub fn spectral_json(delta_rows: &str, sigma_mu2: f64, sigma_eps2: f64) -> Result<String, String> {
    let rows: Vec<Vec<f64>> = serde_json::from_str(delta_rows).map_err(|e| e.to_string())?;
    let cells = rows.len();
    let waves = rows.first().map_or(0, Vec::len);
    if cells == 0 || waves == 0 || rows.iter().any(|r| r.len() != waves) {
        return Err("δ must be a non-empty rectangular array".into());
    }
    if rows.iter().flatten().any(|&d| !(d > 0.0 && d.is_finite())) {
        return Err("δ entries must be positive".into());
    }
    if !(sigma_mu2 >= 0.0 && sigma_eps2 >= 0.0) {
        return Err("variance components must be non-negative".into());
    }
    let delta = DMatrix::from_fn(cells, waves, |c, t| rows[c][t]);
    let check = estimators::spectral_check(&delta, &VarianceComponents::new(sigma_mu2, sigma_eps2));
    to_json(&SpectralOutput {
        cells,
        waves,
        decomposable: check.decomposable,
        asymmetry: check.asymmetry,
        time_invariant_delta: rows.iter().all(|r| r.iter().all(|&d| d == r[0])),
    })
}

#[wasm_bindgen]
pub fn shadow_price(cs: f64, ts: f64, gamma: f64) -> Result<String, JsValue> {
    shadow_price_json(cs, ts, gamma).map_err(js)
}

#[wasm_bindgen]
pub fn mc_bias_explorer(input: &str) -> Result<String, JsValue> {
    mc_bias_json(input).map_err(js)
}

#[wasm_bindgen]
pub fn spectral_check(delta_rows: &str, sigma_mu2: f64, sigma_eps2: f64) -> Result<String, JsValue> {
    spectral_json(delta_rows, sigma_mu2, sigma_eps2).map_err(js)
}
