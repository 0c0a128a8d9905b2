//! Synthetic panels with cell effects, unit effects correlated with the
//! regressor, measurement error and instruments, plus a Monte Carlo runner
//! comparing estimators on them.
//!
//! The latent regressor is `x_ht = z_ht + v_ht` with instrument
//! `z_ht = x_mean + m_H + ξ_h + ν_ht`. The specific effect is
//! `α_h = δ·x̄_h + μ_H + η_h` and `y_ht = a + β x_ht + c x_ht² + α_h + ε_ht`.
//! The observed regressor is `x*_ht = x_ht + m_ht` with
//! `var(m) = (1 − λ)/λ · var(x)`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PanelTable, VariableRole};
use crate::diagnostics::{dfbetas, hausman};
use crate::error::{Error, Result};
use crate::estimators::{estimate, CorrectionKind, EstimatorOptions, TransformKind};
use crate::iv::{iv_estimate, InstrumentSet, IvSpec, QuadraticRule};
use crate::pseudo::{aggregate, AggregateOptions, Weighting, COHORT_COLUMN};
use crate::regress::{Design, ModelSpec};
use crate::report::fmt_num;

pub const Y: &str = "y";
pub const X: &str = "x";
pub const X2: &str = "x2";
pub const Z: &str = "z";
pub const X_TRUE: &str = "x_true";
pub const ALPHA: &str = "alpha";
pub const MEASUREMENT: &str = "m";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstrumentKind {
    /// `z` carries the time-varying part of `x` and is independent of the
    /// measurement error and the noise.
    #[default]
    Valid,
    /// `z` has no within-unit variation.
    PermanentOnly,
    /// `z` is independent of everything.
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sampling {
    /// Every unit observed in every wave.
    #[default]
    Panel,
    /// Fresh units every wave; each cell draws its size uniformly from
    /// `size_min..=size_max`.
    RepeatedCrossSection { size_min: usize, size_max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub n_units: usize,
    pub waves: usize,
    pub n_cells: usize,
    pub beta: f64,
    pub quad_c: f64,
    pub intercept: f64,
    /// Mundlak coefficient δ linking the specific effect to x̄_h.
    pub delta_endog: f64,
    pub sigma_mu2: f64,
    pub sigma_upsilon2: f64,
    pub sigma_eps2: f64,
    /// λ = σ_x² / (σ_x² + σ_m²).
    pub reliability: f64,
    pub x_mean: f64,
    pub sigma_cell2: f64,
    pub sigma_xi2: f64,
    pub sigma_nu2: f64,
    pub sigma_v2: f64,
    pub instrument: InstrumentKind,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n_units: 2000,
            waves: 4,
            n_cells: 20,
            beta: 0.4,
            quad_c: 0.0,
            intercept: 0.0,
            delta_endog: 0.0,
            sigma_mu2: 0.05,
            sigma_upsilon2: 0.05,
            sigma_eps2: 0.05,
            reliability: 1.0,
            x_mean: 10.0,
            sigma_cell2: 0.08,
            sigma_xi2: 0.14,
            sigma_nu2: 0.16,
            sigma_v2: 0.04,
            instrument: InstrumentKind::Valid,
            sampling: Sampling::Panel,
            seed: 0,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if !(self.reliability > 0.0 && self.reliability <= 1.0) {
            return bad("reliability must lie in (0, 1]");
        }
        let vars = [
            self.sigma_mu2,
            self.sigma_upsilon2,
            self.sigma_eps2,
            self.sigma_cell2,
            self.sigma_xi2,
            self.sigma_nu2,
            self.sigma_v2,
        ];
        if vars.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("variances must be finite and non-negative");
        }
        if self.n_cells == 0 || self.n_units == 0 || self.n_units % self.n_cells != 0 {
            return bad("n_units must be a positive multiple of n_cells");
        }
        if self.waves < 2 {
            return bad("at least two waves are needed");
        }
        if let Sampling::RepeatedCrossSection { size_min, size_max } = self.sampling {
            if size_min == 0 || size_min > size_max {
                return bad("cell sizes need 1 <= size_min <= size_max");
            }
        }
        Ok(())
    }

    /// Variance of the latent regressor implied by the configuration.
    pub fn var_x(&self) -> f64 {
        self.sigma_cell2 + self.sigma_xi2 + self.sigma_nu2 + self.sigma_v2
    }

    /// Measurement-error variance `(1 − λ)/λ · var(x)`.
    pub fn sigma_m2(&self) -> f64 {
        (1.0 - self.reliability) / self.reliability * self.var_x()
    }

    /// Probability limit of pooled OLS of `y` on `x*` (linear model).
    pub fn pooled_ols_plim(&self) -> f64 {
        let var_x = self.var_x();
        let var_xbar = self.sigma_cell2 + self.sigma_xi2 + (self.sigma_nu2 + self.sigma_v2) / self.waves as f64;
        let cov_alpha_x = self.delta_endog * var_xbar;
        (self.beta * var_x + cov_alpha_x) / (var_x + self.sigma_m2())
    }
}

fn normal(var: f64) -> Normal<f64> {
    Normal::new(0.0, var.sqrt()).expect("non-negative variance")
}

/// Per-replication generator: stream `rep` of the ChaCha generator seeded
/// with `seed`.
pub fn replication_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

struct Columns {
    ids: Vec<String>,
    waves: Vec<i64>,
    cells: Vec<String>,
    y: Vec<f64>,
    x: Vec<f64>,
    z: Vec<f64>,
    x_true: Vec<f64>,
    alpha: Vec<f64>,
    m: Vec<f64>,
}

/// One unit's latent path; only the waves listed in `observe` are recorded.
fn draw_unit(
    cfg: &DgpConfig,
    rng: &mut ChaCha8Rng,
    id: String,
    cell: usize,
    cell_x: f64,
    cell_mu: f64,
    observe: &[usize],
    out: &mut Columns,
) {
    let t_n = cfg.waves;
    let xi = normal(cfg.sigma_xi2).sample(rng);
    let eta = normal(cfg.sigma_upsilon2).sample(rng);
    let nu: Vec<f64> = (0..t_n).map(|_| normal(cfg.sigma_nu2).sample(rng)).collect();
    let v: Vec<f64> = (0..t_n).map(|_| normal(cfg.sigma_v2).sample(rng)).collect();
    let z: Vec<f64> = (0..t_n).map(|t| cfg.x_mean + cell_x + xi + nu[t]).collect();
    let x: Vec<f64> = (0..t_n).map(|t| z[t] + v[t]).collect();
    let x_bar = x.iter().sum::<f64>() / t_n as f64;
    let alpha = cfg.delta_endog * x_bar + cell_mu + eta;
    let z_obs: Vec<f64> = match cfg.instrument {
        InstrumentKind::Valid => z,
        InstrumentKind::PermanentOnly => vec![cfg.x_mean + cell_x + xi; t_n],
        InstrumentKind::Noise => (0..t_n).map(|_| cfg.x_mean + rng.sample::<f64, _>(rand_distr::StandardNormal)).collect(),
    };
    let sm2 = cfg.sigma_m2();
    for t in 0..t_n {
        let eps = normal(cfg.sigma_eps2).sample(rng);
        let m = normal(sm2).sample(rng);
        if !observe.contains(&t) {
            continue;
        }
        out.ids.push(id.clone());
        out.waves.push(t as i64 + 1);
        out.cells.push(cell_label(cell));
        out.y.push(cfg.intercept + cfg.beta * x[t] + cfg.quad_c * x[t] * x[t] + alpha + eps);
        out.x.push(x[t] + m);
        out.z.push(z_obs[t]);
        out.x_true.push(x[t]);
        out.alpha.push(alpha);
        out.m.push(m);
    }
}

pub fn cell_label(cell: usize) -> String {
    format!("c{cell:03}")
}

/// Draws a table from `rng`. Columns: `y`, `x` (observed, log-outlay role),
/// `x2 = x²`, `z`, the oracle columns `x_true`, `alpha`, `m`, and the cell
/// label in the cohort-key column.
pub fn generate_with(cfg: &DgpConfig, rng: &mut ChaCha8Rng) -> Result<PanelTable> {
    cfg.validate()?;
    let cell_x: Vec<f64> = (0..cfg.n_cells).map(|_| normal(cfg.sigma_cell2).sample(rng)).collect();
    let cell_mu: Vec<f64> = (0..cfg.n_cells).map(|_| normal(cfg.sigma_mu2).sample(rng)).collect();
    let mut out = Columns {
        ids: vec![],
        waves: vec![],
        cells: vec![],
        y: vec![],
        x: vec![],
        z: vec![],
        x_true: vec![],
        alpha: vec![],
        m: vec![],
    };
    match cfg.sampling {
        Sampling::Panel => {
            let all: Vec<usize> = (0..cfg.waves).collect();
            for h in 0..cfg.n_units {
                let c = h % cfg.n_cells;
                draw_unit(cfg, rng, format!("h{h:07}"), c, cell_x[c], cell_mu[c], &all, &mut out);
            }
        }
        Sampling::RepeatedCrossSection { size_min, size_max } => {
            for t in 0..cfg.waves {
                for c in 0..cfg.n_cells {
                    let size = rng.random_range(size_min..=size_max);
                    for i in 0..size {
                        let id = format!("w{:02}c{c:03}h{i:05}", t + 1);
                        draw_unit(cfg, rng, id, c, cell_x[c], cell_mu[c], &[t], &mut out);
                    }
                }
            }
        }
    }
    let x2: Vec<f64> = out.x.iter().map(|v| v * v).collect();
    let mut table = PanelTable::new("unit", "wave", out.ids, out.waves)?;
    table.add_numeric(Y, out.y, VariableRole::Regressor)?;
    table.add_numeric(X, out.x, VariableRole::LogOutlay)?;
    table.add_numeric(X2, x2, VariableRole::Regressor)?;
    table.add_numeric(Z, out.z, VariableRole::Instrument)?;
    table.add_numeric(X_TRUE, out.x_true, VariableRole::Regressor)?;
    table.add_numeric(ALPHA, out.alpha, VariableRole::Regressor)?;
    table.add_numeric(MEASUREMENT, out.m, VariableRole::Regressor)?;
    table.add_labels(COHORT_COLUMN, out.cells)?;
    Ok(table)
}

/// Table for replication 0 of `cfg.seed`.
pub fn generate(cfg: &DgpConfig) -> Result<PanelTable> {
    generate_with(cfg, &mut replication_rng(cfg.seed, 0))
}

/// Groups a generated table into its cells (key = cell label).
pub fn group_cells(table: &PanelTable, weighting: Weighting) -> Result<PanelTable> {
    let opts = AggregateOptions {
        weighting,
        min_cell_size: 1,
        ..AggregateOptions::default()
    };
    aggregate(table, &opts)?.to_table()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudySpec {
    pub estimators: Vec<TransformKind>,
    pub corrections: Vec<CorrectionKind>,
    /// Run each cell of the grid without (`false`) and with (`true`)
    /// instrumentation.
    pub iv: Vec<bool>,
    /// Estimate on the cell pseudo-panel instead of the unit panel.
    pub grouped: bool,
    pub weighting: Weighting,
    pub quadratic: bool,
    pub options: EstimatorOptions,
    /// Level of the two-sided t-test of `coef = β` whose rejection rate is
    /// reported.
    pub level: f64,
}

impl Default for StudySpec {
    fn default() -> Self {
        Self {
            estimators: TransformKind::ALL.to_vec(),
            corrections: vec![CorrectionKind::NoneC],
            iv: vec![false, true],
            grouped: false,
            weighting: Weighting::IncomeShare,
            quadratic: false,
            options: EstimatorOptions::default(),
            level: 0.05,
        }
    }
}

impl StudySpec {
    pub fn validate(&self) -> Result<()> {
        if self.estimators.is_empty() || self.corrections.is_empty() || self.iv.is_empty() {
            return Err(Error::ConfigInvalid("empty estimator, correction or IV list".into()));
        }
        if !self.grouped && self.corrections.iter().any(|c| *c != CorrectionKind::NoneC) {
            return Err(Error::ConfigInvalid(
                "cell corrections need grouped data (set grouped = true)".into(),
            ));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::ConfigInvalid("level must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn grid(&self) -> Vec<(TransformKind, CorrectionKind, bool)> {
        let mut g = Vec::new();
        for &e in &self.estimators {
            for &c in &self.corrections {
                for &iv in &self.iv {
                    g.push((e, c, iv));
                }
            }
        }
        g
    }
}

/// DGP plus study design, the JSON accepted by the `simulate` command.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub dgp: DgpConfig,
    pub study: StudySpec,
}

impl SimulationConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.dgp.validate()?;
        c.study.validate()?;
        Ok(c)
    }
}

/// Estimate and standard error of the `x` coefficient for one grid cell.
pub fn estimate_cell(
    table: &PanelTable,
    kind: TransformKind,
    correction: CorrectionKind,
    instrumented: bool,
    study: &StudySpec,
) -> Result<(f64, f64)> {
    let regs: Vec<&str> = if study.quadratic { vec![X, X2] } else { vec![X] };
    let spec = ModelSpec::new(Y, regs);
    let opts = EstimatorOptions {
        correction: Some(correction),
        ..study.options.clone()
    };
    let fit = if instrumented {
        let mut iv = IvSpec::new(InstrumentSet::new(X, [Z]));
        if study.quadratic {
            iv = iv.with_quadratic(X2, QuadraticRule::SquareOfFitted);
        }
        iv_estimate(kind, &spec, table, &iv, &opts)?.fit
    } else {
        estimate(kind, &spec, table, &opts)?
    };
    let b = fit.coef_of(X).ok_or_else(|| Error::NotIdentified("x coefficient was dropped".into()))?;
    Ok((b, fit.se_of(X).unwrap_or(f64::NAN)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub estimator: TransformKind,
    pub correction: CorrectionKind,
    pub iv: bool,
    pub mean: f64,
    pub bias: f64,
    pub rmse: f64,
    pub sd: f64,
    /// Monte Carlo standard error of the mean, `sd / √n_ok`.
    pub mc_se: f64,
    pub rejection: f64,
    pub n_ok: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McFailure {
    pub rep: usize,
    pub estimator: TransformKind,
    pub correction: CorrectionKind,
    pub iv: bool,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub seed: u64,
    pub reps: usize,
    pub beta: f64,
    pub rows: Vec<McRow>,
    pub failures: Vec<McFailure>,
    /// Per replication, per grid cell: the estimate (`NaN` when it failed).
    #[serde(skip)]
    pub estimates: Vec<Vec<f64>>,
}

pub const REPORT_HEADER: [&str; 11] = [
    "estimator", "correction", "iv", "mean", "bias", "rmse", "sd", "mc_se", "rejection", "n_ok", "n_failed",
];

impl McReport {
    pub fn row(&self, estimator: TransformKind, correction: CorrectionKind, iv: bool) -> Option<&McRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.correction == correction && r.iv == iv)
    }

    fn column_of(&self, estimator: TransformKind, correction: CorrectionKind, iv: bool) -> Option<usize> {
        self.rows
            .iter()
            .position(|r| r.estimator == estimator && r.correction == correction && r.iv == iv)
    }

    /// Per-replication estimates of one grid cell.
    pub fn draws(&self, estimator: TransformKind, correction: CorrectionKind, iv: bool) -> Option<Vec<f64>> {
        let j = self.column_of(estimator, correction, iv)?;
        Some(self.estimates.iter().map(|r| r[j]).collect())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(REPORT_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.estimator.as_str().to_string(),
                r.correction.as_str().to_string(),
                r.iv.to_string(),
                fmt_num(r.mean),
                fmt_num(r.bias),
                fmt_num(r.rmse),
                fmt_num(r.sd),
                fmt_num(r.mc_se),
                fmt_num(r.rejection),
                r.n_ok.to_string(),
                r.n_failed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String> {
        crate::report::to_json_string(self)
    }
}

fn replicate(cfg: &DgpConfig, study: &StudySpec, rep: usize) -> Vec<std::result::Result<(f64, f64), String>> {
    let grid = study.grid();
    let mut rng = replication_rng(cfg.seed, rep as u64);
    let table = generate_with(cfg, &mut rng).and_then(|t| if study.grouped { group_cells(&t, study.weighting) } else { Ok(t) });
    match table {
        Err(e) => vec![Err(e.to_string()); grid.len()],
        Ok(t) => grid
            .iter()
            .map(|&(k, c, iv)| estimate_cell(&t, k, c, iv, study).map_err(|e| e.to_string()))
            .collect(),
    }
}

fn map_reps<T: Send, F: Fn(usize) -> T + Sync + Send>(reps: usize, f: F) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        (0..reps).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..reps).map(f).collect()
    }
}

/// Runs `reps` replications of the study. Each replication draws from its
/// own stream, so the report does not depend on scheduling. Failed
/// estimates are listed in `failures` and left out of the summaries.
pub fn run_study(cfg: &DgpConfig, study: &StudySpec, reps: usize) -> Result<McReport> {
    cfg.validate()?;
    study.validate()?;
    if reps == 0 {
        return Err(Error::ConfigInvalid("reps must be at least 1".into()));
    }
    let grid = study.grid();
    let results = map_reps(reps, |rep| replicate(cfg, study, rep));
    let crit = statrs::distribution::ContinuousCDF::inverse_cdf(
        &statrs::distribution::Normal::standard(),
        1.0 - study.level / 2.0,
    );
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut estimates = vec![vec![f64::NAN; grid.len()]; reps];
    for (j, &(k, c, iv)) in grid.iter().enumerate() {
        let mut ok = Vec::new();
        let mut rejections = 0usize;
        for (rep, res) in results.iter().enumerate() {
            match &res[j] {
                Ok((b, se)) => {
                    ok.push(*b);
                    estimates[rep][j] = *b;
                    if ((b - cfg.beta) / se).abs() > crit {
                        rejections += 1;
                    }
                }
                Err(e) => failures.push(McFailure {
                    rep,
                    estimator: k,
                    correction: c,
                    iv,
                    error: e.clone(),
                }),
            }
        }
        let n_ok = ok.len();
        let mean = if n_ok > 0 { ok.iter().sum::<f64>() / n_ok as f64 } else { f64::NAN };
        let sd = if n_ok > 1 {
            (ok.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (n_ok - 1) as f64).sqrt()
        } else {
            f64::NAN
        };
        let rmse = if n_ok > 0 {
            (ok.iter().map(|b| (b - cfg.beta).powi(2)).sum::<f64>() / n_ok as f64).sqrt()
        } else {
            f64::NAN
        };
        rows.push(McRow {
            estimator: k,
            correction: c,
            iv,
            mean,
            bias: mean - cfg.beta,
            rmse,
            sd,
            mc_se: sd / (n_ok as f64).sqrt(),
            rejection: if n_ok > 0 { rejections as f64 / n_ok as f64 } else { f64::NAN },
            n_ok,
            n_failed: reps - n_ok,
        });
    }
    Ok(McReport {
        seed: cfg.seed,
        reps,
        beta: cfg.beta,
        rows,
        failures,
        estimates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HausmanStudy {
    pub reps: usize,
    pub level: f64,
    pub rejection_rate: f64,
    pub n_failed: usize,
    pub statistics: Vec<f64>,
}

/// Between-versus-within Hausman test on the `x` coefficient of the unit
/// panel, repeated `reps` times.
pub fn hausman_study(cfg: &DgpConfig, reps: usize, level: f64) -> Result<HausmanStudy> {
    cfg.validate()?;
    let spec = ModelSpec::new(Y, [X]);
    let subset = vec![X.to_string()];
    let stats = map_reps(reps, |rep| {
        let mut rng = replication_rng(cfg.seed, rep as u64);
        let t = generate_with(cfg, &mut rng)?;
        let b = estimate(TransformKind::Between, &spec, &t, &EstimatorOptions::default())?;
        let w = estimate(TransformKind::Within, &spec, &t, &EstimatorOptions::default())?;
        Ok::<_, Error>(hausman(&b, &w, &subset, false)?)
    });
    let mut statistics = Vec::new();
    let mut rejected = 0usize;
    for h in stats.into_iter().flatten() {
        if h.rejects(level) {
            rejected += 1;
        }
        statistics.push(h.statistic);
    }
    let n_ok = statistics.len();
    Ok(HausmanStudy {
        reps,
        level,
        rejection_rate: rejected as f64 / n_ok.max(1) as f64,
        n_failed: reps - n_ok,
        statistics,
    })
}

/// Share of rows flagged by DFBETAS in the pooled regression of `y` on
/// `x*`, one value per replication.
pub fn dfbetas_study(cfg: &DgpConfig, reps: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    let spec = ModelSpec::new(Y, [X]);
    map_reps(reps, |rep| {
        let mut rng = replication_rng(cfg.seed, rep as u64);
        let t = generate_with(cfg, &mut rng)?;
        let d = Design::from_table(&spec, &t)?;
        let f = dfbetas(&d)?;
        Ok(f.flagged.len() as f64 / d.n() as f64)
    })
    .into_iter()
    .collect()
}
