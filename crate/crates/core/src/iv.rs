//! Two-stage instrumentation of log outlay in levels and first differences.
//!
//! The second stage replaces the endogenous regressor by its first-stage
//! fitted value. When the model also contains the square of the endogenous
//! regressor, the default rule uses the square of the fitted value; the
//! alternative instruments the square separately.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::data::PanelTable;
use crate::error::{Error, Result};
use crate::estimators::{
    design_deltas, estimate_design, fit_cross_section, CorrectionKind, EstimatorOptions, PanelDesign, TransformKind,
};
use crate::regress::{fit_linear, ols, CovarianceKind, Design, FitResult, ModelSpec};

/// First-stage F below this is reported as weak. This is a reporting
/// convention (Staiger–Stock rule of thumb), not a property of the data.
pub const WEAK_F_THRESHOLD: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InstrumentSet {
    /// Endogenous column (log outlay or log income).
    pub target: String,
    pub instruments: Vec<String>,
}

impl InstrumentSet {
    pub fn new<S: Into<String>>(target: impl Into<String>, instruments: impl IntoIterator<Item = S>) -> Self {
        Self {
            target: target.into(),
            instruments: instruments.into_iter().map(Into::into).collect(),
        }
    }

    /// Instruments must be non-empty and exclude the dependent variable.
    /// Using the target itself is allowed; it reproduces least squares.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.instruments.is_empty() {
            return Err(Error::ConfigInvalid("instrumental variables need at least one instrument".into()));
        }
        if self.instruments.iter().any(|z| *z == spec.dependent) {
            return Err(Error::ConfigInvalid(format!(
                "the dependent variable `{}` cannot be an instrument",
                spec.dependent
            )));
        }
        if !spec.regressors.contains(&self.target) {
            return Err(Error::ConfigInvalid(format!(
                "endogenous column `{}` is not a regressor of the model",
                self.target
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadraticRule {
    /// The squared term is the square of the instrumented regressor.
    #[default]
    SquareOfFitted,
    /// The squared term gets its own first stage on the instruments and
    /// their squares.
    SeparateInstrument,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IvSpec {
    pub set: InstrumentSet,
    /// Regressor holding the square of the target, if the model has one.
    #[serde(default)]
    pub quadratic: Option<String>,
    #[serde(default)]
    pub rule: QuadraticRule,
}

impl IvSpec {
    pub fn new(set: InstrumentSet) -> Self {
        Self {
            set,
            quadratic: None,
            rule: QuadraticRule::SquareOfFitted,
        }
    }

    pub fn with_quadratic(mut self, column: impl Into<String>, rule: QuadraticRule) -> Self {
        self.quadratic = Some(column.into());
        self.rule = rule;
        self
    }

    fn endogenous(&self) -> Vec<&str> {
        let mut v = vec![self.set.target.as_str()];
        if let Some(q) = &self.quadratic {
            v.push(q);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FirstStage {
    pub fit: FitResult,
    /// Fitted target per table row (NaN where the row was not used).
    pub fitted: Vec<f64>,
    /// F statistic on the excluded instruments; infinite when the
    /// instruments fit the target exactly.
    pub f_stat: f64,
    pub df_num: usize,
    pub df_den: usize,
    pub p_value: f64,
    pub degenerate: bool,
    pub weak: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstStageSummary {
    pub target: String,
    pub wave: Option<i64>,
    pub f_stat: f64,
    pub p_value: f64,
    pub weak: bool,
    pub degenerate: bool,
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
}

impl FirstStageSummary {
    fn of(target: &str, wave: Option<i64>, fs: &FirstStage) -> Self {
        Self {
            target: target.to_string(),
            wave,
            f_stat: fs.f_stat,
            p_value: fs.p_value,
            weak: fs.weak,
            degenerate: fs.degenerate,
            names: fs.fit.names.clone(),
            coef: fs.fit.coef.clone(),
            se: fs.fit.se(),
        }
    }
}

fn f_test(rss_r: f64, rss_u: f64, q: usize, df: usize, scale: f64) -> (f64, f64, bool) {
    if rss_u <= 1e-20 * scale.max(1e-300) || rss_u == 0.0 {
        return (f64::INFINITY, 0.0, true);
    }
    let f = ((rss_r - rss_u).max(0.0) / q as f64) / (rss_u / df as f64);
    let p = FisherSnedecor::new(q as f64, df as f64).map_or(f64::NAN, |d| 1.0 - d.cdf(f));
    (f, p, false)
}

/// Least squares of `target` on the exogenous regressors and the
/// instruments, with the F statistic for the joint significance of the
/// instruments not already among the exogenous regressors.
pub fn first_stage(
    target: &str,
    instruments: &[String],
    exogenous: &[String],
    wave_dummies: bool,
    table: &PanelTable,
) -> Result<FirstStage> {
    let mut regs: Vec<String> = exogenous.to_vec();
    let excluded: Vec<String> = instruments.iter().filter(|z| !exogenous.contains(z)).cloned().collect();
    if excluded.is_empty() {
        return Err(Error::ConfigInvalid("no excluded instrument".into()));
    }
    regs.extend(excluded.iter().cloned());
    let mut spec = ModelSpec::new(target, regs);
    spec.wave_dummies = wave_dummies && table.distinct_waves().len() > 1;
    let design = Design::from_table(&spec, table)?;
    let fit = ols(&design, CovarianceKind::Homoscedastic)?;
    let restricted_cols: Vec<usize> = (0..design.names.len())
        .filter(|&j| !excluded.contains(&design.names[j]))
        .collect();
    let xr = design.x.select_columns(&restricted_cols);
    let names_r: Vec<String> = restricted_cols.iter().map(|&j| design.names[j].clone()).collect();
    let rss_r = crate::linalg::least_squares(&xr, &design.y, &names_r)?.residuals.norm_squared();
    let rss_u: f64 = fit.residuals.iter().map(|e| e * e).sum();
    let tss = {
        let m = design.y.mean();
        design.y.iter().map(|v| (v - m).powi(2)).sum::<f64>()
    };
    let (f_stat, p_value, degenerate) = f_test(rss_r, rss_u, excluded.len(), fit.df, tss.max(rss_r));
    let mut fitted = vec![f64::NAN; table.n_rows()];
    for (i, &r) in design.rows.iter().enumerate() {
        fitted[r] = design.y[i] - fit.residuals[i];
    }
    Ok(FirstStage {
        weak: f_stat < WEAK_F_THRESHOLD,
        df_num: excluded.len(),
        df_den: fit.df,
        fit,
        fitted,
        f_stat,
        p_value,
        degenerate,
    })
}

/// Result of an instrumented fit.
#[derive(Debug, Clone)]
pub struct IvFit {
    pub fit: FitResult,
    pub first_stages: Vec<FirstStageSummary>,
    /// F statistic of the differenced target on the differenced fitted
    /// values (first-difference fits only).
    pub fd_relevance_f: Option<f64>,
    pub warnings: Vec<String>,
}

fn exogenous_of(spec: &ModelSpec, iv: &IvSpec) -> Vec<String> {
    let endo = iv.endogenous();
    spec.regressors
        .iter()
        .filter(|r| !endo.contains(&r.as_str()))
        .cloned()
        .collect()
}

/// Rows with every IV column observed; others are treated like rows with a
/// missing model variable.
fn complete_iv_rows(table: &PanelTable, iv: &IvSpec) -> Result<(PanelTable, usize)> {
    let cols = iv
        .set
        .instruments
        .iter()
        .map(|z| table.column(z))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<usize> = (0..table.n_rows()).filter(|&r| cols.iter().all(|c| !c[r].is_nan())).collect();
    let dropped = table.n_rows() - rows.len();
    Ok((if dropped == 0 { table.clone() } else { table.select_rows(&rows) }, dropped))
}

/// Adds squared instrument columns for the separate first stage of the
/// quadratic term; returns their names.
fn squared_instruments(table: &mut PanelTable, iv: &IvSpec) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for z in &iv.set.instruments {
        let name = format!("{z}__sq");
        let vals = table.column(z)?.iter().map(|v| v * v).collect();
        table.add_numeric(name.clone(), vals, crate::data::VariableRole::Instrument)?;
        names.push(name);
    }
    Ok(names)
}

/// Per-row fitted values of the endogenous columns; `per_wave` runs one
/// first stage per wave.
fn fitted_columns(
    spec: &ModelSpec,
    table: &PanelTable,
    iv: &IvSpec,
    per_wave: bool,
) -> Result<(Vec<Vec<f64>>, Vec<FirstStageSummary>)> {
    let exog = exogenous_of(spec, iv);
    let mut work = table.clone();
    let separate = iv.quadratic.is_some() && iv.rule == QuadraticRule::SeparateInstrument;
    let sq_names = if separate { squared_instruments(&mut work, iv)? } else { Vec::new() };
    let groups: Vec<(Option<i64>, Vec<usize>)> = if per_wave {
        work.distinct_waves()
            .into_iter()
            .map(|w| (Some(w), (0..work.n_rows()).filter(|&r| work.waves()[r] == w).collect()))
            .collect()
    } else {
        vec![(None, (0..work.n_rows()).collect())]
    };
    let n = work.n_rows();
    let mut target_hat = vec![f64::NAN; n];
    let mut quad_hat = vec![f64::NAN; n];
    let mut summaries = Vec::new();
    for (wave, rows) in groups {
        let sub = work.select_rows(&rows);
        let dummies = wave.is_none() && spec.wave_dummies;
        let fs = first_stage(&iv.set.target, &iv.set.instruments, &exog, dummies, &sub)?;
        summaries.push(FirstStageSummary::of(&iv.set.target, wave, &fs));
        for (i, &r) in rows.iter().enumerate() {
            target_hat[r] = fs.fitted[i];
        }
        if let Some(q) = &iv.quadratic {
            match iv.rule {
                QuadraticRule::SquareOfFitted => {
                    for (i, &r) in rows.iter().enumerate() {
                        quad_hat[r] = fs.fitted[i] * fs.fitted[i];
                    }
                }
                QuadraticRule::SeparateInstrument => {
                    let mut zs = iv.set.instruments.clone();
                    zs.extend(sq_names.iter().cloned());
                    let fq = first_stage(q, &zs, &exog, dummies, &sub)?;
                    summaries.push(FirstStageSummary::of(q, wave, &fq));
                    for (i, &r) in rows.iter().enumerate() {
                        quad_hat[r] = fq.fitted[i];
                    }
                }
            }
        }
    }
    let mut out = vec![target_hat];
    if iv.quadratic.is_some() {
        out.push(quad_hat);
    }
    Ok((out, summaries))
}

/// Copy of the structural design with the endogenous columns replaced by
/// their fitted values.
fn fitted_design(design: &Design, iv: &IvSpec, fitted: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let mut x = design.x.clone();
    for (name, col) in iv.endogenous().iter().zip(fitted) {
        let j = design
            .column_index(name)
            .ok_or_else(|| Error::MissingColumn { column: name.to_string() })?;
        for (i, &r) in design.rows.iter().enumerate() {
            let v = col[r];
            if v.is_nan() {
                return Err(Error::DimensionMismatch(format!("no fitted value for row {r}")));
            }
            x[(i, j)] = v;
        }
    }
    Ok(x)
}

fn warnings_for(summaries: &[FirstStageSummary]) -> Vec<String> {
    summaries
        .iter()
        .filter(|s| s.weak)
        .map(|s| {
            let at = s.wave.map_or(String::new(), |w| format!(" in wave {w}"));
            format!(
                "weak instruments for `{}`{at}: first-stage F = {:.3} < {WEAK_F_THRESHOLD} (reporting convention)",
                s.target, s.f_stat
            )
        })
        .collect()
}

/// Two-stage least squares on pooled levels.
pub fn two_stage(spec: &ModelSpec, table: &PanelTable, iv: &IvSpec) -> Result<IvFit> {
    iv.set.validate(spec)?;
    let (table, dropped) = complete_iv_rows(table, iv)?;
    let (fitted, first_stages) = fitted_columns(spec, &table, iv, false)?;
    let design = Design::from_table(spec, &table)?;
    let x_fit = fitted_design(&design, iv, &fitted)?;
    let mut fit = fit_linear("2sls", &design.y, &x_fit, Some(&design.x), &design.names, &CovarianceKind::Homoscedastic, 0)?;
    fit.excluded = design.excluded + dropped;
    fit.means = design.means.clone();
    if iv.quadratic.is_some() {
        fit.notes.push(match iv.rule {
            QuadraticRule::SquareOfFitted => "squared term uses the square of the fitted value".to_string(),
            QuadraticRule::SeparateInstrument => "squared term instrumented separately".to_string(),
        });
    }
    Ok(IvFit {
        fit,
        warnings: warnings_for(&first_stages),
        first_stages,
        fd_relevance_f: None,
    })
}

/// Instrumented panel estimator. Fitted levels come from one first stage per
/// wave; the chosen transformation is applied to them alongside the
/// structural regressors, so for first differences the differenced
/// endogenous regressor is the difference of fitted levels.
pub fn iv_estimate(
    kind: TransformKind,
    spec: &ModelSpec,
    table: &PanelTable,
    iv: &IvSpec,
    opts: &EstimatorOptions,
) -> Result<IvFit> {
    iv.set.validate(spec)?;
    let (table, dropped) = complete_iv_rows(table, iv)?;
    let (fitted, first_stages) = fitted_columns(spec, &table, iv, true)?;
    let mut warnings = warnings_for(&first_stages);
    let mut fd_relevance_f = None;
    let mut fit = if kind == TransformKind::CrossSection {
        // Cross-sections do not need a balanced panel.
        let design = Design::from_table(spec, &table)?;
        let x_fit = fitted_design(&design, iv, &fitted)?;
        let (d, b) = design_deltas(&table, &design)?;
        let delta = d.as_deref().zip(b.as_deref());
        fit_cross_section(&design, Some(&x_fit), delta, opts.correction.unwrap_or(CorrectionKind::NoneC))?.pooled
    } else {
        let pd = PanelDesign::new(spec, &table)?;
        let x_fit = fitted_design(&pd.design, iv, &fitted)?;
        if kind == TransformKind::FirstDifference {
            let f = fd_relevance(&pd, iv, &x_fit)?;
            if f < WEAK_F_THRESHOLD {
                warnings.push(format!(
                    "weak instruments for the change in `{}`: F = {f:.3} < {WEAK_F_THRESHOLD} (reporting convention)",
                    iv.set.target
                ));
            }
            fd_relevance_f = Some(f);
        }
        estimate_design(kind, &pd, Some(&x_fit), opts)?
    };
    fit.excluded += dropped;
    Ok(IvFit {
        fit,
        first_stages,
        fd_relevance_f,
        warnings,
    })
}

/// First-difference fit with the change in the endogenous regressor replaced
/// by the change in its per-wave fitted level.
pub fn fd_instrument(spec: &ModelSpec, table: &PanelTable, iv: &IvSpec, opts: &EstimatorOptions) -> Result<IvFit> {
    iv_estimate(TransformKind::FirstDifference, spec, table, iv, opts)
}

/// F statistic of Δtarget on a constant and Δfitted.
fn fd_relevance(pd: &PanelDesign, iv: &IvSpec, x_fit: &DMatrix<f64>) -> Result<f64> {
    let j = pd
        .design
        .column_index(&iv.set.target)
        .ok_or_else(|| Error::MissingColumn { column: iv.set.target.clone() })?;
    let mut dx = Vec::new();
    let mut dh = Vec::new();
    for u in 0..pd.n_units() {
        for t in 1..pd.n_waves() {
            let (a, b) = (pd.row(u, t), pd.row(u, t - 1));
            dx.push(pd.design.x[(a, j)] - pd.design.x[(b, j)]);
            dh.push(x_fit[(a, j)] - x_fit[(b, j)]);
        }
    }
    let n = dx.len();
    let y = nalgebra::DVector::from_vec(dx);
    let x = DMatrix::from_fn(n, 2, |i, c| if c == 0 { 1.0 } else { dh[i] });
    let names = vec!["const".to_string(), "dfit".to_string()];
    let rss_u = match crate::linalg::least_squares(&x, &y, &names) {
        Ok(ls) => ls.residuals.norm_squared(),
        Err(Error::RankDeficient { .. }) => return Ok(0.0),
        Err(e) => return Err(e),
    };
    let m = y.mean();
    let rss_r: f64 = y.iter().map(|v| (v - m).powi(2)).sum();
    if n <= 2 {
        return Ok(f64::NAN);
    }
    Ok(f_test(rss_r, rss_u, 1, n - 2, rss_r).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::VariableRole;
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cross_section(n: usize, seed: u64) -> PanelTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let z: Vec<f64> = (0..n).map(|_| nd.sample(&mut rng)).collect();
        let z2: Vec<f64> = (0..n).map(|_| nd.sample(&mut rng)).collect();
        let u: Vec<f64> = (0..n).map(|_| nd.sample(&mut rng)).collect();
        let x: Vec<f64> = (0..n).map(|i| z[i] + 0.5 * z2[i] + u[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * x[i] + 0.8 * u[i] + 0.3 * nd.sample(&mut rng)).collect();
        let mut t = PanelTable::new("id", "wave", (0..n).map(|i| i.to_string()).collect(), vec![1; n]).unwrap();
        t.add_numeric("y", y, VariableRole::Regressor).unwrap();
        t.add_numeric("x", x.clone(), VariableRole::LogOutlay).unwrap();
        t.add_numeric("x2", x.iter().map(|v| v * v).collect(), VariableRole::Regressor).unwrap();
        t.add_numeric("z", z, VariableRole::Instrument).unwrap();
        t.add_numeric("z2", z2, VariableRole::Instrument).unwrap();
        t
    }

    #[test]
    fn instrumenting_with_itself_is_ols() {
        let t = cross_section(200, 1);
        let spec = ModelSpec::new("y", ["x"]);
        let iv = two_stage(&spec, &t, &IvSpec::new(InstrumentSet::new("x", ["x"]))).unwrap();
        let o = ols(&Design::from_table(&spec, &t).unwrap(), CovarianceKind::Homoscedastic).unwrap();
        for (a, b) in iv.fit.coef.iter().zip(&o.coef) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(iv.first_stages[0].degenerate);
        assert!(iv.first_stages[0].f_stat.is_infinite());
    }

    #[test]
    fn scalar_exactly_identified_is_indirect_least_squares() {
        let t = cross_section(300, 2);
        let spec = ModelSpec::new("y", ["x"]);
        let fit = two_stage(&spec, &t, &IvSpec::new(InstrumentSet::new("x", ["z"]))).unwrap().fit;
        let (y, x, z) = (t.column("y").unwrap(), t.column("x").unwrap(), t.column("z").unwrap());
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (my, mx, mz) = (mean(y), mean(x), mean(z));
        let czy: f64 = (0..300).map(|i| (z[i] - mz) * (y[i] - my)).sum();
        let czx: f64 = (0..300).map(|i| (z[i] - mz) * (x[i] - mx)).sum();
        assert!((fit.coef[1] - czy / czx).abs() < 1e-10);
        // Exact identification: residuals orthogonal to [1, z].
        let e = DVector::from_column_slice(&fit.residuals);
        let zz = DVector::from_column_slice(z);
        assert!((zz.dot(&e) / 300.0).abs() < 1e-8);
        assert!((e.sum() / 300.0).abs() < 1e-8);
    }

    #[test]
    fn second_stage_residuals_orthogonal_to_fitted_regressors() {
        let t = cross_section(400, 3);
        let spec = ModelSpec::new("y", ["x"]);
        let iv = IvSpec::new(InstrumentSet::new("x", ["z", "z2"]));
        let res = two_stage(&spec, &t, &iv).unwrap();
        let (fitted, _) = fitted_columns(&spec, &t, &iv, false).unwrap();
        let d = Design::from_table(&spec, &t).unwrap();
        let xh = fitted_design(&d, &iv, &fitted).unwrap();
        let e = DVector::from_column_slice(&res.fit.residuals);
        assert!(((xh.transpose() * e) / 400.0).amax() < 1e-8);
        // Projection onto the instrument span: Z'e = 0 as well since X̂ spans
        // the same space as the projection of X.
        assert!(res.first_stages[0].f_stat > 50.0);
    }

    #[test]
    fn quadratic_rules() {
        let t = cross_section(500, 4);
        let spec = ModelSpec::new("y", ["x", "x2"]);
        let set = InstrumentSet::new("x", ["z", "z2"]);
        let a = two_stage(&spec, &t, &IvSpec::new(set.clone()).with_quadratic("x2", QuadraticRule::SquareOfFitted)).unwrap();
        let b = two_stage(&spec, &t, &IvSpec::new(set).with_quadratic("x2", QuadraticRule::SeparateInstrument)).unwrap();
        assert_eq!(a.first_stages.len(), 1);
        assert_eq!(b.first_stages.len(), 2);
        assert!(a.fit.coef.iter().all(|c| c.is_finite()));
        assert!((a.fit.coef[1] - b.fit.coef[1]).abs() < 0.5);
    }

    #[test]
    fn dependent_cannot_instrument() {
        let t = cross_section(50, 5);
        let spec = ModelSpec::new("y", ["x"]);
        assert!(matches!(
            two_stage(&spec, &t, &IvSpec::new(InstrumentSet::new("x", ["y"]))),
            Err(Error::ConfigInvalid(_))
        ));
        assert!(matches!(
            two_stage(&spec, &t, &IvSpec::new(InstrumentSet::new("x", Vec::<String>::new()))),
            Err(Error::ConfigInvalid(_))
        ));
    }

    #[test]
    fn iv_recovers_slope_under_endogeneity() {
        let t = cross_section(5000, 6);
        let spec = ModelSpec::new("y", ["x"]);
        let o = ols(&Design::from_table(&spec, &t).unwrap(), CovarianceKind::Homoscedastic).unwrap();
        let iv = two_stage(&spec, &t, &IvSpec::new(InstrumentSet::new("x", ["z", "z2"]))).unwrap();
        assert!(o.coef[1] > 0.75);
        assert!((iv.fit.coef[1] - 0.5).abs() < 0.05);
    }
}
