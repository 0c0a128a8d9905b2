//! Panel transformations and the aggregation-heteroscedasticity corrections.
//!
//! Every estimator works on a [`PanelDesign`]: a balanced design whose rows
//! are indexed by (unit, wave), optionally carrying the per-row δ_Ht of a
//! pseudo-panel. Transformations are linear row operations applied jointly
//! to `y`, the structural regressors and (for two-stage fits) the fitted
//! regressors, so the same code path serves plain and instrumented fits.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::PanelTable;
use crate::error::{Error, Result};
use crate::pseudo::{DELTA_BAR_COLUMN, DELTA_COLUMN};
use crate::regress::{
    fit_linear, system_gls, ColumnKind, CovarianceKind, Design, FitResult, ModelSpec, SurOptions,
    SystemEquation,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Between,
    Within,
    FirstDifference,
    CrossSection,
}

impl TransformKind {
    pub const ALL: [TransformKind; 4] = [
        TransformKind::Between,
        TransformKind::CrossSection,
        TransformKind::Within,
        TransformKind::FirstDifference,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "between" => Ok(Self::Between),
            "within" => Ok(Self::Within),
            "fd" | "first_difference" => Ok(Self::FirstDifference),
            "cs" | "cross_section" => Ok(Self::CrossSection),
            other => Err(Error::ConfigInvalid(format!("unknown estimator `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Between => "between",
            Self::Within => "within",
            Self::FirstDifference => "fd",
            Self::CrossSection => "cs",
        }
    }
}

/// Heteroscedasticity correction for pseudo-panel cells.
///
/// * `ApproxA` scales each row by δ_H^{-1/2} (time-averaged factor).
/// * `ExactB` uses the Δ-matrix within estimator and the variance-component
///   weighted between estimator.
/// * `NoneC` leaves rows unweighted.
/// * `FalseD` scales each row by δ_Ht^{-1/2}, which makes the cell effect
///   time-varying so within and first-difference transforms no longer
///   remove it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CorrectionKind {
    #[serde(rename = "approx", alias = "approx_a")]
    ApproxA,
    #[serde(rename = "exact", alias = "exact_b")]
    ExactB,
    #[serde(rename = "none", alias = "none_c")]
    NoneC,
    #[serde(rename = "false", alias = "false_d")]
    FalseD,
}

impl CorrectionKind {
    pub const ALL: [CorrectionKind; 4] = [
        CorrectionKind::ApproxA,
        CorrectionKind::ExactB,
        CorrectionKind::NoneC,
        CorrectionKind::FalseD,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "approx" | "approx_a" | "a" => Ok(Self::ApproxA),
            "exact" | "exact_b" | "b" => Ok(Self::ExactB),
            "none" | "none_c" | "c" => Ok(Self::NoneC),
            "false" | "false_d" | "d" => Ok(Self::FalseD),
            other => Err(Error::ConfigInvalid(format!("unknown correction `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ApproxA => "approx",
            Self::ExactB => "exact",
            Self::NoneC => "none",
            Self::FalseD => "false",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WithinMode {
    #[default]
    Demean,
    /// Joint estimation of the demeaned equations of successive waves.
    PeriodSystem,
}

impl WithinMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "demean" => Ok(Self::Demean),
            "system" | "period_system" => Ok(Self::PeriodSystem),
            other => Err(Error::ConfigInvalid(format!("unknown within mode `{other}`"))),
        }
    }
}

/// Implementation of the exact within estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExactWithinPath {
    /// `(X'ΔX)⁻¹X'Δy`, computed as a 1/δ-weighted demeaning.
    #[default]
    Delta,
    /// Weighted least squares on cell dummies with weights 1/δ_Ht.
    Lsdv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdCovariance {
    /// Sandwich with the cross-equation residual covariance of the T−1
    /// difference equations, capturing their MA(1) correlation.
    #[default]
    Sur,
    ClusterUnit,
}

impl FdCovariance {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sur" => Ok(Self::Sur),
            "cluster" => Ok(Self::ClusterUnit),
            other => Err(Error::ConfigInvalid(format!("unknown fd covariance `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub sigma_mu2: f64,
    pub sigma_eps2: f64,
    /// Set when the raw σ_μ² moment was negative and truncated to zero.
    #[serde(default)]
    pub truncated: bool,
}

impl VarianceComponents {
    pub fn new(sigma_mu2: f64, sigma_eps2: f64) -> Self {
        Self {
            sigma_mu2,
            sigma_eps2,
            truncated: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EstimatorOptions {
    pub correction: Option<CorrectionKind>,
    pub within_mode: WithinMode,
    pub exact_within: ExactWithinPath,
    pub fd_covariance: FdCovariance,
    /// Variance components for the exact between estimator; estimated from
    /// the data when absent.
    pub components: Option<VarianceComponents>,
}

impl EstimatorOptions {
    pub fn with_correction(correction: CorrectionKind) -> Self {
        Self {
            correction: Some(correction),
            ..Self::default()
        }
    }

    fn correction(&self) -> CorrectionKind {
        self.correction.unwrap_or(CorrectionKind::NoneC)
    }
}

/// A balanced design indexed by (unit, wave).
#[derive(Debug, Clone)]
pub struct PanelDesign {
    pub design: Design,
    pub units: Vec<String>,
    pub waves: Vec<i64>,
    /// `index[u][t]` is the design row of unit `u` in wave `t`.
    index: Vec<Vec<usize>>,
    /// Per-row δ_Ht and δ_H when the table is a pseudo-panel.
    pub delta: Option<Vec<f64>>,
    pub delta_bar: Option<Vec<f64>>,
}

fn row_deltas(table: &PanelTable, design: &Design) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
    if !table.has_column(DELTA_COLUMN) {
        return Ok((None, None));
    }
    let d = table.column(DELTA_COLUMN)?;
    let delta: Vec<f64> = design.rows.iter().map(|&r| d[r]).collect();
    if let Some((row, &value)) = delta.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::NonPositiveWeight { row, value });
    }
    let delta_bar = if table.has_column(DELTA_BAR_COLUMN) {
        let b = table.column(DELTA_BAR_COLUMN)?;
        Some(design.rows.iter().map(|&r| b[r]).collect())
    } else {
        None
    };
    Ok((Some(delta), delta_bar))
}

impl PanelDesign {
    pub fn new(spec: &ModelSpec, table: &PanelTable) -> Result<Self> {
        let design = Design::from_table(spec, table)?;
        let (delta, delta_bar) = row_deltas(table, &design)?;
        Self::from_design(design, delta, delta_bar)
    }

    pub fn from_design(design: Design, delta: Option<Vec<f64>>, delta_bar: Option<Vec<f64>>) -> Result<Self> {
        let mut units: Vec<String> = design.unit_ids.clone();
        units.sort();
        units.dedup();
        let mut waves = design.waves.clone();
        waves.sort_unstable();
        waves.dedup();
        let mut index = vec![vec![usize::MAX; waves.len()]; units.len()];
        for r in 0..design.n() {
            let u = units.binary_search(&design.unit_ids[r]).expect("unit present");
            let t = waves.binary_search(&design.waves[r]).expect("wave present");
            index[u][t] = r;
        }
        if let Some(u) = index.iter().position(|row| row.contains(&usize::MAX)) {
            return Err(Error::Unbalanced(format!(
                "unit {} is missing a wave among the rows with complete data",
                units[u]
            )));
        }
        let delta_bar = match (&delta, delta_bar) {
            (_, Some(b)) => Some(b),
            (Some(d), None) => {
                let mut b = vec![0.0; design.n()];
                for row in &index {
                    let m = row.iter().map(|&r| d[r]).sum::<f64>() / row.len() as f64;
                    for &r in row {
                        b[r] = m;
                    }
                }
                Some(b)
            }
            (None, None) => None,
        };
        Ok(Self {
            design,
            units,
            waves,
            index,
            delta,
            delta_bar,
        })
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_waves(&self) -> usize {
        self.waves.len()
    }

    pub fn row(&self, unit: usize, wave: usize) -> usize {
        self.index[unit][wave]
    }

    fn require_delta(&self, what: &str) -> Result<(&[f64], &[f64])> {
        match (&self.delta, &self.delta_bar) {
            (Some(d), Some(b)) => Ok((d, b)),
            _ => Err(Error::NotApplicable(format!(
                "{what} correction needs a pseudo-panel with a `{DELTA_COLUMN}` column"
            ))),
        }
    }

    /// Time average of δ_Ht per unit.
    pub fn unit_delta_bar(&self) -> Option<Vec<f64>> {
        let b = self.delta_bar.as_ref()?;
        Some(self.index.iter().map(|row| b[row[0]]).collect())
    }
}

/// Stacked `[y | X | X_fit]` so every transformation is applied once.
struct Block {
    m: DMatrix<f64>,
    k: usize,
    has_fit: bool,
}

impl Block {
    fn new(y: &DVector<f64>, x: &DMatrix<f64>, x_fit: Option<&DMatrix<f64>>) -> Self {
        let n = y.len();
        let k = x.ncols();
        let width = 1 + k + if x_fit.is_some() { k } else { 0 };
        let mut m = DMatrix::zeros(n, width);
        m.set_column(0, y);
        m.columns_mut(1, k).copy_from(x);
        if let Some(f) = x_fit {
            m.columns_mut(1 + k, k).copy_from(f);
        }
        Self {
            m,
            k,
            has_fit: x_fit.is_some(),
        }
    }

    fn y(&self) -> DVector<f64> {
        self.m.column(0).into_owned()
    }

    fn x(&self) -> DMatrix<f64> {
        self.m.columns(1, self.k).into_owned()
    }

    fn x_fit(&self) -> DMatrix<f64> {
        if self.has_fit {
            self.m.columns(1 + self.k, self.k).into_owned()
        } else {
            self.x()
        }
    }

    fn x_struct(&self) -> Option<DMatrix<f64>> {
        self.has_fit.then(|| self.x())
    }

    fn with_rows(&self, m: DMatrix<f64>) -> Self {
        Self {
            m,
            k: self.k,
            has_fit: self.has_fit,
        }
    }

    fn keep_columns(&self, keep: &[usize]) -> Self {
        let mut cols = vec![0];
        cols.extend(keep.iter().map(|j| 1 + j));
        if self.has_fit {
            cols.extend(keep.iter().map(|j| 1 + self.k + j));
        }
        Self {
            m: self.m.select_columns(&cols),
            k: keep.len(),
            has_fit: self.has_fit,
        }
    }
}

fn scale_rows(m: &DMatrix<f64>, s: &[f64]) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= s[i];
    }
    out
}

/// Row scaling implementing the approximate and false corrections.
fn correction_scale(pd: &PanelDesign, correction: CorrectionKind) -> Result<Option<Vec<f64>>> {
    match correction {
        CorrectionKind::NoneC => Ok(None),
        CorrectionKind::ApproxA => {
            let (_, b) = pd.require_delta("approximate")?;
            Ok(Some(b.iter().map(|v| v.powf(-0.5)).collect()))
        }
        CorrectionKind::FalseD => {
            let (d, _) = pd.require_delta("false")?;
            Ok(Some(d.iter().map(|v| v.powf(-0.5)).collect()))
        }
        CorrectionKind::ExactB => Err(Error::NotApplicable(
            "exact correction has no row-scaling form".into(),
        )),
    }
}

fn unit_means(pd: &PanelDesign, m: &DMatrix<f64>) -> DMatrix<f64> {
    let t = pd.n_waves() as f64;
    let mut out = DMatrix::zeros(pd.n_units(), m.ncols());
    for (u, rows) in pd.index.iter().enumerate() {
        for &r in rows {
            let mut o = out.row_mut(u);
            o += m.row(r) / t;
        }
    }
    out
}

fn demean(pd: &PanelDesign, m: &DMatrix<f64>) -> DMatrix<f64> {
    let means = unit_means(pd, m);
    let mut out = m.clone();
    for (u, rows) in pd.index.iter().enumerate() {
        for &r in rows {
            let mut o = out.row_mut(r);
            o -= means.row(u);
        }
    }
    out
}

/// `Δ`-transform: subtract the 1/d-weighted unit mean, then scale by d^{-1/2}.
/// For any vectors `a`, `b`, `a'Δb` equals the inner product of the
/// transformed vectors.
fn weighted_demean(pd: &PanelDesign, m: &DMatrix<f64>, d: &[f64]) -> DMatrix<f64> {
    let mut out = m.clone();
    for rows in &pd.index {
        let wsum: f64 = rows.iter().map(|&r| 1.0 / d[r]).sum();
        let mut mean = DMatrix::zeros(1, m.ncols());
        for &r in rows {
            mean += m.row(r) / (d[r] * wsum);
        }
        for &r in rows {
            let mut o = out.row_mut(r);
            o -= &mean;
            o /= d[r].sqrt();
        }
    }
    out
}

/// Indices of structural columns that the transformation left non-zero.
fn surviving_columns(before: &DMatrix<f64>, after: &DMatrix<f64>, k: usize) -> Vec<usize> {
    (0..k)
        .filter(|&j| {
            let scale = before.column(1 + j).amax().max(1.0);
            after.column(1 + j).amax() > 1e-9 * scale
        })
        .collect()
}

fn finish(mut fit: FitResult, pd: &PanelDesign, names: &[String], keep: &[usize], method: String) -> Result<FitResult> {
    fit.method = method;
    fit.names = keep.iter().map(|&j| names[j].clone()).collect();
    fit.dropped = (0..names.len())
        .filter(|j| !keep.contains(j))
        .map(|j| names[j].clone())
        .collect();
    fit.excluded = pd.design.excluded;
    fit.means = pd.design.means.clone();
    Ok(fit)
}

fn check_identified(pd: &PanelDesign, keep: &[usize]) -> Result<()> {
    let kinds = &pd.design.kinds;
    if kinds.contains(&ColumnKind::Regressor) && !keep.iter().any(|&j| kinds[j] == ColumnKind::Regressor) {
        return Err(Error::NotIdentified(
            "every regressor is time-invariant within units".into(),
        ));
    }
    if keep.is_empty() {
        return Err(Error::NotIdentified("no column survives the transformation".into()));
    }
    Ok(())
}

fn block_of(pd: &PanelDesign, x_fit: Option<&DMatrix<f64>>) -> Result<Block> {
    if let Some(f) = x_fit {
        if f.shape() != pd.design.x.shape() {
            return Err(Error::DimensionMismatch("fitted regressors do not match the design".into()));
        }
    }
    Ok(Block::new(&pd.design.y, &pd.design.x, x_fit))
}

fn tag(base: &str, correction: CorrectionKind, instrumented: bool) -> String {
    let mut s = format!("{base}/{}", correction.as_str());
    if instrumented {
        s.push_str("/iv");
    }
    s
}

/// Regression on unit time means. Wave dummies are dropped.
pub fn fit_between(pd: &PanelDesign, x_fit: Option<&DMatrix<f64>>, opts: &EstimatorOptions) -> Result<FitResult> {
    let correction = opts.correction();
    let keep: Vec<usize> = (0..pd.design.names.len())
        .filter(|&j| pd.design.kinds[j] != ColumnKind::WaveDummy)
        .collect();
    let block = block_of(pd, x_fit)?.keep_columns(&keep);
    let (means, weights) = match correction {
        CorrectionKind::ExactB => {
            let w_c = pd.unit_delta_bar().ok_or_else(|| {
                Error::NotApplicable(format!("exact correction needs a pseudo-panel with a `{DELTA_COLUMN}` column"))
            })?;
            let vc = match opts.components {
                Some(vc) => vc,
                None => variance_components_design(pd)?,
            };
            let t = pd.n_waves() as f64;
            let w: Vec<f64> = w_c
                .iter()
                .map(|w| 1.0 / (vc.sigma_mu2 + vc.sigma_eps2 * w / t))
                .collect();
            (unit_means(pd, &block.m), Some(w))
        }
        other => {
            let m = match correction_scale(pd, other)? {
                Some(s) => scale_rows(&block.m, &s),
                None => block.m.clone(),
            };
            (unit_means(pd, &m), None)
        }
    };
    let mut b = block.with_rows(means);
    if let Some(w) = &weights {
        if let Some((row, &value)) = w.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::NonPositiveWeight { row, value });
        }
        let s: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
        b.m = scale_rows(&b.m, &s);
    }
    let names: Vec<String> = keep.iter().map(|&j| pd.design.names[j].clone()).collect();
    let xs = b.x_struct();
    let fit = fit_linear("", &b.y(), &b.x_fit(), xs.as_ref(), &names, &CovarianceKind::Homoscedastic, 0)?;
    let mut fit = finish(fit, pd, &pd.design.names, &keep, tag("between", correction, x_fit.is_some()))?;
    if weights.is_some() {
        fit.notes.push("weights 1/(sigma_mu2 + sigma_eps2 * w_c / T)".into());
    }
    Ok(fit)
}

fn within_block(pd: &PanelDesign, block: &Block, opts: &EstimatorOptions) -> Result<DMatrix<f64>> {
    match opts.correction() {
        CorrectionKind::ExactB => {
            let (d, _) = pd.require_delta("exact")?;
            Ok(weighted_demean(pd, &block.m, d))
        }
        other => {
            let m = match correction_scale(pd, other)? {
                Some(s) => scale_rows(&block.m, &s),
                None => block.m.clone(),
            };
            Ok(demean(pd, &m))
        }
    }
}

/// Within (fixed-effects) estimator.
pub fn fit_within(pd: &PanelDesign, x_fit: Option<&DMatrix<f64>>, opts: &EstimatorOptions) -> Result<FitResult> {
    let correction = opts.correction();
    let block = block_of(pd, x_fit)?;
    let transformed = within_block(pd, &block, opts)?;
    let keep = surviving_columns(&block.m, &transformed, block.k);
    check_identified(pd, &keep)?;
    let names = &pd.design.names;
    let kept_names: Vec<String> = keep.iter().map(|&j| names[j].clone()).collect();
    let b = block.with_rows(transformed).keep_columns(&keep);
    let n_units = pd.n_units();
    let instrumented = x_fit.is_some();

    if opts.within_mode == WithinMode::PeriodSystem {
        if pd.n_waves() < 2 {
            return Err(Error::NotIdentified("period system needs at least two waves".into()));
        }
        // The demeaned equations of all T waves are linearly dependent; the
        // last one is dropped.
        let xs_full = b.x_struct();
        let eqs: Vec<SystemEquation> = (0..pd.n_waves() - 1)
            .map(|t| {
                let rows: Vec<usize> = (0..n_units).map(|u| pd.row(u, t)).collect();
                SystemEquation {
                    y: DVector::from_iterator(n_units, rows.iter().map(|&r| b.m[(r, 0)])),
                    x: b.x_fit().select_rows(&rows),
                    x_struct: xs_full.as_ref().map(|x| x.select_rows(&rows)),
                }
            })
            .collect();
        let sys = system_gls(&eqs, &kept_names, SurOptions::default())?;
        let x_struct = b.x();
        let resid = b.y() - &x_struct * &sys.coef;
        let n = resid.len();
        let k = keep.len();
        if n <= k + n_units {
            return Err(Error::InsufficientObservations { n, k: k + n_units });
        }
        let df = n - k - n_units;
        let fit = FitResult {
            method: String::new(),
            names: kept_names.clone(),
            coef: sys.coef.as_slice().to_vec(),
            cov: sys.cov,
            r_squared: {
                let y = b.y();
                let m = y.mean();
                let tss: f64 = y.iter().map(|v| (v - m).powi(2)).sum();
                if tss > 0.0 { 1.0 - resid.norm_squared() / tss } else { 1.0 }
            },
            sigma2: resid.norm_squared() / df as f64,
            residuals: resid.as_slice().to_vec(),
            df,
            n_used: n,
            excluded: 0,
            dropped: Vec::new(),
            means: Default::default(),
            notes: vec!["system of demeaned period equations (last wave dropped)".into()],
        };
        return finish(fit, pd, names, &keep, tag("within_system", correction, instrumented));
    }

    if correction == CorrectionKind::ExactB && opts.exact_within == ExactWithinPath::Lsdv {
        return lsdv_within(pd, &block, &keep, instrumented);
    }

    let xs = b.x_struct();
    let fit = fit_linear("", &b.y(), &b.x_fit(), xs.as_ref(), &kept_names, &CovarianceKind::Homoscedastic, n_units)?;
    finish(fit, pd, names, &keep, tag("within", correction, instrumented))
}

/// Exact within estimator as weighted least squares with one dummy per cell
/// and weights 1/δ_Ht.
fn lsdv_within(pd: &PanelDesign, block: &Block, keep: &[usize], instrumented: bool) -> Result<FitResult> {
    let (d, _) = pd.require_delta("exact")?;
    let n = pd.design.n();
    let n_units = pd.n_units();
    let k = keep.len();
    let s: Vec<f64> = d.iter().map(|v| v.powf(-0.5)).collect();
    let mut x = DMatrix::zeros(n, k + n_units);
    let mut xf = DMatrix::zeros(n, k + n_units);
    let bx = block.x();
    let bf = block.x_fit();
    for (u, rows) in pd.index.iter().enumerate() {
        for &r in rows {
            for (c, &j) in keep.iter().enumerate() {
                x[(r, c)] = bx[(r, j)] * s[r];
                xf[(r, c)] = bf[(r, j)] * s[r];
            }
            x[(r, k + u)] = s[r];
            xf[(r, k + u)] = s[r];
        }
    }
    let y = DVector::from_fn(n, |r, _| pd.design.y[r] * s[r]);
    let mut names: Vec<String> = keep.iter().map(|&j| pd.design.names[j].clone()).collect();
    names.extend(pd.units.iter().map(|u| format!("cell_{u}")));
    let xs = instrumented.then_some(&x);
    let full = fit_linear("", &y, &xf, xs, &names, &CovarianceKind::Homoscedastic, 0)?;
    let fit = FitResult {
        coef: full.coef[..k].to_vec(),
        cov: full.cov.view((0, 0), (k, k)).into_owned(),
        names: names[..k].to_vec(),
        ..full
    };
    finish(
        fit,
        pd,
        &pd.design.names,
        keep,
        tag("within_lsdv", CorrectionKind::ExactB, instrumented),
    )
}

/// First-difference estimator: pooled least squares on Δy, ΔX over waves
/// 2..T.
pub fn fit_first_difference(
    pd: &PanelDesign,
    x_fit: Option<&DMatrix<f64>>,
    opts: &EstimatorOptions,
) -> Result<FitResult> {
    let correction = opts.correction();
    if correction == CorrectionKind::ExactB {
        return Err(Error::NotApplicable(
            "the exact correction is defined for within and between estimators only".into(),
        ));
    }
    let t_len = pd.n_waves();
    if t_len < 2 {
        return Err(Error::NotIdentified("first differences need at least two waves".into()));
    }
    let block = block_of(pd, x_fit)?;
    let scaled = match correction_scale(pd, correction)? {
        Some(s) => scale_rows(&block.m, &s),
        None => block.m.clone(),
    };
    let n_units = pd.n_units();
    let n_eq = t_len - 1;
    // Rows ordered equation-major: all units for wave 2, then wave 3, ...
    let mut diff = DMatrix::zeros(n_units * n_eq, scaled.ncols());
    for t in 1..t_len {
        for u in 0..n_units {
            let r = (t - 1) * n_units + u;
            let row = scaled.row(pd.row(u, t)) - scaled.row(pd.row(u, t - 1));
            diff.set_row(r, &row);
        }
    }
    let mut before = DMatrix::zeros(1, scaled.ncols());
    for j in 0..scaled.ncols() {
        before[(0, j)] = scaled.column(j).amax();
    }
    let keep = surviving_columns(&before, &diff, block.k);
    check_identified(pd, &keep)?;
    let names = &pd.design.names;
    let kept_names: Vec<String> = keep.iter().map(|&j| names[j].clone()).collect();
    let b = block.with_rows(diff).keep_columns(&keep);
    let xs = b.x_struct();
    let x_fit_d = b.x_fit();
    let cov_kind = match opts.fd_covariance {
        FdCovariance::ClusterUnit => CovarianceKind::Cluster((0..n_units * n_eq).map(|r| r % n_units).collect()),
        FdCovariance::Sur => CovarianceKind::Homoscedastic,
    };
    let mut fit = fit_linear("", &b.y(), &x_fit_d, xs.as_ref(), &kept_names, &cov_kind, 0)?;
    if opts.fd_covariance == FdCovariance::Sur {
        // Bread (X'X)⁻¹ recovered from the homoscedastic covariance.
        let bread = if fit.sigma2 > 0.0 {
            &fit.cov / fit.sigma2
        } else {
            crate::linalg::least_squares(&x_fit_d, &b.y(), &kept_names)?.xtx_inv
        };
        let e = &fit.residuals;
        let sigma = DMatrix::from_fn(n_eq, n_eq, |s, t| {
            (0..n_units).map(|u| e[s * n_units + u] * e[t * n_units + u]).sum::<f64>() / n_units as f64
        });
        let k = keep.len();
        let mut meat = DMatrix::zeros(k, k);
        for s in 0..n_eq {
            let xs_blk = x_fit_d.rows(s * n_units, n_units);
            for t in 0..n_eq {
                if sigma[(s, t)] == 0.0 {
                    continue;
                }
                let xt_blk = x_fit_d.rows(t * n_units, n_units);
                meat += xs_blk.transpose() * xt_blk * sigma[(s, t)];
            }
        }
        fit.cov = &bread * meat * &bread;
        fit.cov = (&fit.cov + fit.cov.transpose()) * 0.5;
        fit.notes.push("covariance from the cross-equation residual covariance of the difference equations".into());
    }
    finish(fit, pd, names, &keep, tag("fd", correction, x_fit.is_some()))
}

/// Per-wave fits and their pooled summary.
#[derive(Debug, Clone)]
pub struct CrossSectionFit {
    pub per_wave: Vec<(i64, FitResult)>,
    /// Unweighted mean of per-wave coefficients; covariance is the mean
    /// covariance divided by the number of waves.
    pub pooled: FitResult,
}

/// Independent per-wave least squares with heteroscedasticity-consistent
/// covariance. Does not require a balanced panel.
pub fn fit_cross_section(
    design: &Design,
    x_fit: Option<&DMatrix<f64>>,
    delta: Option<(&[f64], &[f64])>,
    correction: CorrectionKind,
) -> Result<CrossSectionFit> {
    let keep: Vec<usize> = (0..design.names.len())
        .filter(|&j| design.kinds[j] != ColumnKind::WaveDummy)
        .collect();
    let names: Vec<String> = keep.iter().map(|&j| design.names[j].clone()).collect();
    let block = Block::new(&design.y, &design.x, x_fit).keep_columns(&keep);
    let scale: Option<Vec<f64>> = match correction {
        CorrectionKind::NoneC => None,
        CorrectionKind::ExactB => {
            return Err(Error::NotApplicable(
                "the exact correction is defined for within and between estimators only".into(),
            ))
        }
        CorrectionKind::ApproxA | CorrectionKind::FalseD => {
            let (d, b) = delta.ok_or_else(|| {
                Error::NotApplicable(format!("correction needs a pseudo-panel with a `{DELTA_COLUMN}` column"))
            })?;
            let src = if correction == CorrectionKind::ApproxA { b } else { d };
            Some(src.iter().map(|v| v.powf(-0.5)).collect())
        }
    };
    let m = match &scale {
        Some(s) => scale_rows(&block.m, s),
        None => block.m.clone(),
    };
    let mut waves = design.waves.clone();
    waves.sort_unstable();
    waves.dedup();
    let mut per_wave = Vec::with_capacity(waves.len());
    for &w in &waves {
        let rows: Vec<usize> = (0..design.n()).filter(|&r| design.waves[r] == w).collect();
        let b = block.with_rows(m.select_rows(&rows));
        let xs = b.x_struct();
        let mut fit = fit_linear(
            "",
            &b.y(),
            &b.x_fit(),
            xs.as_ref(),
            &names,
            &CovarianceKind::White,
            0,
        )?;
        fit.method = format!("ols_white/wave_{w}");
        fit.means = design.means.clone();
        per_wave.push((w, fit));
    }
    let n_w = per_wave.len() as f64;
    let k = names.len();
    let mut coef = vec![0.0; k];
    let mut cov = DMatrix::zeros(k, k);
    let mut residuals = vec![0.0; design.n()];
    let mut n_used = 0;
    let mut df = 0;
    let mut sigma2 = 0.0;
    let mut r2 = 0.0;
    for (w, fit) in &per_wave {
        for j in 0..k {
            coef[j] += fit.coef[j] / n_w;
        }
        cov += &fit.cov / n_w;
        let rows: Vec<usize> = (0..design.n()).filter(|&r| design.waves[r] == *w).collect();
        for (i, &r) in rows.iter().enumerate() {
            residuals[r] = fit.residuals[i];
        }
        n_used += fit.n_used;
        df += fit.df;
        sigma2 += fit.sigma2 / n_w;
        r2 += fit.r_squared / n_w;
    }
    cov /= n_w;
    let mut method = format!("cs/{}", correction.as_str());
    if x_fit.is_some() {
        method.push_str("/iv");
    }
    let pooled = FitResult {
        method,
        names,
        coef,
        cov,
        residuals,
        df,
        n_used,
        excluded: design.excluded,
        sigma2,
        r_squared: r2,
        dropped: design
            .names
            .iter()
            .enumerate()
            .filter(|(j, _)| !keep.contains(j))
            .map(|(_, n)| n.clone())
            .collect(),
        means: design.means.clone(),
        notes: vec![format!("mean of {} per-wave estimates", per_wave.len())],
    };
    Ok(CrossSectionFit { per_wave, pooled })
}

/// Swamy–Arora style moments. σ̂_ε² is the within residual mean square
/// (using the Δ transform when δ is available); σ̂_μ² is the between residual
/// mean square minus σ̂_ε²·mean(w_c)/T, truncated at zero.
pub fn variance_components_design(pd: &PanelDesign) -> Result<VarianceComponents> {
    let t = pd.n_waves();
    if t < 2 {
        return Err(Error::NotIdentified("variance components need at least two waves".into()));
    }
    let within_opts = EstimatorOptions {
        correction: Some(if pd.delta.is_some() {
            CorrectionKind::ExactB
        } else {
            CorrectionKind::NoneC
        }),
        ..EstimatorOptions::default()
    };
    let w = fit_within(pd, None, &within_opts)?;
    let sigma_eps2 = w.sigma2;
    let b = fit_between(pd, None, &EstimatorOptions::with_correction(CorrectionKind::NoneC))?;
    let mean_w = pd
        .unit_delta_bar()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .unwrap_or(1.0);
    let raw = b.sigma2 - sigma_eps2 * mean_w / t as f64;
    Ok(VarianceComponents {
        sigma_mu2: raw.max(0.0),
        sigma_eps2,
        truncated: raw < 0.0,
    })
}

/// Builds the (unit, wave) design and dispatches to the chosen estimator.
pub fn estimate(kind: TransformKind, spec: &ModelSpec, table: &PanelTable, opts: &EstimatorOptions) -> Result<FitResult> {
    if kind == TransformKind::CrossSection {
        return Ok(cross_section_fit(spec, table, opts.correction())?.pooled);
    }
    let pd = PanelDesign::new(spec, table)?;
    estimate_design(kind, &pd, None, opts)
}

pub fn estimate_design(
    kind: TransformKind,
    pd: &PanelDesign,
    x_fit: Option<&DMatrix<f64>>,
    opts: &EstimatorOptions,
) -> Result<FitResult> {
    match kind {
        TransformKind::Between => fit_between(pd, x_fit, opts),
        TransformKind::Within => fit_within(pd, x_fit, opts),
        TransformKind::FirstDifference => fit_first_difference(pd, x_fit, opts),
        TransformKind::CrossSection => {
            let delta = pd
                .delta
                .as_deref()
                .zip(pd.delta_bar.as_deref());
            Ok(fit_cross_section(&pd.design, x_fit, delta, opts.correction())?.pooled)
        }
    }
}

pub fn between_fit(spec: &ModelSpec, table: &PanelTable, correction: CorrectionKind) -> Result<FitResult> {
    fit_between(&PanelDesign::new(spec, table)?, None, &EstimatorOptions::with_correction(correction))
}

pub fn within_fit(spec: &ModelSpec, table: &PanelTable, correction: CorrectionKind, mode: WithinMode) -> Result<FitResult> {
    let opts = EstimatorOptions {
        correction: Some(correction),
        within_mode: mode,
        ..EstimatorOptions::default()
    };
    fit_within(&PanelDesign::new(spec, table)?, None, &opts)
}

pub fn first_difference_fit(spec: &ModelSpec, table: &PanelTable, correction: CorrectionKind) -> Result<FitResult> {
    fit_first_difference(&PanelDesign::new(spec, table)?, None, &EstimatorOptions::with_correction(correction))
}

/// Per-row δ_Ht and δ_H of a pseudo-panel table for the rows of `design`.
/// Without a `delta_bar` column, δ_Ht stands in for δ_H.
pub fn design_deltas(table: &PanelTable, design: &Design) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
    let (d, b) = row_deltas(table, design)?;
    let b = match (&d, b) {
        (Some(_), Some(b)) => Some(b),
        (Some(d), None) => Some(d.clone()),
        _ => None,
    };
    Ok((d, b))
}

pub fn cross_section_fit(spec: &ModelSpec, table: &PanelTable, correction: CorrectionKind) -> Result<CrossSectionFit> {
    let design = Design::from_table(spec, table)?;
    let (d, b) = design_deltas(table, &design)?;
    let delta = d.as_deref().zip(b.as_deref());
    fit_cross_section(&design, None, delta, correction)
}

pub fn variance_components(spec: &ModelSpec, table: &PanelTable) -> Result<VarianceComponents> {
    variance_components_design(&PanelDesign::new(spec, table)?)
}

/// The explicit `Δ = D⁻¹ − D⁻¹Z(Z'D⁻¹Z)⁻¹Z'D⁻¹` for diagonal `D = diag(d)`.
pub fn delta_matrix(d: &[f64], z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = d.len();
    if z.nrows() != n {
        return Err(Error::DimensionMismatch("Z rows vs diagonal length".into()));
    }
    let d_inv = DMatrix::from_diagonal(&DVector::from_iterator(n, d.iter().map(|v| 1.0 / v)));
    let dz = &d_inv * z;
    let ztdz = z.transpose() * &dz;
    let inv = crate::linalg::cholesky(&ztdz)?.inverse();
    Ok(&d_inv - &dz * inv * dz.transpose())
}

/// Between operator `B` on the (cell, wave) index with rows ordered cell-major:
/// block-diagonal `J_T / T`.
pub fn between_operator(cells: usize, waves: usize) -> DMatrix<f64> {
    let n = cells * waves;
    DMatrix::from_fn(n, n, |i, j| {
        if i / waves == j / waves {
            1.0 / waves as f64
        } else {
            0.0
        }
    })
}

/// `Ω = σ_μ²·T·B + σ_ε²·D` on the cell-major (cell, wave) index; `delta` is
/// cells × waves.
pub fn omega_matrix(delta: &DMatrix<f64>, vc: &VarianceComponents) -> DMatrix<f64> {
    let (cells, waves) = delta.shape();
    let b = between_operator(cells, waves);
    let d = DVector::from_fn(cells * waves, |r, _| delta[(r / waves, r % waves)]);
    b * (vc.sigma_mu2 * waves as f64) + DMatrix::from_diagonal(&(d * vc.sigma_eps2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralCheck {
    pub decomposable: bool,
    pub asymmetry: f64,
}

/// Tests whether `BΩ` is symmetric, the condition for the spectral
/// decomposition of GLS into between and within parts. With σ_ε² > 0 this
/// holds exactly when δ_Ht is constant over waves within every cell.
pub fn spectral_check(delta: &DMatrix<f64>, vc: &VarianceComponents) -> SpectralCheck {
    let (cells, waves) = delta.shape();
    let b = between_operator(cells, waves);
    let bo = &b * omega_matrix(delta, vc);
    let asymmetry = (&bo - bo.transpose()).amax();
    SpectralCheck {
        decomposable: asymmetry < 1e-10,
        asymmetry,
    }
}

/// GLS on a pseudo-panel with time-invariant δ written as the matrix-weighted
/// combination of the exact within and exact between estimates:
/// `β = (H_W + H_B)⁻¹(H_W β_W + H_B β_B)` with `H_W`, `H_B` the inverse
/// covariances under the true variance components.
pub fn spectral_combination(pd: &PanelDesign, vc: &VarianceComponents) -> Result<DVector<f64>> {
    let opts = EstimatorOptions {
        correction: Some(CorrectionKind::ExactB),
        components: Some(*vc),
        ..EstimatorOptions::default()
    };
    let w = fit_within(pd, None, &opts)?;
    let b = fit_between(pd, None, &opts)?;
    let names = &pd.design.names;
    let k = names.len();
    let (d, _) = pd.require_delta("exact")?;

    // H_W = X'ΔX / σ_ε² on the columns surviving the within transform.
    let wd = weighted_demean(pd, &pd.design.x, d);
    let mut h_w = DMatrix::zeros(k, k);
    let mut beta_w = DVector::zeros(k);
    let idx_w: Vec<usize> = w.names.iter().map(|n| names.iter().position(|m| m == n).unwrap()).collect();
    let xw = wd.select_columns(&idx_w);
    let hw_small = xw.transpose() * &xw / vc.sigma_eps2;
    for (a, &i) in idx_w.iter().enumerate() {
        beta_w[i] = w.coef[a];
        for (c, &j) in idx_w.iter().enumerate() {
            h_w[(i, j)] = hw_small[(a, c)];
        }
    }

    // H_B = Σ_c T x̄_c x̄_c' / (σ_ε² w_c + T σ_μ²).
    let t = pd.n_waves() as f64;
    let w_c = pd.unit_delta_bar().expect("delta present");
    let means = unit_means(pd, &pd.design.x);
    let idx_b: Vec<usize> = b.names.iter().map(|n| names.iter().position(|m| m == n).unwrap()).collect();
    let mut h_b = DMatrix::zeros(k, k);
    let mut beta_b = DVector::zeros(k);
    for (c, wc) in w_c.iter().enumerate() {
        let xm = means.row(c).transpose();
        h_b += &xm * xm.transpose() * (t / (vc.sigma_eps2 * wc + t * vc.sigma_mu2));
    }
    for (a, &i) in idx_b.iter().enumerate() {
        beta_b[i] = b.coef[a];
    }
    let lhs = &h_w + &h_b;
    let rhs = &h_w * beta_w + &h_b * beta_b;
    lhs.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::RankDeficient { columns: names.clone() })
}
