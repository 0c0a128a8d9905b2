//! Ordinary, weighted and generalised least squares, SUR systems and the
//! covariance estimators shared by every fit in the crate.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::PanelTable;
use crate::error::{Error, Result};
use crate::linalg::{self, least_squares};

pub const INTERCEPT: &str = "const";

/// A regression specification over named table columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dependent: String,
    pub regressors: Vec<String>,
    #[serde(default = "default_true")]
    pub intercept: bool,
    /// Adds one dummy per wave except the first.
    #[serde(default)]
    pub wave_dummies: bool,
    /// Optional per-row weight column.
    #[serde(default)]
    pub weight: Option<String>,
}

fn default_true() -> bool {
    true
}

impl ModelSpec {
    pub fn new<S: Into<String>>(dependent: impl Into<String>, regressors: impl IntoIterator<Item = S>) -> Self {
        Self {
            dependent: dependent.into(),
            regressors: regressors.into_iter().map(Into::into).collect(),
            intercept: true,
            wave_dummies: false,
            weight: None,
        }
    }

    pub fn without_intercept(mut self) -> Self {
        self.intercept = false;
        self
    }

    pub fn with_wave_dummies(mut self) -> Self {
        self.wave_dummies = true;
        self
    }

    pub fn with_weight(mut self, column: impl Into<String>) -> Self {
        self.weight = Some(column.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    Intercept,
    Regressor,
    WaveDummy,
}

/// Numeric design assembled from a table: complete rows only.
#[derive(Debug, Clone)]
pub struct Design {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub names: Vec<String>,
    pub kinds: Vec<ColumnKind>,
    /// Source row of every design row.
    pub rows: Vec<usize>,
    pub unit_ids: Vec<String>,
    pub waves: Vec<i64>,
    pub weights: Option<Vec<f64>>,
    /// Rows dropped because a model variable was missing.
    pub excluded: usize,
    /// Sample means of the dependent variable and the regressors.
    pub means: BTreeMap<String, f64>,
}

impl Design {
    pub fn from_table(spec: &ModelSpec, table: &PanelTable) -> Result<Self> {
        let dep = table.column(&spec.dependent)?;
        let regs = spec
            .regressors
            .iter()
            .map(|r| table.column(r))
            .collect::<Result<Vec<_>>>()?;
        let weight = spec.weight.as_deref().map(|w| table.column(w)).transpose()?;
        let rows: Vec<usize> = (0..table.n_rows())
            .filter(|&r| {
                !dep[r].is_nan()
                    && regs.iter().all(|c| !c[r].is_nan())
                    && weight.map_or(true, |w| !w[r].is_nan())
            })
            .collect();
        let excluded = table.n_rows() - rows.len();

        let used_waves: Vec<i64> = {
            let mut w: Vec<i64> = rows.iter().map(|&r| table.waves()[r]).collect();
            w.sort_unstable();
            w.dedup();
            w
        };
        let mut names = Vec::new();
        let mut kinds = Vec::new();
        if spec.intercept {
            names.push(INTERCEPT.to_string());
            kinds.push(ColumnKind::Intercept);
        }
        for r in &spec.regressors {
            names.push(r.clone());
            kinds.push(ColumnKind::Regressor);
        }
        if spec.wave_dummies {
            for w in used_waves.iter().skip(1) {
                names.push(format!("wave_{w}"));
                kinds.push(ColumnKind::WaveDummy);
            }
        }

        let n = rows.len();
        let k = names.len();
        let mut x = DMatrix::zeros(n, k);
        for (i, &r) in rows.iter().enumerate() {
            let mut j = 0;
            if spec.intercept {
                x[(i, j)] = 1.0;
                j += 1;
            }
            for c in &regs {
                x[(i, j)] = c[r];
                j += 1;
            }
            if spec.wave_dummies {
                for w in used_waves.iter().skip(1) {
                    x[(i, j)] = if table.waves()[r] == *w { 1.0 } else { 0.0 };
                    j += 1;
                }
            }
        }
        let y = DVector::from_iterator(n, rows.iter().map(|&r| dep[r]));
        let mut means = BTreeMap::new();
        means.insert(spec.dependent.clone(), linalg::mean(y.as_slice()));
        for (name, c) in spec.regressors.iter().zip(&regs) {
            let v: Vec<f64> = rows.iter().map(|&r| c[r]).collect();
            means.insert(name.clone(), linalg::mean(&v));
        }
        Ok(Self {
            y,
            x,
            names,
            kinds,
            unit_ids: rows.iter().map(|&r| table.unit_ids()[r].clone()).collect(),
            waves: rows.iter().map(|&r| table.waves()[r]).collect(),
            weights: weight.map(|w| rows.iter().map(|&r| w[r]).collect()),
            rows,
            excluded,
            means,
        })
    }

    /// Design from raw parts; every row is its own unit in wave 1.
    pub fn from_parts(y: DVector<f64>, x: DMatrix<f64>, names: Vec<String>) -> Self {
        let n = y.len();
        let kinds = names
            .iter()
            .map(|nm| if nm == INTERCEPT { ColumnKind::Intercept } else { ColumnKind::Regressor })
            .collect();
        Self {
            y,
            x,
            names,
            kinds,
            rows: (0..n).collect(),
            unit_ids: (0..n).map(|i| i.to_string()).collect(),
            waves: vec![1; n],
            weights: None,
            excluded: 0,
            means: BTreeMap::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Subset of rows, preserving order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            y: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i])),
            x: self.x.select_rows(idx),
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            rows: idx.iter().map(|&i| self.rows[i]).collect(),
            unit_ids: idx.iter().map(|&i| self.unit_ids[i].clone()).collect(),
            waves: idx.iter().map(|&i| self.waves[i]).collect(),
            weights: self.weights.as_ref().map(|w| idx.iter().map(|&i| w[i]).collect()),
            excluded: self.excluded,
            means: self.means.clone(),
        }
    }

    /// Drops the named columns.
    pub fn drop_columns(&self, drop: &[usize]) -> Self {
        let keep: Vec<usize> = (0..self.names.len()).filter(|j| !drop.contains(j)).collect();
        let mut out = self.clone();
        out.x = self.x.select_columns(&keep);
        out.names = keep.iter().map(|&j| self.names[j].clone()).collect();
        out.kinds = keep.iter().map(|&j| self.kinds[j]).collect();
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceKind {
    Homoscedastic,
    /// Heteroscedasticity-consistent sandwich with the `n / df` small-sample
    /// factor (HC1).
    White,
    /// Cluster-robust sandwich; one group label per row.
    Cluster(Vec<usize>),
}

/// Estimates, covariance and residuals of a fitted linear model.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub method: String,
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub residuals: Vec<f64>,
    pub df: usize,
    pub n_used: usize,
    pub excluded: usize,
    pub sigma2: f64,
    pub r_squared: f64,
    /// Columns removed because the transformation annihilated them.
    pub dropped: Vec<String>,
    pub means: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl FitResult {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn coef_of(&self, name: &str) -> Option<f64> {
        self.index_of(name).map(|i| self.coef[i])
    }

    pub fn se_of(&self, name: &str) -> Option<f64> {
        self.index_of(name).map(|i| self.cov[(i, i)].max(0.0).sqrt())
    }

    pub fn se(&self) -> Vec<f64> {
        (0..self.coef.len()).map(|i| self.cov[(i, i)].max(0.0).sqrt()).collect()
    }

    pub fn t_stat(&self, name: &str) -> Option<f64> {
        Some(self.coef_of(name)? / self.se_of(name)?)
    }
}

fn r_squared(y: &DVector<f64>, resid: &DVector<f64>) -> f64 {
    let m = y.mean();
    let tss: f64 = y.iter().map(|v| (v - m) * (v - m)).sum();
    let rss = resid.norm_squared();
    if tss <= 0.0 {
        if rss <= 0.0 { 1.0 } else { 0.0 }
    } else {
        1.0 - rss / tss
    }
}

fn sandwich(x: &DMatrix<f64>, xtx_inv: &DMatrix<f64>, scores: &DMatrix<f64>) -> DMatrix<f64> {
    let meat = scores.transpose() * scores;
    let _ = x;
    xtx_inv * meat * xtx_inv
}

/// Least-squares fit of `y` on `x_fit`. When `x_struct` is given (two-stage
/// fits) residuals and the error variance use it instead of `x_fit`.
/// `absorbed` counts parameters swept out by a prior transformation and is
/// subtracted from the degrees of freedom.
pub fn fit_linear(
    method: &str,
    y: &DVector<f64>,
    x_fit: &DMatrix<f64>,
    x_struct: Option<&DMatrix<f64>>,
    names: &[String],
    cov: &CovarianceKind,
    absorbed: usize,
) -> Result<FitResult> {
    let n = y.len();
    let k = x_fit.ncols();
    if n <= k + absorbed {
        return Err(Error::InsufficientObservations { n, k: k + absorbed });
    }
    let ls = least_squares(x_fit, y, names)?;
    let resid = match x_struct {
        Some(xs) => y - xs * &ls.coef,
        None => ls.residuals.clone(),
    };
    let df = n - k - absorbed;
    let sigma2 = resid.norm_squared() / df as f64;
    let cov = match cov {
        CovarianceKind::Homoscedastic => &ls.xtx_inv * sigma2,
        CovarianceKind::White => {
            let mut scores = x_fit.clone();
            for (i, mut row) in scores.row_iter_mut().enumerate() {
                row *= resid[i];
            }
            sandwich(x_fit, &ls.xtx_inv, &scores) * (n as f64 / df as f64)
        }
        CovarianceKind::Cluster(groups) => {
            if groups.len() != n {
                return Err(Error::DimensionMismatch("cluster labels vs rows".into()));
            }
            let mut sums: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
            for i in 0..n {
                let s = sums.entry(groups[i]).or_insert_with(|| DVector::zeros(k));
                *s += x_fit.row(i).transpose() * resid[i];
            }
            let g = sums.len();
            let mut scores = DMatrix::zeros(g, k);
            for (r, s) in sums.values().enumerate() {
                scores.set_row(r, &s.transpose());
            }
            let factor = if g > 1 {
                (g as f64 / (g as f64 - 1.0)) * ((n as f64 - 1.0) / df as f64)
            } else {
                1.0
            };
            sandwich(x_fit, &ls.xtx_inv, &scores) * factor
        }
    };
    Ok(FitResult {
        method: method.to_string(),
        names: names.to_vec(),
        coef: ls.coef.as_slice().to_vec(),
        cov,
        r_squared: r_squared(y, &resid),
        residuals: resid.as_slice().to_vec(),
        df,
        n_used: n,
        excluded: 0,
        sigma2,
        dropped: Vec::new(),
        means: BTreeMap::new(),
        notes: Vec::new(),
    })
}

fn with_design_meta(mut fit: FitResult, d: &Design) -> FitResult {
    fit.excluded = d.excluded;
    fit.means = d.means.clone();
    fit
}

pub fn ols(d: &Design, cov: CovarianceKind) -> Result<FitResult> {
    let fit = fit_linear("ols", &d.y, &d.x, None, &d.names, &cov, 0)?;
    Ok(with_design_meta(fit, d))
}

fn scale_rows(m: &DMatrix<f64>, s: &[f64]) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= s[i];
    }
    out
}

/// Minimises `sum_r w_r e_r^2`. Reported residuals are on the original
/// (unweighted) scale; the covariance uses the weighted residual variance.
pub fn wls(d: &Design, weights: &[f64], cov: CovarianceKind) -> Result<FitResult> {
    if weights.len() != d.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} rows",
            weights.len(),
            d.n()
        )));
    }
    if let Some((row, &value)) = weights.iter().enumerate().find(|(_, w)| !(**w > 0.0) || !w.is_finite()) {
        return Err(Error::NonPositiveWeight { row, value });
    }
    let s: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let ys = DVector::from_iterator(d.n(), d.y.iter().zip(&s).map(|(y, s)| y * s));
    let xs = scale_rows(&d.x, &s);
    let mut fit = fit_linear("wls", &ys, &xs, None, &d.names, &cov, 0)?;
    let beta = DVector::from_column_slice(&fit.coef);
    fit.residuals = (&d.y - &d.x * beta).as_slice().to_vec();
    Ok(with_design_meta(fit, d))
}

/// GLS with a known error covariance: `beta = (X'Ω⁻¹X)⁻¹X'Ω⁻¹y`, covariance
/// `(X'Ω⁻¹X)⁻¹`. Computed by whitening with the Cholesky factor of Ω.
pub fn gls(d: &Design, omega: &DMatrix<f64>) -> Result<FitResult> {
    let n = d.n();
    if omega.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "omega is {:?}, expected {n}x{n}",
            omega.shape()
        )));
    }
    let chol = linalg::cholesky(omega)?;
    let l = chol.l();
    let yw = l.solve_lower_triangular(&d.y).ok_or(Error::NotPositiveDefinite)?;
    let xw = l.solve_lower_triangular(&d.x).ok_or(Error::NotPositiveDefinite)?;
    let ls = least_squares(&xw, &yw, &d.names)?;
    let k = d.x.ncols();
    if n <= k {
        return Err(Error::InsufficientObservations { n, k });
    }
    let df = n - k;
    let resid = &d.y - &d.x * &ls.coef;
    let mut fit = FitResult {
        method: "gls".into(),
        names: d.names.clone(),
        coef: ls.coef.as_slice().to_vec(),
        cov: ls.xtx_inv.clone(),
        r_squared: r_squared(&d.y, &resid),
        residuals: resid.as_slice().to_vec(),
        df,
        n_used: n,
        excluded: 0,
        sigma2: ls.residuals.norm_squared() / df as f64,
        dropped: Vec::new(),
        means: BTreeMap::new(),
        notes: Vec::new(),
    };
    fit = with_design_meta(fit, d);
    Ok(fit)
}

/// One equation of a linear system in a shared coefficient space: every
/// equation's design has the same number of columns, and coefficients shared
/// across equations occupy the same column.
#[derive(Debug, Clone)]
pub struct SystemEquation {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    /// Regressors used to form structural residuals (two-stage fits).
    pub x_struct: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurOptions {
    /// Iterate the feasible-GLS step until coefficients settle.
    pub iterate: bool,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SurOptions {
    fn default() -> Self {
        Self {
            iterate: false,
            max_iter: 100,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SystemFit {
    pub coef: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Cross-equation residual covariance used in the final step.
    pub sigma: DMatrix<f64>,
    pub residuals: Vec<DVector<f64>>,
    pub iterations: usize,
}

fn residual_sigma(res: &[DVector<f64>]) -> DMatrix<f64> {
    let m = res.len();
    let n = res[0].len() as f64;
    DMatrix::from_fn(m, m, |i, j| res[i].dot(&res[j]) / n)
}

fn structural_residuals(eqs: &[SystemEquation], beta: &DVector<f64>) -> Vec<DVector<f64>> {
    eqs.iter()
        .map(|e| &e.y - e.x_struct.as_ref().unwrap_or(&e.x) * beta)
        .collect()
}

/// Feasible GLS for a system of equations observed on a common set of rows,
/// with residual covariance `Σ ⊗ I`. The first step is pooled least squares;
/// `Σ` is estimated from its residuals and the system is whitened with the
/// Cholesky factor of `Σ` before a QR solve.
pub fn system_gls(eqs: &[SystemEquation], names: &[String], opts: SurOptions) -> Result<SystemFit> {
    if eqs.is_empty() {
        return Err(Error::DimensionMismatch("empty system".into()));
    }
    let n = eqs[0].y.len();
    let k = eqs[0].x.ncols();
    if eqs.iter().any(|e| e.y.len() != n || e.x.nrows() != n || e.x.ncols() != k) {
        return Err(Error::DimensionMismatch("system equations must share rows and columns".into()));
    }
    let m = eqs.len();
    let mut y_all = DVector::zeros(n * m);
    let mut x_all = DMatrix::zeros(n * m, k);
    for (i, e) in eqs.iter().enumerate() {
        y_all.rows_mut(i * n, n).copy_from(&e.y);
        x_all.rows_mut(i * n, n).copy_from(&e.x);
    }
    let mut beta = least_squares(&x_all, &y_all, names)?.coef;

    let mut iterations = 0;
    loop {
        iterations += 1;
        let res = structural_residuals(eqs, &beta);
        let sigma = residual_sigma(&res);
        let chol = sigma.clone().cholesky().ok_or(Error::SingularSigma)?;
        let l = chol.l();
        let diag_max = (0..m).map(|i| sigma[(i, i)]).fold(0.0, f64::max);
        let l_min = (0..m).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
        if diag_max <= 0.0 || l_min / diag_max < 1e-12 {
            return Err(Error::SingularSigma);
        }
        let a = l
            .solve_lower_triangular(&DMatrix::identity(m, m))
            .ok_or(Error::SingularSigma)?;
        let mut yw = DVector::zeros(n * m);
        let mut xw = DMatrix::zeros(n * m, k);
        for i in 0..m {
            for j in 0..=i {
                let c = a[(i, j)];
                if c == 0.0 {
                    continue;
                }
                let mut yr = yw.rows_mut(i * n, n);
                yr.axpy(c, &eqs[j].y, 1.0);
                let mut xr = xw.rows_mut(i * n, n);
                xr += &eqs[j].x * c;
            }
        }
        let ls = least_squares(&xw, &yw, names)?;
        let change = (&ls.coef - &beta).amax();
        beta = ls.coef;
        if !opts.iterate || change < opts.tol || iterations >= opts.max_iter {
            let residuals = structural_residuals(eqs, &beta);
            return Ok(SystemFit {
                coef: beta,
                cov: ls.xtx_inv,
                sigma,
                residuals,
                iterations,
            });
        }
    }
}

#[derive(Debug, Clone)]
pub struct SurResult {
    pub equations: Vec<FitResult>,
    /// Covariance of all coefficients, equation blocks in order.
    pub cov: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub iterations: usize,
}

/// Zellner's seemingly unrelated regressions over designs sharing rows.
pub fn sur(designs: &[Design], opts: SurOptions) -> Result<SurResult> {
    if designs.len() < 2 {
        return Err(Error::DimensionMismatch("SUR needs at least two equations".into()));
    }
    let n = designs[0].n();
    if designs.iter().any(|d| d.n() != n) {
        return Err(Error::DimensionMismatch("SUR equations must share rows".into()));
    }
    let ks: Vec<usize> = designs.iter().map(|d| d.x.ncols()).collect();
    let total: usize = ks.iter().sum();
    let mut names = Vec::with_capacity(total);
    let mut eqs = Vec::with_capacity(designs.len());
    let mut offset = 0;
    for (i, d) in designs.iter().enumerate() {
        let mut x = DMatrix::zeros(n, total);
        x.columns_mut(offset, ks[i]).copy_from(&d.x);
        names.extend(d.names.iter().map(|nm| format!("eq{i}:{nm}")));
        eqs.push(SystemEquation {
            y: d.y.clone(),
            x,
            x_struct: None,
        });
        offset += ks[i];
    }
    let sys = system_gls(&eqs, &names, opts)?;
    let mut equations = Vec::with_capacity(designs.len());
    let mut offset = 0;
    for (i, d) in designs.iter().enumerate() {
        let k = ks[i];
        let res = &sys.residuals[i];
        let df = n.saturating_sub(k).max(1);
        let fit = FitResult {
            method: "sur".into(),
            names: d.names.clone(),
            coef: sys.coef.rows(offset, k).iter().copied().collect(),
            cov: sys.cov.view((offset, offset), (k, k)).into_owned(),
            r_squared: r_squared(&d.y, res),
            residuals: res.as_slice().to_vec(),
            df,
            n_used: n,
            excluded: d.excluded,
            sigma2: res.norm_squared() / df as f64,
            dropped: Vec::new(),
            means: d.means.clone(),
            notes: Vec::new(),
        };
        equations.push(fit);
        offset += k;
    }
    Ok(SurResult {
        equations,
        cov: sys.cov,
        sigma: sys.sigma,
        iterations: sys.iterations,
    })
}
