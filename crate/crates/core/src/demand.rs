//! (Q)AIDS share equations
//! `w = a + b·x + (c / e(p))·x² + Z d + u` with `x = ln Y − ln P` (Stone
//! index), the outer iteration on `e(p) = Π_i p_i^{b_i}`, expenditure and
//! own-price elasticities, and the shadow-price elasticity.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{PanelTable, VariableRole};
use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimatorOptions, TransformKind};
use crate::linalg;
use crate::regress::{FitResult, ModelSpec};

/// Deflated log outlay regressor added to the working table.
pub const LY: &str = "ly";
/// Quadratic term `ly² / e(p)`.
pub const LY2: &str = "ly2";
/// Prefix of log-price regressors.
pub const LNP_PREFIX: &str = "lnp_";

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Good {
    pub name: String,
    pub share: String,
    #[serde(default)]
    pub price: Option<String>,
}

impl Good {
    pub fn new(name: impl Into<String>, share: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            share: share.into(),
            price: None,
        }
    }

    pub fn with_price(mut self, column: impl Into<String>) -> Self {
        self.price = Some(column.into());
        self
    }
}

/// Share-equation system. The listed goods need not exhaust the budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandSpec {
    pub goods: Vec<Good>,
    pub log_outlay: String,
    #[serde(default)]
    pub demographics: Vec<String>,
    /// Wave dummies; the usual fallback when no price data exist.
    #[serde(default)]
    pub wave_dummies: bool,
    #[serde(default)]
    pub quadratic: bool,
    /// Adds `ln p_j` of every good as regressors, enabling own-price
    /// elasticities.
    #[serde(default)]
    pub price_terms: bool,
}

impl DemandSpec {
    pub fn new(goods: Vec<Good>, log_outlay: impl Into<String>) -> Self {
        Self {
            goods,
            log_outlay: log_outlay.into(),
            demographics: Vec::new(),
            wave_dummies: false,
            quadratic: false,
            price_terms: false,
        }
    }

    pub fn quadratic(mut self) -> Self {
        self.quadratic = true;
        self
    }

    pub fn with_wave_dummies(mut self) -> Self {
        self.wave_dummies = true;
        self
    }

    pub fn with_demographics<S: Into<String>>(mut self, cols: impl IntoIterator<Item = S>) -> Self {
        self.demographics = cols.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_price_terms(mut self) -> Self {
        self.price_terms = true;
        self
    }

    fn has_prices(&self) -> Result<bool> {
        let n = self.goods.iter().filter(|g| g.price.is_some()).count();
        if n != 0 && n != self.goods.len() {
            return Err(Error::ConfigInvalid(
                "either every good or no good must have a price column".into(),
            ));
        }
        Ok(n > 0)
    }

    fn validate(&self) -> Result<bool> {
        if self.goods.is_empty() {
            return Err(Error::ConfigInvalid("demand system has no goods".into()));
        }
        let prices = self.has_prices()?;
        if self.price_terms && !prices {
            return Err(Error::ConfigInvalid("price terms need price columns".into()));
        }
        Ok(prices)
    }

    fn regressors(&self) -> Vec<String> {
        let mut r = vec![LY.to_string()];
        if self.quadratic {
            r.push(LY2.to_string());
        }
        if self.price_terms {
            r.extend(self.goods.iter().map(|g| format!("{LNP_PREFIX}{}", g.name)));
        }
        r.extend(self.demographics.iter().cloned());
        r
    }
}

fn check_price(good: &str, p: f64) -> Result<f64> {
    if p > 0.0 && p.is_finite() {
        Ok(p.ln())
    } else {
        Err(Error::NonPositivePrice {
            good: good.to_string(),
            value: p,
        })
    }
}

/// Stone log price index per wave, `ln P_t = Σ_i w̄_i ln p_it`, normalised so
/// that the first wave is 0. `prices[i][t]` is the price of good `i` in wave
/// `t`.
pub fn stone_index(prices: &[Vec<f64>], mean_shares: &[f64]) -> Result<Vec<f64>> {
    if prices.len() != mean_shares.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} price series for {} shares",
            prices.len(),
            mean_shares.len()
        )));
    }
    let waves = prices.first().map_or(0, Vec::len);
    let mut idx = vec![0.0; waves];
    for (i, (series, w)) in prices.iter().zip(mean_shares).enumerate() {
        if series.len() != waves {
            return Err(Error::DimensionMismatch("price series of unequal length".into()));
        }
        for (t, &p) in series.iter().enumerate() {
            idx[t] += w * check_price(&i.to_string(), p)?;
        }
    }
    let base = idx.first().copied().unwrap_or(0.0);
    Ok(idx.into_iter().map(|v| v - base).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub iteration: usize,
    /// Largest absolute coefficient change from the previous pass (infinite
    /// on the first pass).
    pub max_coef_change: f64,
    /// Largest change of `ln e(p)` produced by this pass.
    pub max_ln_e_change: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaidsOptions {
    pub estimator: EstimatorOptions,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for QaidsOptions {
    fn default() -> Self {
        Self {
            estimator: EstimatorOptions::default(),
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QaidsFit {
    pub kind: TransformKind,
    pub spec: DemandSpec,
    pub fits: Vec<FitResult>,
    pub trace: Vec<TraceStep>,
    pub iterations: usize,
    /// Per table row: Stone log index, deflated log outlay and `ln e(p)`.
    pub ln_stone: Vec<f64>,
    pub ln_y: Vec<f64>,
    pub ln_e: Vec<f64>,
    pub mean_shares: Vec<f64>,
    /// Cross-equation residual covariance (when all equations use the same
    /// rows).
    pub sigma: Option<DMatrix<f64>>,
}

impl QaidsFit {
    pub fn fit_for(&self, good: &str) -> Option<&FitResult> {
        self.spec.goods.iter().position(|g| g.name == good).map(|i| &self.fits[i])
    }
}

fn finite_mean(v: &[f64]) -> f64 {
    let xs: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    linalg::mean(&xs)
}

/// Fits the share system with the chosen estimator. With `quadratic`, the
/// outer loop starts from `e(p) = 1`, refits, recomputes
/// `ln e(p) = Σ_i b̂_i ln p_i` and stops when no coefficient moves by more than
/// `tol` (or `e(p)` did not move at all). Equations share their regressors,
/// so the system estimator reduces to equation-by-equation fits; the residual
/// covariance is still reported.
pub fn qaids_fit(spec: &DemandSpec, table: &PanelTable, kind: TransformKind, opts: &QaidsOptions) -> Result<QaidsFit> {
    let has_prices = spec.validate()?;
    let n = table.n_rows();
    let mean_shares = spec
        .goods
        .iter()
        .map(|g| Ok(finite_mean(table.column(&g.share)?)))
        .collect::<Result<Vec<f64>>>()?;

    let mut ln_prices: Vec<Vec<f64>> = Vec::new();
    if has_prices {
        for g in &spec.goods {
            let col = table.column(g.price.as_deref().unwrap())?;
            ln_prices.push(
                col.iter()
                    .map(|&p| if p.is_nan() { Ok(f64::NAN) } else { check_price(&g.name, p) })
                    .collect::<Result<Vec<f64>>>()?,
            );
        }
    }
    let mut ln_stone = vec![0.0; n];
    if has_prices {
        for r in 0..n {
            ln_stone[r] = ln_prices.iter().zip(&mean_shares).map(|(lp, w)| w * lp[r]).sum();
        }
        let first = table.distinct_waves().first().copied();
        let base_rows: Vec<f64> = (0..n)
            .filter(|&r| Some(table.waves()[r]) == first)
            .map(|r| ln_stone[r])
            .collect();
        let base = finite_mean(&base_rows);
        if base.is_finite() {
            ln_stone.iter_mut().for_each(|v| *v -= base);
        }
    }
    let ln_y: Vec<f64> = table
        .column(&spec.log_outlay)?
        .iter()
        .zip(&ln_stone)
        .map(|(y, p)| y - p)
        .collect();

    let mut work = table.clone();
    work.add_numeric(LY, ln_y.clone(), VariableRole::Regressor)?;
    if spec.price_terms {
        for (g, lp) in spec.goods.iter().zip(&ln_prices) {
            work.add_numeric(format!("{LNP_PREFIX}{}", g.name), lp.clone(), VariableRole::Price)?;
        }
    }
    let regressors = spec.regressors();
    let models: Vec<ModelSpec> = spec
        .goods
        .iter()
        .map(|g| {
            let m = ModelSpec::new(g.share.clone(), regressors.iter().cloned());
            if spec.wave_dummies { m.with_wave_dummies() } else { m }
        })
        .collect();

    let mut ln_e: Vec<f64> = vec![0.0; n];
    let mut trace = Vec::new();
    let mut prev: Option<Vec<f64>> = None;
    let max_iter = if spec.quadratic { opts.max_iter.max(1) } else { 1 };
    for iteration in 1..=max_iter {
        if spec.quadratic {
            let q = ln_y.iter().zip(&ln_e).map(|(x, le)| x * x / le.exp()).collect();
            work.add_numeric(LY2, q, VariableRole::Regressor)?;
        }
        let fits = models
            .iter()
            .map(|m| estimate(kind, m, &work, &opts.estimator))
            .collect::<Result<Vec<FitResult>>>()?;
        let theta: Vec<f64> = fits.iter().flat_map(|f| f.coef.iter().copied()).collect();
        let coef_change = match &prev {
            Some(p) if p.len() == theta.len() => {
                p.iter().zip(&theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            }
            _ => f64::INFINITY,
        };
        let mut e_change = 0.0;
        if spec.quadratic && has_prices {
            let bs: Vec<f64> = fits.iter().map(|f| f.coef_of(LY).unwrap_or(0.0)).collect();
            for (r, le) in ln_e.iter_mut().enumerate() {
                let new: f64 = bs.iter().zip(&ln_prices).map(|(b, lp)| b * lp[r]).sum();
                if new.is_finite() {
                    e_change = f64::max(e_change, (new - *le).abs());
                }
                *le = new;
            }
        }
        trace.push(TraceStep {
            iteration,
            max_coef_change: coef_change,
            max_ln_e_change: e_change,
        });
        if !spec.quadratic || coef_change < opts.tol || e_change == 0.0 {
            let sigma = residual_covariance(&fits);
            return Ok(QaidsFit {
                kind,
                spec: spec.clone(),
                fits,
                trace,
                iterations: iteration,
                ln_stone,
                ln_y,
                ln_e,
                mean_shares,
                sigma,
            });
        }
        prev = Some(theta);
    }
    let last_change = trace.last().map_or(f64::INFINITY, |s| s.max_coef_change);
    Err(Error::NoConvergence {
        iterations: max_iter,
        last_change,
    })
}

fn residual_covariance(fits: &[FitResult]) -> Option<DMatrix<f64>> {
    let n = fits.first()?.residuals.len();
    if n == 0 || fits.iter().any(|f| f.residuals.len() != n) {
        return None;
    }
    let g = fits.len();
    Some(DMatrix::from_fn(g, g, |i, j| {
        fits[i].residuals.iter().zip(&fits[j].residuals).map(|(a, b)| a * b).sum::<f64>() / n as f64
    }))
}

/// `1 + (b + 2·(c/e(p))·ln_y) / w̄`; pass `c = 0` (or `quadratic = false`)
/// for the linear model.
pub fn expenditure_elasticity(b: f64, c: f64, e_p: f64, w_bar: f64, ln_y: f64, quadratic: bool) -> Result<f64> {
    if w_bar == 0.0 {
        return Err(Error::ZeroShare);
    }
    let slope = if quadratic { b + 2.0 * (c / e_p) * ln_y } else { b };
    Ok(1.0 + slope / w_bar)
}

/// Uncompensated own-price elasticity of the linearised system,
/// `−1 + (γ_ii − (b + 2(c/e(p)) ln_y)·w̄) / w̄`.
pub fn own_price_elasticity(gamma_ii: f64, b: f64, c: f64, e_p: f64, w_bar: f64, ln_y: f64) -> Result<f64> {
    if w_bar == 0.0 {
        return Err(Error::ZeroShare);
    }
    let slope = b + 2.0 * (c / e_p) * ln_y;
    Ok(-1.0 + (gamma_ii - slope * w_bar) / w_bar)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodElasticity {
    pub good: String,
    pub estimator: String,
    pub expenditure_elasticity: f64,
    pub w_bar: f64,
    pub ln_y: f64,
    pub e_p: f64,
    pub b: f64,
    pub c: f64,
    pub price_elasticity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticityReport {
    pub goods: Vec<GoodElasticity>,
}

/// Where to evaluate elasticities; `None` fields default to sample means.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalPoint {
    pub ln_y: Option<f64>,
    pub w_bar: Option<f64>,
}

/// Elasticities of every good at the evaluation point. `e(p)` is taken at
/// the geometric mean over rows.
pub fn elasticity_report(fit: &QaidsFit, at: EvalPoint) -> Result<ElasticityReport> {
    let ln_y = at.ln_y.unwrap_or_else(|| finite_mean(&fit.ln_y));
    let e_p = finite_mean(&fit.ln_e).exp();
    let mut goods = Vec::new();
    for (i, (g, f)) in fit.spec.goods.iter().zip(&fit.fits).enumerate() {
        let w_bar = at.w_bar.unwrap_or(fit.mean_shares[i]);
        let b = f.coef_of(LY).unwrap_or(0.0);
        let c = f.coef_of(LY2).unwrap_or(0.0);
        let e = expenditure_elasticity(b, c, e_p, w_bar, ln_y, fit.spec.quadratic)?;
        let price_elasticity = if fit.spec.price_terms {
            let gamma = f.coef_of(&format!("{LNP_PREFIX}{}", g.name)).unwrap_or(0.0);
            Some(own_price_elasticity(gamma, b, c, e_p, w_bar, ln_y)?)
        } else {
            None
        };
        goods.push(GoodElasticity {
            good: g.name.clone(),
            estimator: f.method.clone(),
            expenditure_elasticity: e,
            w_bar,
            ln_y,
            e_p,
            b,
            c,
            price_elasticity,
        });
    }
    Ok(ElasticityReport { goods })
}

/// Expenditure elasticity straight from a single fitted share equation, at
/// the sample means it recorded. `share` names the dependent variable.
pub fn elasticity_from_fit(fit: &FitResult, share: &str, ly: &str, ly2: Option<&str>, e_p: f64) -> Result<GoodElasticity> {
    let missing = |c: &str| Error::MissingColumn { column: c.to_string() };
    let w_bar = *fit.means.get(share).ok_or_else(|| missing(share))?;
    let ln_y = *fit.means.get(ly).ok_or_else(|| missing(ly))?;
    let b = fit.coef_of(ly).ok_or_else(|| missing(ly))?;
    let c = match ly2 {
        Some(q) => fit.coef_of(q).ok_or_else(|| missing(q))?,
        None => 0.0,
    };
    Ok(GoodElasticity {
        good: share.to_string(),
        estimator: fit.method.clone(),
        expenditure_elasticity: expenditure_elasticity(b, c, e_p, w_bar, ln_y, ly2.is_some())?,
        w_bar,
        ln_y,
        e_p,
        b,
        c,
        price_elasticity: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaSource {
    Given,
    /// Own-price effect set to half the income effect: `γ_ii = −0.5·e_ts`.
    Frisch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowPriceResult {
    pub good: Option<String>,
    pub e_cs: f64,
    pub e_ts: f64,
    pub gamma_ii: f64,
    pub gamma_source: GammaSource,
    pub shadow_income_elasticity: f64,
}

pub fn frisch_gamma(e_ts: f64) -> f64 {
    -0.5 * e_ts
}

/// Income elasticity of the shadow price, `(e_cs − e_ts) / γ_ii`, keeping only
/// the direct price effect. Without `gamma_ii` the Frisch rule sets it.
pub fn shadow_price_elasticity(e_cs: f64, e_ts: f64, gamma_ii: Option<f64>) -> Result<ShadowPriceResult> {
    let (gamma, source) = match gamma_ii {
        Some(g) => (g, GammaSource::Given),
        None => (frisch_gamma(e_ts), GammaSource::Frisch),
    };
    if gamma == 0.0 || !gamma.is_finite() {
        return Err(Error::ZeroPriceElasticity);
    }
    Ok(ShadowPriceResult {
        good: None,
        e_cs,
        e_ts,
        gamma_ii: gamma,
        gamma_source: source,
        shadow_income_elasticity: (e_cs - e_ts) / gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn stone_index_cases() {
        assert_eq!(stone_index(&[vec![1.0, 1.0, 1.0]], &[0.3]).unwrap(), vec![0.0; 3]);
        let s = stone_index(&[vec![2.0, 6.0]], &[1.0]).unwrap();
        assert!((s[1] - 3f64.ln()).abs() < 1e-15);
        let e = std::f64::consts::E;
        let two = stone_index(&[vec![1.0, e * e], vec![1.0, 1.0]], &[0.5, 0.5]).unwrap();
        assert!((two[1] - 1.0).abs() < 1e-15);
        assert!(matches!(
            stone_index(&[vec![1.0, 0.0]], &[1.0]),
            Err(Error::NonPositivePrice { .. })
        ));
    }

    #[test]
    fn elasticity_closed_forms() {
        assert_eq!(expenditure_elasticity(0.0, 0.0, 1.0, 0.3, 2.0, true).unwrap(), 1.0);
        assert!((expenditure_elasticity(0.05, 0.0, 1.0, 0.25, 9.0, false).unwrap() - 1.2).abs() < 1e-15);
        assert!(matches!(expenditure_elasticity(0.1, 0.0, 1.0, 0.0, 1.0, false), Err(Error::ZeroShare)));
    }

    #[test]
    fn elasticity_matches_numeric_derivative() {
        let (a, b, c, e_p) = (0.3, -0.04, 0.006, 1.3);
        let share = |x: f64| a + b * x + c / e_p * x * x;
        for x in [8.0, 9.5, 11.0] {
            let h = 1e-5;
            let d = (share(x + h).ln() - share(x - h).ln()) / (2.0 * h);
            let e = expenditure_elasticity(b, c, e_p, share(x), x, true).unwrap();
            assert!((e - (1.0 + d)).abs() < 1e-6);
        }
    }

    #[test]
    fn golden_shadow_prices_under_frisch() {
        let cases = [
            (0.19, 0.38, 1.00, -0.19),
            (1.00, 0.39, -3.13, -0.19),
            (0.49, 0.76, 0.71, -0.38),
            (1.22, 0.36, -4.78, -0.18),
        ];
        for (cs, ts, want, gamma) in cases {
            let r = shadow_price_elasticity(cs, ts, None).unwrap();
            assert!((r.shadow_income_elasticity - want).abs() <= 0.01 + 1e-12, "{cs} {ts}");
            assert!((r.gamma_ii - gamma).abs() <= 0.005 + 1e-12);
            assert_eq!(r.gamma_source, GammaSource::Frisch);
        }
        assert!(matches!(shadow_price_elasticity(0.5, 0.0, None), Err(Error::ZeroPriceElasticity)));
        assert_eq!(shadow_price_elasticity(0.4, 0.4, Some(-0.2)).unwrap().shadow_income_elasticity, 0.0);
    }

    proptest! {
        #[test]
        fn shadow_sign(cs in 0.01f64..2.0, gap in 0.01f64..1.0, gamma in -2.0f64..-0.01) {
            let r = shadow_price_elasticity(cs, cs + gap, Some(gamma)).unwrap();
            prop_assert!(r.shadow_income_elasticity > 0.0);
        }
    }

    fn fixture(n_units: usize, prices: bool, c: f64, seed: u64) -> PanelTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let waves = 4;
        let mut ids = Vec::new();
        let mut ws = Vec::new();
        let mut lny = Vec::new();
        let mut p1 = Vec::new();
        let mut p2 = Vec::new();
        let mut w1 = Vec::new();
        let mut w2 = Vec::new();
        let price = [[1.0, 1.0], [1.2, 0.9], [1.5, 1.1], [1.3, 1.4]];
        for h in 0..n_units {
            let base = 9.0 + 0.6 * nd.sample(&mut rng);
            for t in 0..waves {
                let (pa, pb) = if prices { (price[t][0], price[t][1]) } else { (1.0, 1.0) };
                let x: f64 = base + 0.1 * nd.sample(&mut rng);
                ids.push(h.to_string());
                ws.push(t as i64 + 1);
                lny.push(x);
                p1.push(pa);
                p2.push(pb);
                w1.push(0.2 + 0.01 * (x - 9.0) + c * (x - 9.0).powi(2) + 0.01 * nd.sample(&mut rng));
                w2.push(0.1 - 0.01 * (x - 9.0) + 0.01 * nd.sample(&mut rng));
            }
        }
        let mut t = PanelTable::new("id", "wave", ids, ws).unwrap();
        t.add_numeric("lny", lny, VariableRole::LogOutlay).unwrap();
        t.add_numeric("p1", p1, VariableRole::Price).unwrap();
        t.add_numeric("p2", p2, VariableRole::Price).unwrap();
        t.add_numeric("w1", w1, VariableRole::Share).unwrap();
        t.add_numeric("w2", w2, VariableRole::Share).unwrap();
        t
    }

    fn goods(prices: bool) -> Vec<Good> {
        let mut g = vec![Good::new("a", "w1"), Good::new("b", "w2")];
        if prices {
            g[0] = g[0].clone().with_price("p1");
            g[1] = g[1].clone().with_price("p2");
        }
        g
    }

    #[test]
    fn unit_prices_converge_in_one_pass() {
        let t = fixture(50, false, 0.002, 1);
        let spec = DemandSpec::new(goods(true), "lny").quadratic();
        let fit = qaids_fit(&spec, &t, TransformKind::Within, &QaidsOptions::default()).unwrap();
        assert_eq!(fit.iterations, 1);
        assert!(fit.ln_e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_pass_equals_share_regression() {
        let t = fixture(40, true, 0.0, 2);
        let spec = DemandSpec::new(goods(true), "lny");
        let fit = qaids_fit(&spec, &t, TransformKind::Between, &QaidsOptions::default()).unwrap();
        assert_eq!(fit.iterations, 1);
        let mut work = t.clone();
        work.add_numeric(LY, fit.ln_y.clone(), VariableRole::Regressor).unwrap();
        let direct = estimate(TransformKind::Between, &ModelSpec::new("w1", [LY]), &work, &EstimatorOptions::default()).unwrap();
        assert_eq!(direct.coef, fit.fits[0].coef);
        let sigma = fit.sigma.unwrap();
        assert!((sigma[(0, 1)] - sigma[(1, 0)]).abs() < 1e-18);
    }

    #[test]
    fn mixed_price_columns_rejected() {
        let t = fixture(10, true, 0.0, 3);
        let mut g = goods(true);
        g[1].price = None;
        let spec = DemandSpec::new(g, "lny");
        assert!(matches!(
            qaids_fit(&spec, &t, TransformKind::Between, &QaidsOptions::default()),
            Err(Error::ConfigInvalid(_))
        ));
    }
}
