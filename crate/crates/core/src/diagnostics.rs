//! Specification diagnostics: the Hausman test, DFBETAS influence filtering
//! and the residual-based heteroscedasticity test with reweighting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::PanelTable;
use crate::error::{Error, Result};
use crate::linalg::{self, least_squares, symmetric_inverse_clipped};
use crate::regress::{wls, ColumnKind, CovarianceKind, Design, FitResult, ModelSpec};

/// Eigenvalue floor applied to `V = V_b + V_w` before inversion.
pub const V_EIGEN_FLOOR: f64 = 1e-12;

pub fn chi2_sf(x: f64, dof: usize) -> f64 {
    if dof == 0 {
        return f64::NAN;
    }
    if x <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(dof as f64).map_or(f64::NAN, |d| 1.0 - d.cdf(x))
}

pub fn chi2_critical(level: f64, dof: usize) -> f64 {
    ChiSquared::new(dof as f64).map_or(f64::NAN, |d| d.inverse_cdf(1.0 - level))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HausmanResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Eigenvalues of V were clipped to keep it positive definite.
    pub v_psd_repaired: bool,
    pub subset: Vec<String>,
    /// Coefficients entering V (all those common to both fits).
    pub common: Vec<String>,
    /// Set when the variance was restricted to the tested subset, which
    /// ignores the covariance with the other coefficients and is biased.
    pub naive_biased: bool,
}

impl HausmanResult {
    pub fn rejects(&self, level: f64) -> bool {
        self.p_value < level
    }
}

/// `(β_b − β_w)' V⁻¹ (β_b − β_w)` on `subset`, with `V = V_b + V_w` built over
/// every coefficient common to both fits and the quadratic form taken with the
/// `subset` block of `V⁻¹`. With `naive`, `V` is restricted to the subset
/// before inversion instead (biased; kept for comparison).
pub fn hausman(fit_b: &FitResult, fit_w: &FitResult, subset: &[String], naive: bool) -> Result<HausmanResult> {
    if subset.is_empty() {
        return Err(Error::ConfigInvalid("Hausman subset is empty".into()));
    }
    let common: Vec<String> = fit_b
        .names
        .iter()
        .filter(|n| fit_w.index_of(n).is_some())
        .cloned()
        .collect();
    for s in subset {
        if !common.contains(s) {
            return Err(Error::DimensionMismatch(format!(
                "coefficient `{s}` is not shared by both fits"
            )));
        }
    }
    let idx_b: Vec<usize> = common.iter().map(|n| fit_b.index_of(n).unwrap()).collect();
    let idx_w: Vec<usize> = common.iter().map(|n| fit_w.index_of(n).unwrap()).collect();
    let m = common.len();
    let v = DMatrix::from_fn(m, m, |i, j| fit_b.cov[(idx_b[i], idx_b[j])] + fit_w.cov[(idx_w[i], idx_w[j])]);
    let d = DVector::from_fn(m, |i, _| fit_b.coef[idx_b[i]] - fit_w.coef[idx_w[i]]);
    let pos: Vec<usize> = subset.iter().map(|s| common.iter().position(|c| c == s).unwrap()).collect();
    let ds = DVector::from_fn(pos.len(), |i, _| d[pos[i]]);

    let target = if naive { v.select_rows(&pos).select_columns(&pos) } else { v };
    if target.amax() <= 0.0 {
        return Err(Error::SingularV);
    }
    let (inv, repaired) = match target.clone().cholesky() {
        Some(ch) if min_pivot_ok(&target) => (ch.inverse(), false),
        _ => symmetric_inverse_clipped(&target, V_EIGEN_FLOOR),
    };
    let block = if naive { inv } else { inv.select_rows(&pos).select_columns(&pos) };
    let statistic = (ds.transpose() * &block * &ds)[0].max(0.0);
    let dof = subset.len();
    Ok(HausmanResult {
        statistic,
        dof,
        p_value: chi2_sf(statistic, dof),
        v_psd_repaired: repaired,
        subset: subset.to_vec(),
        common,
        naive_biased: naive,
    })
}

/// True when every eigenvalue is at least the floor.
fn min_pivot_ok(v: &DMatrix<f64>) -> bool {
    v.clone().symmetric_eigenvalues().min() >= V_EIGEN_FLOOR
}

/// Threshold `2/√n` for DFBETAS.
pub fn dfbetas_threshold(n: usize) -> f64 {
    2.0 / (n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dfbetas {
    /// n × p matrix of scaled coefficient changes.
    pub values: DMatrix<f64>,
    pub threshold: f64,
    pub max_abs: Vec<f64>,
    /// Design rows with `max_j |DFBETAS_ij| > threshold`.
    pub flagged: Vec<usize>,
}

/// Belsley–Kuh–Welsch DFBETAS with the deleted-case scale:
/// `DFBETAS_ij = (b_j − b_j(i)) / (s_(i) √[(X'X)⁻¹]_jj)`, using the rank-one
/// update `b − b(i) = (X'X)⁻¹ x_i e_i / (1 − h_i)`.
pub fn dfbetas(design: &Design) -> Result<Dfbetas> {
    let (n, p) = design.x.shape();
    if n <= p + 1 {
        return Err(Error::InsufficientObservations { n, k: p + 1 });
    }
    let ls = least_squares(&design.x, &design.y, &design.names)?;
    let e = &ls.residuals;
    let rss = e.norm_squared();
    let a = &ls.xtx_inv;
    let ax = a * design.x.transpose();
    let mut values = DMatrix::zeros(n, p);
    let mut max_abs = vec![0.0; n];
    for i in 0..n {
        let xi = design.x.row(i);
        let h = (xi * ax.column(i))[0];
        let one_h = 1.0 - h;
        let s2_i = if one_h > 1e-12 {
            ((rss - e[i] * e[i] / one_h) / (n - p - 1) as f64).max(0.0)
        } else {
            0.0
        };
        for j in 0..p {
            let db = if one_h > 1e-12 { ax[(j, i)] * e[i] / one_h } else { f64::INFINITY };
            let scale = (s2_i * a[(j, j)]).sqrt();
            let v = if scale > 0.0 {
                db / scale
            } else if db == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            values[(i, j)] = v;
            max_abs[i] = f64::max(max_abs[i], v.abs());
        }
    }
    let threshold = dfbetas_threshold(n);
    let flagged = (0..n).filter(|&i| max_abs[i] > threshold).collect();
    Ok(Dfbetas {
        values,
        threshold,
        max_abs,
        flagged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub threshold: f64,
    /// Table rows kept (rows with missing model values are not listed).
    pub retained: Vec<usize>,
    /// Table rows whose largest |DFBETAS| exceeds the threshold.
    pub flagged: Vec<usize>,
    pub max_abs: Vec<f64>,
    pub share_flagged: f64,
}

/// Flags influential rows of an OLS fit; removing them is left to the caller.
pub fn dfbetas_filter(spec: &ModelSpec, table: &PanelTable) -> Result<FilterResult> {
    let design = Design::from_table(spec, table)?;
    let d = dfbetas(&design)?;
    let flagged: Vec<usize> = d.flagged.iter().map(|&i| design.rows[i]).collect();
    let retained = (0..design.n())
        .filter(|i| !d.flagged.contains(i))
        .map(|i| design.rows[i])
        .collect();
    Ok(FilterResult {
        threshold: d.threshold,
        share_flagged: flagged.len() as f64 / design.n() as f64,
        retained,
        flagged,
        max_abs: d.max_abs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HetTest {
    /// n·R² of the auxiliary regression.
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub reject: bool,
    /// Refit with weights 1/|e| when the test rejects at the chosen level.
    pub reweighted: Option<FitResult>,
}

/// Auxiliary regressors: constant, levels, squares and cross-products of the
/// non-constant columns, skipping any that are collinear with earlier ones.
fn auxiliary_design(x: &DMatrix<f64>, kinds: &[ColumnKind]) -> DMatrix<f64> {
    let n = x.nrows();
    let base: Vec<usize> = (0..x.ncols())
        .filter(|&j| kinds.get(j) != Some(&ColumnKind::Intercept) && x.column(j).iter().any(|v| *v != x[(0, j)]))
        .collect();
    let mut cols: Vec<DVector<f64>> = vec![DVector::from_element(n, 1.0)];
    for &j in &base {
        cols.push(x.column(j).into_owned());
    }
    for (a, &j) in base.iter().enumerate() {
        for &k in &base[a..] {
            cols.push(x.column(j).component_mul(&x.column(k)));
        }
    }
    let mut kept: Vec<DVector<f64>> = Vec::new();
    for c in cols {
        let mut cand = kept.clone();
        cand.push(c);
        let m = DMatrix::from_columns(&cand);
        let names: Vec<String> = (0..cand.len()).map(|i| i.to_string()).collect();
        if linalg::collinear_columns(&m, &names).is_empty() {
            kept = cand;
        }
    }
    DMatrix::from_columns(&kept)
}

/// White's test: regress e² on the auxiliary design; n·R² ~ χ²(q).
pub fn het_test(design: &Design, residuals: &[f64]) -> Result<(f64, usize, f64)> {
    let n = design.n();
    if residuals.len() != n {
        return Err(Error::DimensionMismatch("residuals vs design rows".into()));
    }
    let aux = auxiliary_design(&design.x, &design.kinds);
    let q = aux.ncols() - 1;
    let e2 = DVector::from_iterator(n, residuals.iter().map(|e| e * e));
    let mean = e2.mean();
    let tss: f64 = e2.iter().map(|v| (v - mean).powi(2)).sum();
    let y_scale = design.y.amax().max(1.0);
    let exact_fit = residuals.iter().all(|e| e.abs() <= 1e-10 * y_scale);
    if q == 0 || tss <= 0.0 || exact_fit {
        return Ok((0.0, q, 1.0));
    }
    let names: Vec<String> = (0..aux.ncols()).map(|i| format!("aux{i}")).collect();
    let ls = least_squares(&aux, &e2, &names)?;
    let r2 = 1.0 - ls.residuals.norm_squared() / tss;
    let stat = n as f64 * r2.max(0.0);
    Ok((stat, q, chi2_sf(stat, q)))
}

/// Weighted refit with weights 1/|e|, residual magnitudes floored at their
/// first percentile (or the smallest positive magnitude if that is zero).
pub fn reweight_inverse_abs(design: &Design, residuals: &[f64]) -> Result<FitResult> {
    let mut mags: Vec<f64> = residuals.iter().map(|e| e.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let n = mags.len();
    let mut floor = if n == 0 { 0.0 } else { mags[((n - 1) as f64 * 0.01).floor() as usize] };
    if floor <= 0.0 {
        floor = mags.iter().copied().find(|v| *v > 0.0).unwrap_or(1.0);
    }
    let weights: Vec<f64> = residuals.iter().map(|e| 1.0 / e.abs().max(floor)).collect();
    let mut fit = wls(design, &weights, CovarianceKind::Homoscedastic)?;
    fit.method = "wls_inverse_abs_residual".into();
    Ok(fit)
}

/// Heteroscedasticity test and, when it rejects at `level`, the reweighted
/// fit.
pub fn het_test_and_reweight(fit: &FitResult, design: &Design, level: f64) -> Result<HetTest> {
    let (statistic, dof, p_value) = het_test(design, &fit.residuals)?;
    let reject = p_value < level;
    let reweighted = if reject {
        Some(reweight_inverse_abs(design, &fit.residuals)?)
    } else {
        None
    };
    Ok(HetTest {
        statistic,
        dof,
        p_value,
        reject,
        reweighted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regress::ols;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn scalar_fit(name: &str, coef: f64, var: f64) -> FitResult {
        FitResult {
            method: name.into(),
            names: vec!["ly".into()],
            coef: vec![coef],
            cov: DMatrix::from_element(1, 1, var),
            residuals: vec![],
            df: 10,
            n_used: 12,
            excluded: 0,
            sigma2: 1.0,
            r_squared: 0.5,
            dropped: vec![],
            means: Default::default(),
            notes: vec![],
        }
    }

    fn fit3(coef: [f64; 3], cov: [f64; 9]) -> FitResult {
        FitResult {
            names: vec!["const".into(), "ly".into(), "ly2".into()],
            coef: coef.to_vec(),
            cov: DMatrix::from_row_slice(3, 3, &cov),
            ..scalar_fit("x", 0.0, 1.0)
        }
    }

    #[test]
    fn scalar_hand_arithmetic() {
        let b = scalar_fit("between", 0.2, 0.03 * 0.03);
        let w = scalar_fit("within", 0.4, 0.04 * 0.04);
        let h = hausman(&b, &w, &["ly".to_string()], false).unwrap();
        // (0.2 − 0.4)² / (0.0009 + 0.0016) = 16.
        assert!((h.statistic - 16.0).abs() < 1e-12);
        assert_eq!(crate::report::round_sig(h.statistic), 16.0);
        assert!(h.p_value < 0.001);
        assert!(!h.v_psd_repaired);
    }

    #[test]
    fn equal_coefficients_give_zero() {
        let b = scalar_fit("between", 0.3, 0.01);
        let h = hausman(&b, &b.clone(), &["ly".to_string()], false).unwrap();
        assert_eq!(h.statistic, 0.0);
        assert_eq!(h.p_value, 1.0);
    }

    #[test]
    fn large_statistic_rejects_at_one_percent() {
        assert!((chi2_critical(0.01, 1) - 6.634896601021214).abs() < 1e-9);
        assert!(chi2_sf(107.7, 1) < 0.01);
    }

    #[test]
    fn full_v_differs_from_naive_and_is_order_invariant() {
        let b = fit3([0.1, 0.5, -0.02], [0.04, 0.01, 0.002, 0.01, 0.02, 0.003, 0.002, 0.003, 0.001]);
        let w = fit3([0.0, 0.3, 0.01], [0.03, 0.005, 0.001, 0.005, 0.01, 0.001, 0.001, 0.001, 0.0008]);
        let subset = vec!["ly".to_string(), "ly2".to_string()];
        let full = hausman(&b, &w, &subset, false).unwrap();
        let naive = hausman(&b, &w, &subset, true).unwrap();
        assert!(naive.naive_biased && !full.naive_biased);
        assert!((full.statistic - naive.statistic).abs() > 1e-6);
        // Oracle: explicit inverse of the 3×3 V then its 2×2 block.
        let v = &b.cov + &w.cov;
        let vi = v.try_inverse().unwrap();
        let d = [0.2, -0.03];
        let mut q = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                q += d[i] * vi[(i + 1, j + 1)] * d[j];
            }
        }
        assert!((full.statistic - q).abs() < 1e-10);
        // Reordered coefficients in one fit.
        let perm = [2usize, 0, 1];
        let wp = FitResult {
            names: perm.iter().map(|&i| w.names[i].clone()).collect(),
            coef: perm.iter().map(|&i| w.coef[i]).collect(),
            cov: DMatrix::from_fn(3, 3, |i, j| w.cov[(perm[i], perm[j])]),
            ..w.clone()
        };
        let r = hausman(&b, &wp, &[subset[1].clone(), subset[0].clone()], false).unwrap();
        assert!((r.statistic - full.statistic).abs() < 1e-12 * full.statistic.max(1.0));
    }

    #[test]
    fn singular_v_is_repaired() {
        let b = fit3([0.1, 0.5, 0.2], [1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.5]);
        let w = fit3([0.0, 0.3, 0.1], [0.0; 9]);
        let h = hausman(&b, &w, &["ly".to_string()], false).unwrap();
        assert!(h.v_psd_repaired);
        assert!(h.statistic.is_finite() && h.statistic >= 0.0);
        let zero = fit3([0.0; 3], [0.0; 9]);
        assert!(matches!(hausman(&zero, &zero, &["ly".to_string()], false), Err(Error::SingularV)));
    }

    fn line(n: usize, seed: u64) -> Design {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { nd.sample(&mut rng) });
        let y = DVector::from_fn(n, |i, _| 1.0 + 2.0 * x[(i, 1)] + 0.5 * nd.sample(&mut rng));
        Design::from_parts(y, x, vec!["const".into(), "x".into()])
    }

    #[test]
    fn dfbetas_matches_leave_one_out_refits() {
        let d = line(30, 1);
        let res = dfbetas(&d).unwrap();
        let full = ols(&d, CovarianceKind::Homoscedastic).unwrap();
        let xtx_inv = (d.x.transpose() * &d.x).try_inverse().unwrap();
        for i in [0usize, 7, 29] {
            let idx: Vec<usize> = (0..30).filter(|&r| r != i).collect();
            let sub = d.select_rows(&idx);
            let f = ols(&sub, CovarianceKind::Homoscedastic).unwrap();
            let s_i = f.sigma2.sqrt();
            for j in 0..2 {
                let oracle = (full.coef[j] - f.coef[j]) / (s_i * xtx_inv[(j, j)].sqrt());
                assert!((res.values[(i, j)] - oracle).abs() < 1e-9, "row {i} coef {j}");
            }
        }
    }

    #[test]
    fn threshold_at_400_is_a_tenth() {
        assert_eq!(dfbetas_threshold(400), 0.1);
    }

    #[test]
    fn single_outlier_is_flagged() {
        // Near-exact line except one row shifted by 10σ at a high-leverage x.
        let n = 50;
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (i as f64 - 24.5) / 10.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nd = Normal::new(0.0, 0.01).unwrap();
        let mut y = DVector::from_fn(n, |i, _| 1.0 + x[(i, 1)] + nd.sample(&mut rng));
        y[45] += 0.1;
        let d = Design::from_parts(y, x, vec!["const".into(), "x".into()]);
        let res = dfbetas(&d).unwrap();
        assert!(res.flagged.contains(&45));
        let top = (0..n).max_by(|&a, &b| res.max_abs[a].total_cmp(&res.max_abs[b])).unwrap();
        assert_eq!(top, 45);
    }

    #[test]
    fn duplicated_centroid_row_has_no_influence() {
        let mut x = vec![-2.0, -1.0, 1.0, 2.0, -2.0, -1.0, 1.0, 2.0];
        let mut y = vec![-1.0, 0.5, 1.5, 1.0, -1.5, -0.5, 0.5, 2.0];
        let ybar = y.iter().sum::<f64>() / 8.0;
        x.extend([0.0, 0.0]);
        y.extend([ybar, ybar]);
        let n = x.len();
        let xm = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
        let d = Design::from_parts(DVector::from_vec(y), xm, vec!["const".into(), "x".into()]);
        let res = dfbetas(&d).unwrap();
        for i in [8, 9] {
            assert!(res.values.row(i).amax() < 1e-8);
        }
    }

    #[test]
    fn reweight_exact_fit_is_ols() {
        let n = 10;
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let y = DVector::from_fn(n, |i, _| 3.0 - 0.5 * i as f64);
        let d = Design::from_parts(y, x, vec!["const".into(), "x".into()]);
        let fit = ols(&d, CovarianceKind::Homoscedastic).unwrap();
        let h = het_test_and_reweight(&fit, &d, 0.05).unwrap();
        assert!(!h.reject);
        let zero = vec![0.0; n];
        let rw = reweight_inverse_abs(&d, &zero).unwrap();
        for (a, b) in rw.coef.iter().zip(&fit.coef) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn het_test_detects_variance_in_x() {
        let n = 500;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { 1.0 + f64::abs(nd.sample(&mut rng)) * 2.0 });
        let y = DVector::from_fn(n, |i, _| 1.0 + x[(i, 1)] + x[(i, 1)] * nd.sample(&mut rng));
        let d = Design::from_parts(y, x, vec!["const".into(), "x".into()]);
        let fit = ols(&d, CovarianceKind::Homoscedastic).unwrap();
        let h = het_test_and_reweight(&fit, &d, 0.05).unwrap();
        assert_eq!(h.dof, 2);
        assert!(h.reject);
        assert!(h.reweighted.is_some());
    }
}
