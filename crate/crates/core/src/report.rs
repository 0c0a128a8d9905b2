//! Machine-readable output. Every number written by the crate goes through
//! [`round_sig`], so JSON and CSV files are stable at 12 significant digits.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::regress::FitResult;

pub const SIGNIFICANT_DIGITS: usize = 12;

/// Rounds to [`SIGNIFICANT_DIGITS`] significant digits. Non-finite values
/// pass through.
pub fn round_sig(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, v)
        .parse()
        .unwrap_or(v)
}

/// Text form of a rounded number; NaN becomes the empty string.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        let r = round_sig(v);
        if r == 0.0 {
            "0".into()
        } else if (1e-5..1e15).contains(&r.abs()) {
            r.to_string()
        } else {
            format!("{r:e}")
        }
    }
}

/// JSON number for a rounded value; non-finite values become strings.
pub fn json_num(v: f64) -> Value {
    if v.is_finite() {
        serde_json::Number::from_f64(round_sig(v)).map_or(Value::Null, Value::Number)
    } else if v.is_nan() {
        Value::String("nan".into())
    } else if v > 0.0 {
        Value::String("inf".into())
    } else {
        Value::String("-inf".into())
    }
}

/// Recursively rounds every number in a JSON tree.
pub fn round_json(v: Value) -> Value {
    match v {
        Value::Number(n) => match n.as_f64() {
            Some(f) if !(n.is_i64() || n.is_u64()) => json_num(f),
            _ => Value::Number(n),
        },
        Value::Array(a) => Value::Array(a.into_iter().map(round_json).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round_json(v))).collect()),
        other => other,
    }
}

/// Serialises any value to pretty JSON with rounded numbers.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let v = round_json(serde_json::to_value(value)?);
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

/// Serialisable view of a [`FitResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub method: String,
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    /// Row-major covariance.
    pub cov: Vec<f64>,
    pub n_used: usize,
    pub excluded: usize,
    pub df: usize,
    pub sigma2: f64,
    pub r_squared: f64,
    #[serde(default)]
    pub dropped: Vec<String>,
    #[serde(default)]
    pub means: BTreeMap<String, f64>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl From<&FitResult> for FitReport {
    fn from(f: &FitResult) -> Self {
        let k = f.coef.len();
        Self {
            method: f.method.clone(),
            names: f.names.clone(),
            coef: f.coef.clone(),
            se: f.se(),
            cov: (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| f.cov[(i, j)]).collect(),
            n_used: f.n_used,
            excluded: f.excluded,
            df: f.df,
            sigma2: f.sigma2,
            r_squared: f.r_squared,
            dropped: f.dropped.clone(),
            means: f.means.clone(),
            notes: f.notes.clone(),
        }
    }
}

impl FitReport {
    /// Rebuilds a fit (without residuals) from its report, e.g. for the
    /// Hausman test on saved fits.
    pub fn to_fit(&self) -> Result<FitResult> {
        let k = self.coef.len();
        if self.names.len() != k || self.cov.len() != k * k {
            return Err(Error::DimensionMismatch(format!(
                "fit report has {} names, {} coefficients and {} covariance entries",
                self.names.len(),
                k,
                self.cov.len()
            )));
        }
        Ok(FitResult {
            method: self.method.clone(),
            names: self.names.clone(),
            coef: self.coef.clone(),
            cov: DMatrix::from_row_slice(k, k, &self.cov),
            residuals: Vec::new(),
            df: self.df,
            n_used: self.n_used,
            excluded: self.excluded,
            sigma2: self.sigma2,
            r_squared: self.r_squared,
            dropped: self.dropped.clone(),
            means: self.means.clone(),
            notes: self.notes.clone(),
        })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        to_json_string(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_to_twelve_digits() {
        assert_eq!(round_sig(0.1 + 0.2), 0.3);
        assert_eq!(fmt_num(1.0 / 3.0), "0.333333333333");
        assert_eq!(fmt_num(-2.5e-20), "-2.5e-20");
        assert_eq!(fmt_num(f64::NAN), "");
        assert_eq!(fmt_num(0.0), "0");
        assert_eq!(fmt_num(123456789012345.0), "123456789012000");
    }

    #[test]
    fn json_rounding_keeps_integers() {
        let v = serde_json::json!({"a": 0.30000000000000004, "n": 7, "xs": [1.0, 2.0000000000001]});
        let r = round_json(v);
        assert_eq!(r["a"], serde_json::json!(0.3));
        assert_eq!(r["n"], serde_json::json!(7));
        assert_eq!(r["xs"][1], serde_json::json!(2.0));
    }

    #[test]
    fn fit_report_round_trip() {
        let fit = FitResult {
            method: "ols".into(),
            names: vec!["const".into(), "x".into()],
            coef: vec![1.0, 2.0],
            cov: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.25]),
            residuals: vec![],
            df: 8,
            n_used: 10,
            excluded: 1,
            sigma2: 0.3,
            r_squared: 0.9,
            dropped: vec![],
            means: BTreeMap::new(),
            notes: vec![],
        };
        let rep = FitReport::from(&fit);
        assert_eq!(rep.cov, vec![0.5, 0.1, 0.1, 0.25]);
        assert!((rep.se[1] - 0.5).abs() < 1e-15);
        let back = FitReport::from_json_str(&rep.to_json_string().unwrap()).unwrap().to_fit().unwrap();
        assert_eq!(back.coef, fit.coef);
        assert_eq!(back.cov, fit.cov);
    }
}
