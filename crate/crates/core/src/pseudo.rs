//! Pseudo-panel construction: cohort keys, sub-sample splitting and
//! aggregation of households into (cohort, wave) cells.
//!
//! Within a cell H in wave t each member h gets weight
//! γ_ht = Y_ht / Σ_{h∈H} Y_ht (or 1/n under equal weighting). Cell values are
//! γ-weighted means and the cell error variance is proportional to
//! δ_Ht = Σ_h γ_ht².

use std::collections::BTreeMap;
use std::io::Write;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PanelTable, VariableRole};
use crate::error::{Error, Result};
use crate::report::fmt_num;

pub const COHORT_COLUMN: &str = "cohort_key";
pub const SUBSAMPLE_COLUMN: &str = "subsample";
pub const KEY_COLUMN: &str = "key";
pub const WAVE_COLUMN: &str = "wave";
pub const SIZE_COLUMN: &str = "size";
pub const DELTA_COLUMN: &str = "delta";
pub const DELTA_BAR_COLUMN: &str = "delta_bar";

/// Half-open integer age interval `[lo, hi)`; a missing bound is unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeBand {
    pub lo: Option<i64>,
    pub hi: Option<i64>,
}

impl AgeBand {
    pub fn new(lo: Option<i64>, hi: Option<i64>) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, age: i64) -> bool {
        self.lo.map_or(true, |lo| age >= lo) && self.hi.map_or(true, |hi| age < hi)
    }

    pub fn label(&self) -> String {
        match (self.lo, self.hi) {
            (None, Some(hi)) => format!("<{hi}"),
            (Some(lo), None) => format!(">={lo}"),
            (Some(lo), Some(hi)) => format!("{lo}-{}", hi - 1),
            (None, None) => "all".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EduLevel {
    pub label: String,
    /// Raw education values mapped to this level.
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortScheme {
    #[serde(default = "default_age_column")]
    pub age_column: String,
    /// Education column; `None` groups on age alone.
    #[serde(default)]
    pub education_column: Option<String>,
    #[serde(default = "default_bands")]
    pub age_bands: Vec<AgeBand>,
    /// When empty, raw education values are used as levels.
    #[serde(default)]
    pub edu_levels: Vec<EduLevel>,
    #[serde(default)]
    pub split_k: Option<u32>,
}

fn default_age_column() -> String {
    "age".to_string()
}

/// `<30, 30–39, 40–49, 50–59, 60–69, ≥70`.
pub fn default_bands() -> Vec<AgeBand> {
    let mut bands = vec![AgeBand::new(None, Some(30))];
    for lo in (30..70).step_by(10) {
        bands.push(AgeBand::new(Some(lo), Some(lo + 10)));
    }
    bands.push(AgeBand::new(Some(70), None));
    bands
}

impl Default for CohortScheme {
    fn default() -> Self {
        Self {
            age_column: default_age_column(),
            education_column: None,
            age_bands: default_bands(),
            edu_levels: Vec::new(),
            split_k: None,
        }
    }
}

impl CohortScheme {
    pub fn with_education(mut self, column: impl Into<String>, levels: Vec<EduLevel>) -> Self {
        self.education_column = Some(column.into());
        self.edu_levels = levels;
        self
    }

    pub fn with_split(mut self, k: u32) -> Self {
        self.split_k = Some(k);
        self
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let scheme: Self = serde_json::from_str(s)?;
        scheme.validate()?;
        Ok(scheme)
    }

    /// Bands must be ordered and disjoint; `split_k` must be positive.
    pub fn validate(&self) -> Result<()> {
        if self.age_bands.is_empty() {
            return Err(Error::ConfigInvalid("no age bands".into()));
        }
        for b in &self.age_bands {
            if let (Some(lo), Some(hi)) = (b.lo, b.hi) {
                if lo >= hi {
                    return Err(Error::ConfigInvalid(format!("empty age band {}", b.label())));
                }
            }
        }
        for pair in self.age_bands.windows(2) {
            match (pair[0].hi, pair[1].lo) {
                (Some(hi), Some(lo)) if hi <= lo => {}
                _ => {
                    return Err(Error::ConfigInvalid(format!(
                        "age bands {} and {} overlap or are out of order",
                        pair[0].label(),
                        pair[1].label()
                    )))
                }
            }
        }
        if self.split_k == Some(0) {
            return Err(Error::ConfigInvalid("split_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// 64-bit FNV-1a, used to derive a stable per-unit stream from its id.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Sub-sample label of a unit, drawn uniformly from `0..k` with a generator
/// seeded by (seed, unit id).
pub fn subsample_of(unit: &str, seed: u64, k: u32) -> u32 {
    let mixed = fnv1a(unit.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    ChaCha8Rng::seed_from_u64(mixed).random_range(0..k)
}

fn education_value(table: &PanelTable, column: &str, row: usize) -> Result<String> {
    if let Ok(labels) = table.labels(column) {
        return Ok(labels[row].clone());
    }
    let v = table.column(column)?[row];
    if v.is_nan() {
        return Err(Error::NonNumericCell {
            row,
            column: column.to_string(),
            value: String::new(),
        });
    }
    Ok(if v.fract() == 0.0 { format!("{}", v as i64) } else { v.to_string() })
}

/// Adds the `cohort_key` label column (and `subsample` when the scheme splits
/// the sample). A unit's key is taken from its earliest observed wave so it
/// never changes over time.
pub fn assign_cohorts(table: &PanelTable, scheme: &CohortScheme, seed: u64) -> Result<PanelTable> {
    scheme.validate()?;
    let ages = table.column(&scheme.age_column)?;
    let mut first_row: BTreeMap<&str, usize> = BTreeMap::new();
    for r in 0..table.n_rows() {
        let u = table.unit_ids()[r].as_str();
        match first_row.get(u) {
            Some(&prev) if table.waves()[prev] <= table.waves()[r] => {}
            _ => {
                first_row.insert(u, r);
            }
        }
    }
    let mut key_of: BTreeMap<&str, String> = BTreeMap::new();
    for (&unit, &r) in &first_row {
        let age_raw = ages[r];
        if !age_raw.is_finite() {
            return Err(Error::NonNumericCell {
                row: r,
                column: scheme.age_column.clone(),
                value: String::new(),
            });
        }
        let age = age_raw.floor() as i64;
        let band = scheme
            .age_bands
            .iter()
            .find(|b| b.contains(age))
            .ok_or_else(|| Error::UncoveredAge {
                unit: unit.to_string(),
                age,
            })?;
        let mut key = band.label();
        if let Some(col) = &scheme.education_column {
            let raw = education_value(table, col, r)?;
            let level = if scheme.edu_levels.is_empty() {
                raw
            } else {
                scheme
                    .edu_levels
                    .iter()
                    .find(|l| l.values.iter().any(|v| *v == raw))
                    .map(|l| l.label.clone())
                    .ok_or_else(|| Error::UnknownEducation {
                        unit: unit.to_string(),
                        label: raw.clone(),
                    })?
            };
            key.push('|');
            key.push_str(&level);
        }
        key_of.insert(unit, key);
    }
    let mut out = table.clone();
    let keys: Vec<String> = table.unit_ids().iter().map(|u| key_of[u.as_str()].clone()).collect();
    out.add_labels(COHORT_COLUMN, keys)?;
    if let Some(k) = scheme.split_k {
        let subs = table
            .unit_ids()
            .iter()
            .map(|u| subsample_of(u, seed, k).to_string())
            .collect();
        out.add_labels(SUBSAMPLE_COLUMN, subs)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    IncomeShare,
    Equal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateOptions {
    pub weighting: Weighting,
    /// Level outlay column for income-share weights; when absent the
    /// exponential of the `log_outlay` column is used.
    #[serde(default)]
    pub outlay_column: Option<String>,
    /// Cells smaller than this are flagged (not dropped).
    pub min_cell_size: usize,
    /// Fail with `EmptyCell` when some key is missing in some wave.
    pub require_balanced: bool,
}

impl Default for AggregateOptions {
    fn default() -> Self {
        Self {
            weighting: Weighting::IncomeShare,
            outlay_column: None,
            min_cell_size: 30,
            require_balanced: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub key: String,
    pub wave: i64,
    /// Member unit ids in sorted order.
    pub members: Vec<String>,
    pub gamma: Vec<f64>,
    pub delta: f64,
    pub small: bool,
    pub aggregates: IndexMap<String, f64>,
}

impl Cell {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoPanel {
    /// Cells sorted by (key, wave).
    pub cells: Vec<Cell>,
    pub keys: Vec<String>,
    pub waves: Vec<i64>,
    /// δ_H: time average of δ_Ht over the waves in which the key appears.
    pub delta_bar: BTreeMap<String, f64>,
    pub balanced: bool,
    pub weighting: Weighting,
    variables: Vec<(String, VariableRole)>,
}

/// Income-share (or equal) weights for a set of level outlays.
pub fn cell_weights(outlays: &[f64], weighting: Weighting) -> Vec<f64> {
    let n = outlays.len() as f64;
    match weighting {
        Weighting::Equal => vec![1.0 / n; outlays.len()],
        Weighting::IncomeShare => {
            let total: f64 = outlays.iter().sum();
            outlays.iter().map(|y| y / total).collect()
        }
    }
}

pub fn heteroscedasticity_factor(gamma: &[f64]) -> f64 {
    gamma.iter().map(|g| g * g).sum()
}

fn outlay_levels(table: &PanelTable, opts: &AggregateOptions) -> Result<Vec<f64>> {
    if let Some(col) = &opts.outlay_column {
        return Ok(table.column(col)?.to_vec());
    }
    let logs = table.columns_with_role(VariableRole::LogOutlay);
    match logs.first() {
        Some(name) => Ok(table.column(name)?.iter().map(|v| v.exp()).collect()),
        None if opts.weighting == Weighting::Equal => Ok(vec![1.0; table.n_rows()]),
        None => Err(Error::MissingColumn {
            column: "log_outlay (or an outlay column)".into(),
        }),
    }
}

/// Groups rows into (cohort, wave) cells. With a `subsample` column the unit
/// contributes only to the waves whose rank r satisfies `r mod k = s`.
pub fn aggregate(table: &PanelTable, opts: &AggregateOptions) -> Result<PseudoPanel> {
    let keys_col = table.labels(COHORT_COLUMN)?;
    let outlay = outlay_levels(table, opts)?;
    let waves = table.distinct_waves();
    let subsample: Option<(Vec<usize>, usize)> = match table.labels(SUBSAMPLE_COLUMN) {
        Ok(labels) => {
            let s: Vec<usize> = labels
                .iter()
                .map(|l| l.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::InvalidSchema("non-integer subsample label".into()))?;
            let k = s.iter().max().map_or(1, |m| m + 1);
            Some((s, k))
        }
        Err(_) => None,
    };
    let variables: Vec<(String, VariableRole)> = table
        .numeric_columns()
        .map(|(name, _)| (name.to_string(), table.role(name).expect("role")))
        .filter(|(name, _)| ![SIZE_COLUMN, DELTA_COLUMN, DELTA_BAR_COLUMN].contains(&name.as_str()))
        .collect();

    let mut groups: BTreeMap<(String, i64), Vec<usize>> = BTreeMap::new();
    for r in 0..table.n_rows() {
        let y = outlay[r];
        if !(y.is_finite() && y > 0.0) {
            continue;
        }
        if let Some((s, k)) = &subsample {
            let rank = waves.binary_search(&table.waves()[r]).expect("wave");
            if rank % k != s[r] {
                continue;
            }
        }
        groups.entry((keys_col[r].clone(), table.waves()[r])).or_default().push(r);
    }
    if groups.is_empty() {
        return Err(Error::EmptyResult);
    }
    let mut keys: Vec<String> = groups.keys().map(|(k, _)| k.clone()).collect();
    keys.dedup();
    let mut balanced = true;
    for key in &keys {
        for &w in &waves {
            if !groups.contains_key(&(key.clone(), w)) {
                balanced = false;
                if opts.require_balanced {
                    return Err(Error::EmptyCell { key: key.clone(), wave: w });
                }
            }
        }
    }

    let mut cells = Vec::with_capacity(groups.len());
    for ((key, wave), mut rows) in groups {
        rows.sort_by(|a, b| table.unit_ids()[*a].cmp(&table.unit_ids()[*b]));
        let y: Vec<f64> = rows.iter().map(|&r| outlay[r]).collect();
        let gamma = cell_weights(&y, opts.weighting);
        let delta = heteroscedasticity_factor(&gamma);
        let mut aggregates = IndexMap::new();
        for (name, _) in &variables {
            let col = table.column(name)?;
            let mut num = 0.0;
            let mut den = 0.0;
            for (g, &r) in gamma.iter().zip(&rows) {
                if !col[r].is_nan() {
                    num += g * col[r];
                    den += g;
                }
            }
            aggregates.insert(name.clone(), if den > 0.0 { num / den } else { f64::NAN });
        }
        cells.push(Cell {
            small: rows.len() < opts.min_cell_size,
            members: rows.iter().map(|&r| table.unit_ids()[r].clone()).collect(),
            key,
            wave,
            gamma,
            delta,
            aggregates,
        });
    }
    let mut delta_bar = BTreeMap::new();
    for key in &keys {
        let ds: Vec<f64> = cells.iter().filter(|c| &c.key == key).map(|c| c.delta).collect();
        delta_bar.insert(key.clone(), ds.iter().sum::<f64>() / ds.len() as f64);
    }
    Ok(PseudoPanel {
        cells,
        keys,
        waves,
        delta_bar,
        balanced,
        weighting: opts.weighting,
        variables,
    })
}

impl PseudoPanel {
    pub fn variables(&self) -> impl Iterator<Item = &str> {
        self.variables.iter().map(|(n, _)| n.as_str())
    }

    pub fn cell(&self, key: &str, wave: i64) -> Option<&Cell> {
        self.cells.iter().find(|c| c.key == key && c.wave == wave)
    }

    /// δ_Ht as a keys × waves matrix (NaN where a cell is absent).
    pub fn delta_matrix(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::from_element(self.keys.len(), self.waves.len(), f64::NAN);
        for c in &self.cells {
            let i = self.keys.binary_search(&c.key).expect("key");
            let j = self.waves.binary_search(&c.wave).expect("wave");
            m[(i, j)] = c.delta;
        }
        m
    }

    /// Cell-level table usable by the estimators: unit = cohort key, with
    /// `size`, `delta` and `delta_bar` columns followed by the aggregates.
    pub fn to_table(&self) -> Result<PanelTable> {
        let mut t = PanelTable::new(
            KEY_COLUMN,
            WAVE_COLUMN,
            self.cells.iter().map(|c| c.key.clone()).collect(),
            self.cells.iter().map(|c| c.wave).collect(),
        )?;
        t.add_numeric(SIZE_COLUMN, self.cells.iter().map(|c| c.size() as f64).collect(), VariableRole::Regressor)?;
        t.add_numeric(DELTA_COLUMN, self.cells.iter().map(|c| c.delta).collect(), VariableRole::Regressor)?;
        t.add_numeric(
            DELTA_BAR_COLUMN,
            self.cells.iter().map(|c| self.delta_bar[&c.key]).collect(),
            VariableRole::Regressor,
        )?;
        for (name, role) in &self.variables {
            t.add_numeric(name.clone(), self.cells.iter().map(|c| c.aggregates[name]).collect(), *role)?;
        }
        Ok(t)
    }

    /// CSV export: key, wave, size, delta, delta_bar, then one column per
    /// aggregated variable, numbers at 12 significant digits.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![KEY_COLUMN, WAVE_COLUMN, SIZE_COLUMN, DELTA_COLUMN, DELTA_BAR_COLUMN]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        header.extend(self.variables.iter().map(|(n, _)| n.clone()));
        w.write_record(&header)?;
        for c in &self.cells {
            let mut rec = vec![
                c.key.clone(),
                c.wave.to_string(),
                c.size().to_string(),
                fmt_num(c.delta),
                fmt_num(self.delta_bar[&c.key]),
            ];
            rec.extend(self.variables.iter().map(|(n, _)| fmt_num(c.aggregates[n])));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Role schema matching [`PseudoPanel::write_csv`] output, so the export
    /// can be loaded back with `load_csv`.
    pub fn schema(&self) -> crate::data::RoleSchema {
        let mut s = crate::data::RoleSchema::new(KEY_COLUMN, WAVE_COLUMN)
            .with(SIZE_COLUMN, VariableRole::Regressor)
            .with(DELTA_COLUMN, VariableRole::Regressor)
            .with(DELTA_BAR_COLUMN, VariableRole::Regressor);
        for (n, r) in &self.variables {
            s = s.with(n.clone(), *r);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeySummary {
    pub key: String,
    pub waves: usize,
    pub min_size: usize,
    pub mean_size: f64,
    pub max_size: usize,
    pub delta_min: f64,
    pub delta_max: f64,
    pub delta_bar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub keys: Vec<KeySummary>,
    pub n_cells: usize,
    pub threshold: usize,
    pub under_threshold: usize,
    pub under_30: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub balanced: bool,
}

/// Size and δ summary per key. `threshold` is the cell size below which
/// grouping error is considered non-negligible (100 by default).
pub fn cell_report(pp: &PseudoPanel, threshold: usize) -> CellReport {
    let keys = pp
        .keys
        .iter()
        .map(|key| {
            let cells: Vec<&Cell> = pp.cells.iter().filter(|c| &c.key == key).collect();
            let sizes: Vec<usize> = cells.iter().map(|c| c.size()).collect();
            KeySummary {
                key: key.clone(),
                waves: cells.len(),
                min_size: *sizes.iter().min().unwrap_or(&0),
                mean_size: sizes.iter().sum::<usize>() as f64 / sizes.len().max(1) as f64,
                max_size: *sizes.iter().max().unwrap_or(&0),
                delta_min: cells.iter().map(|c| c.delta).fold(f64::INFINITY, f64::min),
                delta_max: cells.iter().map(|c| c.delta).fold(f64::NEG_INFINITY, f64::max),
                delta_bar: pp.delta_bar[key],
            }
        })
        .collect();
    CellReport {
        keys,
        n_cells: pp.cells.len(),
        threshold,
        under_threshold: pp.cells.iter().filter(|c| c.size() < threshold).count(),
        under_30: pp.cells.iter().filter(|c| c.size() < 30).count(),
        min_size: pp.cells.iter().map(Cell::size).min().unwrap_or(0),
        max_size: pp.cells.iter().map(Cell::size).max().unwrap_or(0),
        balanced: pp.balanced,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn households(ages: &[f64], waves: &[i64], units: &[&str]) -> PanelTable {
        let mut t = PanelTable::new(
            "hh",
            "wave",
            units.iter().map(|s| s.to_string()).collect(),
            waves.to_vec(),
        )
        .unwrap();
        t.add_numeric("age", ages.to_vec(), VariableRole::Regressor).unwrap();
        t
    }

    fn one_cell(outlays: &[f64], shares: &[f64]) -> PanelTable {
        let n = outlays.len();
        let mut t = PanelTable::new("hh", "wave", (0..n).map(|i| format!("h{i}")).collect(), vec![1; n]).unwrap();
        t.add_numeric("y", outlays.to_vec(), VariableRole::Regressor).unwrap();
        t.add_numeric("w", shares.to_vec(), VariableRole::Share).unwrap();
        t.add_labels(COHORT_COLUMN, vec!["c".to_string(); n]).unwrap();
        t
    }

    fn opts(weighting: Weighting) -> AggregateOptions {
        AggregateOptions {
            weighting,
            outlay_column: Some("y".into()),
            ..AggregateOptions::default()
        }
    }

    #[test]
    fn band_membership_and_boundaries() {
        let t = households(&[29.0, 70.0, 30.0], &[1, 1, 1], &["a", "b", "c"]);
        let mut tab = t.clone();
        tab.add_labels("edu", vec!["college".into(), "hs".into(), "college".into()]).unwrap();
        let scheme = CohortScheme::default().with_education("edu", vec![]);
        let out = assign_cohorts(&tab, &scheme, 0).unwrap();
        let keys = out.labels(COHORT_COLUMN).unwrap();
        assert_eq!(keys[0], "<30|college");
        assert_eq!(keys[1], ">=70|hs");
        assert_eq!(keys[2], "30-39|college");
    }

    #[test]
    fn uncovered_age() {
        let t = households(&[15.0], &[1], &["a"]);
        let scheme = CohortScheme {
            age_bands: vec![AgeBand::new(Some(18), None)],
            ..CohortScheme::default()
        };
        assert!(matches!(
            assign_cohorts(&t, &scheme, 0),
            Err(Error::UncoveredAge { age: 15, .. })
        ));
    }

    #[test]
    fn overlapping_bands_are_rejected() {
        let scheme = CohortScheme {
            age_bands: vec![AgeBand::new(None, Some(40)), AgeBand::new(Some(30), None)],
            ..CohortScheme::default()
        };
        assert!(scheme.validate().is_err());
    }

    #[test]
    fn key_is_fixed_by_first_wave() {
        // Unit ages from 29 to 30 across waves; key stays "<30".
        let t = households(&[30.0, 29.0], &[2, 1], &["a", "a"]);
        let out = assign_cohorts(&t, &CohortScheme::default(), 0).unwrap();
        assert!(out.labels(COHORT_COLUMN).unwrap().iter().all(|k| k == "<30"));
    }

    #[test]
    fn subsample_is_deterministic_and_partitions() {
        let a = subsample_of("unit-17", 7, 4);
        assert_eq!(a, subsample_of("unit-17", 7, 4));
        let mut counts = [0usize; 4];
        for i in 0..4000 {
            counts[subsample_of(&format!("u{i}"), 7, 4) as usize] += 1;
        }
        assert!(counts.iter().all(|&c| (850..1150).contains(&c)), "{counts:?}");
    }

    #[test]
    fn split_units_appear_in_one_wave_only() {
        let mut units = Vec::new();
        let mut waves = Vec::new();
        for u in 0..200 {
            for w in 1..=4 {
                units.push(format!("u{u}"));
                waves.push(w);
            }
        }
        let refs: Vec<&str> = units.iter().map(String::as_str).collect();
        let t = households(&vec![45.0; 800], &waves, &refs);
        let out = assign_cohorts(&t, &CohortScheme::default().with_split(4), 3).unwrap();
        let pp = aggregate(&out, &AggregateOptions { weighting: Weighting::Equal, ..AggregateOptions::default() }).unwrap();
        let mut seen = std::collections::HashSet::new();
        let mut total = 0;
        for c in &pp.cells {
            for m in &c.members {
                assert!(seen.insert(m.clone()), "unit {m} used twice");
                total += 1;
            }
        }
        assert_eq!(total, 200);
    }

    #[test]
    fn income_share_example() {
        let pp = aggregate(&one_cell(&[2.0, 3.0, 5.0], &[0.5, 0.4, 0.3]), &opts(Weighting::IncomeShare)).unwrap();
        let c = &pp.cells[0];
        assert_eq!(c.gamma, vec![0.2, 0.3, 0.5]);
        assert!((c.aggregates["w"] - 0.37).abs() < 1e-15);
        assert!((c.delta - 0.38).abs() < 1e-15);
    }

    #[test]
    fn delta_examples() {
        let pp = aggregate(&one_cell(&[1.0, 1.0, 2.0], &[0.1, 0.1, 0.1]), &opts(Weighting::IncomeShare)).unwrap();
        assert!((pp.cells[0].delta - 0.375).abs() < 1e-15);
        let pp = aggregate(&one_cell(&[1.0, 7.0, 2.0, 9.0, 4.0], &[0.1; 5]), &opts(Weighting::Equal)).unwrap();
        assert!((pp.cells[0].delta - 0.2).abs() < 1e-15);
        let pp = aggregate(&one_cell(&[3.0], &[0.1]), &opts(Weighting::IncomeShare)).unwrap();
        assert_eq!(pp.cells[0].delta, 1.0);
        let rep = cell_report(&pp, 100);
        assert_eq!(rep.keys[0].delta_max, 1.0);
    }

    #[test]
    fn empty_cell_when_balance_required() {
        let mut t = PanelTable::new(
            "hh",
            "wave",
            vec!["a".into(), "b".into(), "c".into()],
            vec![1, 2, 1],
        )
        .unwrap();
        t.add_numeric("y", vec![1.0, 2.0, 3.0], VariableRole::Regressor).unwrap();
        t.add_labels(COHORT_COLUMN, vec!["k1".into(), "k1".into(), "k2".into()]).unwrap();
        let mut o = opts(Weighting::Equal);
        let pp = aggregate(&t, &o).unwrap();
        assert!(!pp.balanced);
        o.require_balanced = true;
        assert!(matches!(aggregate(&t, &o), Err(Error::EmptyCell { ref key, wave: 2 }) if key == "k2"));
    }

    #[test]
    fn report_sizes() {
        let mut units = Vec::new();
        let mut keys = Vec::new();
        let mut waves = Vec::new();
        for (k, n) in [("small", 9), ("big", 183)] {
            for i in 0..n {
                units.push(format!("{k}{i}"));
                keys.push(k.to_string());
                waves.push(1);
            }
        }
        let n = units.len();
        let mut t = PanelTable::new("hh", "wave", units, waves).unwrap();
        t.add_numeric("y", vec![1.0; n], VariableRole::Regressor).unwrap();
        t.add_labels(COHORT_COLUMN, keys).unwrap();
        let pp = aggregate(&t, &opts(Weighting::IncomeShare)).unwrap();
        let r = cell_report(&pp, 100);
        assert_eq!((r.min_size, r.max_size), (9, 183));
        assert_eq!(r.under_threshold, 1);
        assert_eq!(r.under_30, 1);
        assert!(pp.cells.iter().find(|c| c.key == "small").unwrap().small);
        let r = cell_report(&pp, 5);
        assert_eq!(r.under_threshold, 0);
    }

    #[test]
    fn csv_export_columns() {
        let pp = aggregate(&one_cell(&[2.0, 3.0, 5.0], &[0.5, 0.4, 0.3]), &opts(Weighting::IncomeShare)).unwrap();
        let mut buf = Vec::new();
        pp.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "key,wave,size,delta,delta_bar,y,w");
        assert_eq!(lines.next().unwrap(), "c,1,3,0.38,0.38,3.8,0.37");
    }

    proptest! {
        #[test]
        fn income_share_identity(
            rows in proptest::collection::vec((0.1f64..100.0, 0.0f64..1.0), 1..40)
        ) {
            let outlays: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let shares: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let pp = aggregate(&one_cell(&outlays, &shares), &opts(Weighting::IncomeShare)).unwrap();
            let spent: f64 = outlays.iter().zip(&shares).map(|(y, w)| y * w).sum();
            let total: f64 = outlays.iter().sum();
            let c = &pp.cells[0];
            prop_assert!((c.aggregates["w"] - spent / total).abs() < 1e-12);
            prop_assert!((c.gamma.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let n = rows.len() as f64;
            prop_assert!(c.delta >= 1.0 / n - 1e-12 && c.delta <= 1.0 + 1e-12);
        }

        #[test]
        fn constant_delta_for_equal_weights_and_sizes(n in 1usize..20, t in 1i64..5) {
            let mut units = Vec::new();
            let mut waves = Vec::new();
            for w in 1..=t {
                for i in 0..n {
                    units.push(format!("w{w}h{i}"));
                    waves.push(w);
                }
            }
            let rows = units.len();
            let mut tab = PanelTable::new("hh", "wave", units, waves).unwrap();
            tab.add_numeric("y", (0..rows).map(|i| 1.0 + i as f64).collect(), VariableRole::Regressor).unwrap();
            tab.add_labels(COHORT_COLUMN, vec!["k".into(); rows]).unwrap();
            let pp = aggregate(&tab, &opts(Weighting::Equal)).unwrap();
            for c in &pp.cells {
                prop_assert!((c.delta - 1.0 / n as f64).abs() < 1e-14);
            }
        }
    }
}
