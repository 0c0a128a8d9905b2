//! Long-format household panel tables.
//!
//! A [`PanelTable`] holds one row per (unit, wave) observation. Numeric
//! columns store missing values as `NaN`; columns with the `cohort_key` role
//! are kept as text labels.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableRole {
    Share,
    LogOutlay,
    Regressor,
    Instrument,
    Price,
    SurveyWeight,
    CohortKey,
}

impl VariableRole {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "share" => Self::Share,
            "log_outlay" => Self::LogOutlay,
            "regressor" => Self::Regressor,
            "instrument" => Self::Instrument,
            "price" => Self::Price,
            "survey_weight" => Self::SurveyWeight,
            "cohort_key" => Self::CohortKey,
            other => return Err(Error::UnknownRole(other.to_string())),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Share => "share",
            Self::LogOutlay => "log_outlay",
            Self::Regressor => "regressor",
            Self::Instrument => "instrument",
            Self::Price => "price",
            Self::SurveyWeight => "survey_weight",
            Self::CohortKey => "cohort_key",
        }
    }
}

/// Maps CSV columns to roles. In JSON form it is a flat object
/// `{"column": "role"}`; the unit identifier and wave columns are marked with
/// the pseudo-roles `"unit_id"` and `"wave"`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleSchema {
    pub unit: String,
    pub wave: String,
    pub roles: IndexMap<String, VariableRole>,
}

impl RoleSchema {
    pub fn new(unit: impl Into<String>, wave: impl Into<String>) -> Self {
        Self {
            unit: unit.into(),
            wave: wave.into(),
            roles: IndexMap::new(),
        }
    }

    pub fn with(mut self, column: impl Into<String>, role: VariableRole) -> Self {
        self.roles.insert(column.into(), role);
        self
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: IndexMap<String, String> = serde_json::from_str(s)?;
        let mut unit = None;
        let mut wave = None;
        let mut roles = IndexMap::new();
        for (column, role) in raw {
            match role.as_str() {
                "unit_id" => {
                    if unit.replace(column).is_some() {
                        return Err(Error::InvalidSchema("more than one unit_id column".into()));
                    }
                }
                "wave" => {
                    if wave.replace(column).is_some() {
                        return Err(Error::InvalidSchema("more than one wave column".into()));
                    }
                }
                other => {
                    roles.insert(column, VariableRole::parse(other)?);
                }
            }
        }
        let schema = Self {
            unit: unit.ok_or_else(|| Error::InvalidSchema("no unit_id column".into()))?,
            wave: wave.ok_or_else(|| Error::InvalidSchema("no wave column".into()))?,
            roles,
        };
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        let mut out = IndexMap::new();
        out.insert(self.unit.clone(), "unit_id".to_string());
        out.insert(self.wave.clone(), "wave".to_string());
        for (c, r) in &self.roles {
            out.insert(c.clone(), r.as_str().to_string());
        }
        serde_json::to_string_pretty(&out).expect("string map serializes")
    }

    /// Checks the model-level role invariant: exactly one log-outlay column and
    /// at least one share column.
    pub fn validate_for_model(&self) -> Result<()> {
        let n_outlay = self.roles.values().filter(|r| **r == VariableRole::LogOutlay).count();
        if n_outlay != 1 {
            return Err(Error::InvalidSchema(format!(
                "expected exactly one log_outlay column, found {n_outlay}"
            )));
        }
        if !self.roles.values().any(|r| *r == VariableRole::Share) {
            return Err(Error::InvalidSchema("no share column".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelTable {
    unit_column: String,
    wave_column: String,
    unit_ids: Vec<String>,
    waves: Vec<i64>,
    numeric: IndexMap<String, Vec<f64>>,
    labels: IndexMap<String, Vec<String>>,
    roles: IndexMap<String, VariableRole>,
}

impl PanelTable {
    /// Creates a table with key columns only. Fails on a repeated
    /// (unit, wave) pair.
    pub fn new(
        unit_column: impl Into<String>,
        wave_column: impl Into<String>,
        unit_ids: Vec<String>,
        waves: Vec<i64>,
    ) -> Result<Self> {
        if unit_ids.len() != waves.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} unit ids vs {} waves",
                unit_ids.len(),
                waves.len()
            )));
        }
        let mut seen = HashSet::with_capacity(unit_ids.len());
        for (row, (u, w)) in unit_ids.iter().zip(&waves).enumerate() {
            if !seen.insert((u.as_str(), *w)) {
                return Err(Error::DuplicateUnitWave {
                    unit: u.clone(),
                    wave: *w,
                    row,
                });
            }
        }
        Ok(Self {
            unit_column: unit_column.into(),
            wave_column: wave_column.into(),
            unit_ids,
            waves,
            numeric: IndexMap::new(),
            labels: IndexMap::new(),
            roles: IndexMap::new(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn unit_column(&self) -> &str {
        &self.unit_column
    }

    pub fn wave_column(&self) -> &str {
        &self.wave_column
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn waves(&self) -> &[i64] {
        &self.waves
    }

    /// Adds (or replaces) a numeric column. Share columns are range-checked;
    /// `NaN` marks a missing value.
    pub fn add_numeric(
        &mut self,
        name: impl Into<String>,
        values: Vec<f64>,
        role: VariableRole,
    ) -> Result<()> {
        let name = name.into();
        if values.len() != self.n_rows() {
            return Err(Error::DimensionMismatch(format!(
                "column `{name}` has {} values for {} rows",
                values.len(),
                self.n_rows()
            )));
        }
        if role == VariableRole::Share {
            if let Some((row, &v)) = values
                .iter()
                .enumerate()
                .find(|(_, v)| !v.is_nan() && !(0.0..=1.0).contains(*v))
            {
                return Err(Error::ShareOutOfRange {
                    row,
                    column: name,
                    value: v,
                });
            }
        }
        self.labels.shift_remove(&name);
        self.numeric.insert(name.clone(), values);
        self.roles.insert(name, role);
        Ok(())
    }

    pub fn add_labels(&mut self, name: impl Into<String>, values: Vec<String>) -> Result<()> {
        let name = name.into();
        if values.len() != self.n_rows() {
            return Err(Error::DimensionMismatch(format!(
                "column `{name}` has {} values for {} rows",
                values.len(),
                self.n_rows()
            )));
        }
        self.numeric.shift_remove(&name);
        self.labels.insert(name.clone(), values);
        self.roles.insert(name, VariableRole::CohortKey);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.numeric
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_string(),
            })
    }

    pub fn labels(&self, name: &str) -> Result<&[String]> {
        self.labels
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_string(),
            })
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.numeric.contains_key(name) || self.labels.contains_key(name)
    }

    pub fn role(&self, name: &str) -> Option<VariableRole> {
        self.roles.get(name).copied()
    }

    pub fn numeric_columns(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.numeric.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn label_columns(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.labels.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn columns_with_role(&self, role: VariableRole) -> Vec<&str> {
        self.roles
            .iter()
            .filter(|(_, r)| **r == role)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    /// Sorted distinct waves.
    pub fn distinct_waves(&self) -> Vec<i64> {
        self.waves.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Sorted distinct unit ids.
    pub fn distinct_units(&self) -> Vec<String> {
        self.unit_ids
            .iter()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// True when every unit is observed in every wave.
    pub fn is_balanced(&self) -> bool {
        let t = self.distinct_waves().len();
        let units = self.distinct_units().len();
        self.n_rows() == t * units
    }

    /// New table restricted to `rows` (in the given order).
    pub fn select_rows(&self, rows: &[usize]) -> PanelTable {
        let pick_f = |v: &Vec<f64>| rows.iter().map(|&r| v[r]).collect::<Vec<_>>();
        let pick_s = |v: &Vec<String>| rows.iter().map(|&r| v[r].clone()).collect::<Vec<_>>();
        PanelTable {
            unit_column: self.unit_column.clone(),
            wave_column: self.wave_column.clone(),
            unit_ids: pick_s(&self.unit_ids),
            waves: rows.iter().map(|&r| self.waves[r]).collect(),
            numeric: self.numeric.iter().map(|(k, v)| (k.clone(), pick_f(v))).collect(),
            labels: self.labels.iter().map(|(k, v)| (k.clone(), pick_s(v))).collect(),
            roles: self.roles.clone(),
        }
    }

    /// Adds `dst = ln(src)`. Non-positive inputs become missing.
    pub fn add_log(&mut self, src: &str, dst: &str, role: VariableRole) -> Result<()> {
        let values = self
            .column(src)?
            .iter()
            .map(|&v| if v > 0.0 { v.ln() } else { f64::NAN })
            .collect();
        self.add_numeric(dst, values, role)
    }

    /// Adds `dst = num / den`, e.g. a budget share from an expenditure and an
    /// outlay column.
    pub fn add_ratio(&mut self, num: &str, den: &str, dst: &str, role: VariableRole) -> Result<()> {
        let values = self
            .column(num)?
            .iter()
            .zip(self.column(den)?)
            .map(|(&a, &b)| if b != 0.0 { a / b } else { f64::NAN })
            .collect();
        self.add_numeric(dst, values, role)
    }

    /// Schema describing the current columns.
    pub fn schema(&self) -> RoleSchema {
        RoleSchema {
            unit: self.unit_column.clone(),
            wave: self.wave_column.clone(),
            roles: self.roles.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![self.unit_column.clone(), self.wave_column.clone()];
        header.extend(self.roles.keys().cloned());
        w.write_record(&header)?;
        for r in 0..self.n_rows() {
            let mut rec = vec![self.unit_ids[r].clone(), self.waves[r].to_string()];
            for name in self.roles.keys() {
                if let Some(v) = self.numeric.get(name) {
                    rec.push(format_value(v[r]));
                } else {
                    rec.push(self.labels[name][r].clone());
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn format_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    let s = raw.trim();
    if s.is_empty() || s == "NA" {
        return Ok(f64::NAN);
    }
    s.parse::<f64>().map_err(|_| Error::NonNumericCell {
        row,
        column: column.to_string(),
        value: raw.to_string(),
    })
}

/// Reads a long-format CSV. Only columns named in the schema are loaded.
/// Row numbers in errors are 1-based data rows (the header is row 0).
pub fn read_csv<R: Read>(reader: R, schema: &RoleSchema) -> Result<PanelTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::Headers).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_string(),
            })
    };
    let unit_idx = find(&schema.unit)?;
    let wave_idx = find(&schema.wave)?;
    let col_idx = schema
        .roles
        .keys()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;

    let mut units = Vec::new();
    let mut waves = Vec::new();
    let mut cells: Vec<Vec<String>> = vec![Vec::new(); col_idx.len()];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        units.push(rec[unit_idx].trim().to_string());
        let w = rec[wave_idx].trim();
        waves.push(w.parse::<i64>().map_err(|_| Error::NonNumericCell {
            row,
            column: schema.wave.clone(),
            value: w.to_string(),
        })?);
        for (j, &c) in col_idx.iter().enumerate() {
            cells[j].push(rec[c].to_string());
        }
    }

    let mut table = PanelTable::new(schema.unit.clone(), schema.wave.clone(), units, waves)
        .map_err(|e| match e {
            Error::DuplicateUnitWave { unit, wave, row } => Error::DuplicateUnitWave {
                unit,
                wave,
                row: row + 1,
            },
            other => other,
        })?;
    for ((name, role), raw) in schema.roles.iter().zip(cells) {
        if *role == VariableRole::CohortKey {
            table.add_labels(name.clone(), raw.into_iter().map(|s| s.trim().to_string()).collect())?;
            continue;
        }
        let values = raw
            .iter()
            .enumerate()
            .map(|(i, s)| parse_cell(s, i + 1, name))
            .collect::<Result<Vec<_>>>()?;
        table.add_numeric(name.clone(), values, *role).map_err(|e| match e {
            Error::ShareOutOfRange { row, column, value } => Error::ShareOutOfRange {
                row: row + 1,
                column,
                value,
            },
            other => other,
        })?;
    }
    Ok(table)
}

pub fn load_csv(path: impl AsRef<Path>, schema: &RoleSchema) -> Result<PanelTable> {
    read_csv(std::fs::File::open(path)?, schema)
}

/// Oxford equivalence scale: 1.0 for the first adult, 0.8 for each further
/// adult, 0.5 per child aged 6 or more and 0.4 per child aged 5 or less.
pub fn oxford_scale(adults: u32, children_6_plus: u32, children_under_6: u32) -> Result<f64> {
    if adults == 0 {
        return Err(Error::NoAdult);
    }
    Ok(1.0
        + 0.8 * f64::from(adults - 1)
        + 0.5 * f64::from(children_6_plus)
        + 0.4 * f64::from(children_under_6))
}

/// Keeps the units observed in every wave. Returns the balanced table and the
/// number of rows removed.
pub fn balance(table: &PanelTable) -> Result<(PanelTable, usize)> {
    let t = table.distinct_waves().len();
    let mut counts: BTreeMap<&str, BTreeSet<i64>> = BTreeMap::new();
    for (u, w) in table.unit_ids().iter().zip(table.waves()) {
        counts.entry(u.as_str()).or_default().insert(*w);
    }
    let keep: HashSet<&str> = counts
        .iter()
        .filter(|(_, ws)| ws.len() == t)
        .map(|(u, _)| *u)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyResult);
    }
    let rows: Vec<usize> = (0..table.n_rows())
        .filter(|&r| keep.contains(table.unit_ids()[r].as_str()))
        .collect();
    let removed = table.n_rows() - rows.len();
    Ok((table.select_rows(&rows), removed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema() -> RoleSchema {
        RoleSchema::new("hh", "year")
            .with("w_food", VariableRole::Share)
            .with("lny", VariableRole::LogOutlay)
    }

    #[test]
    fn reads_balanced_two_by_two() {
        let csv = "hh,year,w_food,lny\n1,1,0.2,10\n1,2,0.25,10.1\n2,1,0.1,9.5\n2,2,0.12,9.7\n";
        let t = read_csv(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(t.n_rows(), 4);
        assert!(t.is_balanced());
        assert_eq!(t.column("w_food").unwrap(), &[0.2, 0.25, 0.1, 0.12]);
    }

    #[test]
    fn duplicate_unit_wave_is_rejected() {
        let csv = "hh,year,w_food,lny\n7,1,0.2,10\n7,2,0.2,10\n7,2,0.3,10\n";
        match read_csv(csv.as_bytes(), &schema()) {
            Err(Error::DuplicateUnitWave { unit, wave, row }) => {
                assert_eq!((unit.as_str(), wave, row), ("7", 2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn share_out_of_range_names_row() {
        let csv = "hh,year,w_food,lny\n1,1,0.2,10\n2,1,1.3,10\n";
        match read_csv(csv.as_bytes(), &schema()) {
            Err(Error::ShareOutOfRange { row, column, value }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "w_food");
                assert_eq!(value, 1.3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_and_missing_columns() {
        let csv = "hh,year,w_food,lny\n1,1,0.2,abc\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &schema()),
            Err(Error::NonNumericCell { row: 1, .. })
        ));
        let csv = "hh,year,w_food\n1,1,0.2\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &schema()),
            Err(Error::MissingColumn { column }) if column == "lny"
        ));
    }

    #[test]
    fn empty_cells_are_missing_and_zero_shares_legal() {
        let csv = "hh,year,w_food,lny\n1,1,0,\n";
        let t = read_csv(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(t.column("w_food").unwrap()[0], 0.0);
        assert!(t.column("lny").unwrap()[0].is_nan());
    }

    #[test]
    fn schema_json_round_trip() {
        let s = RoleSchema::from_json_str(
            r#"{"hh":"unit_id","year":"wave","w":"share","lny":"log_outlay","edu":"cohort_key"}"#,
        )
        .unwrap();
        assert_eq!(s.unit, "hh");
        assert_eq!(s.roles["edu"], VariableRole::CohortKey);
        assert!(s.validate_for_model().is_ok());
        assert_eq!(RoleSchema::from_json_str(&s.to_json_string()).unwrap(), s);
        assert!(matches!(
            RoleSchema::from_json_str(r#"{"hh":"unit_id","year":"wave","x":"bogus"}"#),
            Err(Error::UnknownRole(_))
        ));
    }

    #[test]
    fn oxford_scale_values() {
        assert_eq!(oxford_scale(1, 0, 0).unwrap(), 1.0);
        assert!((oxford_scale(2, 1, 0).unwrap() - 2.3).abs() < 1e-12);
        assert!((oxford_scale(1, 0, 2).unwrap() - 1.8).abs() < 1e-12);
        assert!(matches!(oxford_scale(0, 1, 1), Err(Error::NoAdult)));
    }

    fn table_from(rows: &[(&str, i64)]) -> PanelTable {
        let mut t = PanelTable::new(
            "u",
            "t",
            rows.iter().map(|r| r.0.to_string()).collect(),
            rows.iter().map(|r| r.1).collect(),
        )
        .unwrap();
        let x = (0..rows.len()).map(|i| i as f64).collect();
        t.add_numeric("x", x, VariableRole::Regressor).unwrap();
        t
    }

    #[test]
    fn balance_drops_incomplete_units() {
        let t = table_from(&[("a", 1), ("a", 2), ("b", 1), ("b", 2), ("c", 1)]);
        let (b, removed) = balance(&t).unwrap();
        assert_eq!(removed, 1);
        assert_eq!(b.distinct_units(), vec!["a", "b"]);
        let (again, removed) = balance(&b).unwrap();
        assert_eq!(removed, 0);
        assert_eq!(again, b);
        let disjoint = table_from(&[("a", 1), ("b", 2)]);
        assert!(matches!(balance(&disjoint), Err(Error::EmptyResult)));
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_identity(vals in proptest::collection::vec(-1e6f64..1e6, 1..20),
                                      shares in proptest::collection::vec(0.0f64..=1.0, 20)) {
            let n = vals.len();
            let mut t = PanelTable::new("u", "t",
                (0..n).map(|i| format!("h{i}")).collect(), vec![1; n]).unwrap();
            t.add_numeric("w", shares[..n].to_vec(), VariableRole::Share).unwrap();
            t.add_numeric("x", vals, VariableRole::Regressor).unwrap();
            let mut buf = Vec::new();
            t.write_csv(&mut buf).unwrap();
            let back = read_csv(buf.as_slice(), &t.schema()).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn oxford_scale_monotone(a in 1u32..6, c6 in 0u32..6, c5 in 0u32..6) {
            let base = oxford_scale(a, c6, c5).unwrap();
            prop_assert!(oxford_scale(a + 1, c6, c5).unwrap() >= base);
            prop_assert!(oxford_scale(a, c6 + 1, c5).unwrap() >= base);
            prop_assert!(oxford_scale(a, c6, c5 + 1).unwrap() >= base);
        }
    }
}
