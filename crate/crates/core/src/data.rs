//! Effect-size datasets: CSV ingestion, serialization and the
//! group-mean / group-centering covariate transforms.

use std::collections::HashMap;
use std::hash::Hash;
use std::io::{Read, Write};

use crate::error::{Result, RveError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Num(f64),
    Cat(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Num(x) => Some(*x),
            Value::Cat(_) => None,
        }
    }

    /// Text form; numbers use the shortest representation that parses back exactly.
    pub fn to_text(&self) -> String {
        match self {
            Value::Num(x) => format!("{x}"),
            Value::Cat(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

/// One observed effect size.
///
/// `cells` holds every column of the source row, aligned with
/// [`Dataset::columns`], so covariates are looked up by column name through
/// the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectSizeRow {
    pub study_id: String,
    pub effect_size: f64,
    pub var_eff_size: f64,
    pub user_weight: Option<f64>,
    pub cells: Vec<Value>,
}

/// Which columns play the study / effect / variance / weight roles.
#[derive(Debug, Clone, PartialEq)]
pub struct Roles {
    pub study: String,
    pub effect: String,
    pub variance: String,
    pub user_weight: Option<String>,
}

/// Optional hints for [`parse_csv`]. Unset roles are resolved from common
/// column names (`study`, `studyid`, `studynum`; `es`, `effect.size`,
/// `effectsize`, `yi`; `v`, `var`, `var.eff.size`, `vi`), case-insensitively.
#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    pub study: Option<String>,
    pub effect: Option<String>,
    pub variance: Option<String>,
    pub user_weight: Option<String>,
    /// Columns that must parse as numbers.
    pub numeric: Vec<String>,
    /// Columns treated as categorical even if every cell looks numeric.
    pub categorical: Vec<String>,
}

impl CsvSchema {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn study(mut self, name: impl Into<String>) -> Self {
        self.study = Some(name.into());
        self
    }

    pub fn effect(mut self, name: impl Into<String>) -> Self {
        self.effect = Some(name.into());
        self
    }

    pub fn variance(mut self, name: impl Into<String>) -> Self {
        self.variance = Some(name.into());
        self
    }

    pub fn user_weight(mut self, name: impl Into<String>) -> Self {
        self.user_weight = Some(name.into());
        self
    }

    pub fn categorical(mut self, name: impl Into<String>) -> Self {
        self.categorical.push(name.into());
        self
    }
}

const STUDY_NAMES: &[&str] = &["study", "studyid", "studynum", "study_id", "study.id"];
const EFFECT_NAMES: &[&str] = &["es", "effect.size", "effectsize", "effect_size", "yi"];
const VAR_NAMES: &[&str] = &["v", "var", "var.eff.size", "var_eff_size", "vi", "variance"];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: Vec<Column>,
    rows: Vec<EffectSizeRow>,
    roles: Roles,
}

impl Dataset {
    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn rows(&self) -> &[EffectSizeRow] {
        &self.rows
    }

    pub fn roles(&self) -> &Roles {
        &self.roles
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn values(&self, name: &str) -> Result<Vec<&Value>> {
        let idx = self
            .column_index(name)
            .ok_or_else(|| RveError::MissingColumn(name.to_string()))?;
        Ok(self.rows.iter().map(|r| &r.cells[idx]).collect())
    }

    pub fn numeric(&self, name: &str) -> Result<Vec<f64>> {
        self.values(name)?
            .into_iter()
            .map(|v| v.as_f64().ok_or_else(|| RveError::NotNumeric(name.to_string())))
            .collect()
    }

    pub fn study_ids(&self) -> Vec<&str> {
        self.rows.iter().map(|r| r.study_id.as_str()).collect()
    }

    /// Number of distinct studies.
    pub fn study_count(&self) -> usize {
        self.study_groups().len()
    }

    /// Row indices grouped by study, studies in order of first appearance,
    /// rows within a study in file order.
    pub fn study_groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, row) in self.rows.iter().enumerate() {
            match index.get(row.study_id.as_str()) {
                Some(&g) => groups[g].1.push(i),
                None => {
                    index.insert(row.study_id.as_str(), groups.len());
                    groups.push((row.study_id.clone(), vec![i]));
                }
            }
        }
        groups
    }

    /// Appends (or replaces) a numeric column.
    pub fn with_column(mut self, name: &str, values: Vec<f64>) -> Result<Dataset> {
        if values.len() != self.rows.len() {
            return Err(RveError::LengthMismatch(values.len(), self.rows.len()));
        }
        let idx = match self.column_index(name) {
            Some(i) => {
                self.columns[i].kind = ColumnKind::Numeric;
                i
            }
            None => {
                self.columns.push(Column {
                    name: name.to_string(),
                    kind: ColumnKind::Numeric,
                });
                self.columns.len() - 1
            }
        };
        for (row, x) in self.rows.iter_mut().zip(values) {
            if idx == row.cells.len() {
                row.cells.push(Value::Num(x));
            } else {
                row.cells[idx] = Value::Num(x);
            }
        }
        self.refresh_roles()?;
        Ok(self)
    }

    /// Re-points the effect-size role at another numeric column.
    pub fn with_effect_column(mut self, name: &str) -> Result<Dataset> {
        self.roles.effect = name.to_string();
        self.refresh_roles()?;
        Ok(self)
    }

    /// Re-points (or sets) the user-weight role.
    pub fn with_user_weight_column(mut self, name: &str) -> Result<Dataset> {
        self.roles.user_weight = Some(name.to_string());
        self.refresh_roles()?;
        Ok(self)
    }

    fn refresh_roles(&mut self) -> Result<()> {
        let effect = self.role_index(&self.roles.effect)?;
        let var = self.role_index(&self.roles.variance)?;
        let weight = match &self.roles.user_weight {
            Some(w) => Some(self.role_index(w)?),
            None => None,
        };
        for row in &mut self.rows {
            row.effect_size = row.cells[effect]
                .as_f64()
                .ok_or_else(|| RveError::NotNumeric(self.roles.effect.clone()))?;
            row.var_eff_size = row.cells[var]
                .as_f64()
                .ok_or_else(|| RveError::NotNumeric(self.roles.variance.clone()))?;
            row.user_weight = match weight {
                Some(w) => Some(
                    row.cells[w]
                        .as_f64()
                        .ok_or_else(|| RveError::NotNumeric("user weight".into()))?,
                ),
                None => None,
            };
        }
        Ok(())
    }

    fn role_index(&self, name: &str) -> Result<usize> {
        self.column_index(name)
            .ok_or_else(|| RveError::MissingColumn(name.to_string()))
    }

    /// Builds a dataset from in-memory columns. Used by the simulator and bindings.
    pub fn from_columns(columns: Vec<(String, Vec<Value>)>, roles: Roles) -> Result<Dataset> {
        let n = columns.first().map_or(0, |c| c.1.len());
        if let Some((_, c)) = columns.iter().find(|(_, c)| c.len() != n) {
            return Err(RveError::LengthMismatch(c.len(), n));
        }
        let cols: Vec<Column> = columns
            .iter()
            .map(|(name, vals)| Column {
                name: name.clone(),
                kind: if vals.iter().all(|v| matches!(v, Value::Num(_))) {
                    ColumnKind::Numeric
                } else {
                    ColumnKind::Categorical
                },
            })
            .collect();
        let study_idx = cols
            .iter()
            .position(|c| c.name == roles.study)
            .ok_or_else(|| RveError::MissingColumn(roles.study.clone()))?;
        let rows = (0..n)
            .map(|i| {
                let cells: Vec<Value> = columns.iter().map(|(_, c)| c[i].clone()).collect();
                EffectSizeRow {
                    study_id: cells[study_idx].to_text(),
                    effect_size: f64::NAN,
                    var_eff_size: f64::NAN,
                    user_weight: None,
                    cells,
                }
            })
            .collect();
        let mut ds = Dataset {
            columns: cols,
            rows,
            roles,
        };
        ds.refresh_roles()?;
        ds.check_variances()?;
        Ok(ds)
    }

    fn check_variances(&self) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            if !(row.var_eff_size > 0.0) {
                return Err(RveError::NonPositiveVariance {
                    line: i + 2,
                    value: row.var_eff_size,
                });
            }
        }
        Ok(())
    }

    /// Writes the dataset back out as CSV with a header row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let map = |e: csv::Error| RveError::Io(std::io::Error::other(e));
        wtr.write_record(self.columns.iter().map(|c| c.name.as_str()))
            .map_err(map)?;
        for row in &self.rows {
            wtr.write_record(row.cells.iter().map(Value::to_text))
                .map_err(map)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("CSV output is UTF-8")
    }
}

fn resolve_role(headers: &[String], explicit: &Option<String>, candidates: &[&str]) -> Result<String> {
    if let Some(name) = explicit {
        return if headers.iter().any(|h| h == name) {
            Ok(name.clone())
        } else {
            Err(RveError::MissingColumn(name.clone()))
        };
    }
    candidates
        .iter()
        .find_map(|c| headers.iter().find(|h| h.eq_ignore_ascii_case(c)))
        .cloned()
        .ok_or_else(|| RveError::MissingColumn(candidates[0].to_string()))
}

/// Parses comma-separated effect-size data with a header row.
pub fn parse_csv<R: Read>(source: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| RveError::MalformedCsv {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();

    let roles = Roles {
        study: resolve_role(&headers, &schema.study, STUDY_NAMES)?,
        effect: resolve_role(&headers, &schema.effect, EFFECT_NAMES)?,
        variance: resolve_role(&headers, &schema.variance, VAR_NAMES)?,
        user_weight: match &schema.user_weight {
            Some(w) => Some(resolve_role(&headers, &Some(w.clone()), &[])?),
            None => None,
        },
    };
    for name in schema.numeric.iter().chain(&schema.categorical) {
        if !headers.contains(name) {
            return Err(RveError::MissingColumn(name.clone()));
        }
    }

    let mut raw: Vec<Vec<String>> = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| RveError::MalformedCsv {
            line,
            message: match e.kind() {
                csv::ErrorKind::UnequalLengths {
                    expected_len, len, ..
                } => format!("expected {expected_len} fields, found {len}"),
                _ => e.to_string(),
            },
        })?;
        for (j, cell) in record.iter().enumerate() {
            if cell.is_empty() {
                return Err(RveError::EmptyCell {
                    column: headers[j].clone(),
                    line,
                });
            }
        }
        raw.push(record.iter().map(str::to_string).collect());
    }

    let mut required_numeric: Vec<&str> = vec![&roles.effect, &roles.variance];
    if let Some(w) = &roles.user_weight {
        required_numeric.push(w);
    }
    required_numeric.extend(schema.numeric.iter().map(String::as_str));

    let mut columns = Vec::with_capacity(headers.len());
    for (j, name) in headers.iter().enumerate() {
        let forced_cat = schema.categorical.contains(name) || *name == roles.study;
        let must_be_numeric = required_numeric.contains(&name.as_str());
        let parses = raw.iter().all(|r| r[j].parse::<f64>().is_ok());
        if must_be_numeric && !parses {
            let (line, value) = raw
                .iter()
                .enumerate()
                .find(|(_, r)| r[j].parse::<f64>().is_err())
                .map(|(i, r)| (i + 2, r[j].clone()))
                .expect("some cell failed to parse");
            return Err(RveError::NonNumeric {
                column: name.clone(),
                line,
                value,
            });
        }
        let kind = if parses && !(forced_cat && !must_be_numeric) {
            ColumnKind::Numeric
        } else {
            ColumnKind::Categorical
        };
        columns.push(Column {
            name: name.clone(),
            kind,
        });
    }

    let study_idx = headers.iter().position(|h| *h == roles.study).unwrap();
    let rows = raw
        .into_iter()
        .map(|r| {
            let study_id = r[study_idx].clone();
            let cells = r
                .into_iter()
                .zip(&columns)
                .map(|(cell, col)| match col.kind {
                    ColumnKind::Numeric => Value::Num(cell.parse().unwrap()),
                    ColumnKind::Categorical => Value::Cat(cell),
                })
                .collect();
            EffectSizeRow {
                study_id,
                effect_size: f64::NAN,
                var_eff_size: f64::NAN,
                user_weight: None,
                cells,
            }
        })
        .collect();

    let mut ds = Dataset {
        columns,
        rows,
        roles,
    };
    ds.refresh_roles()?;
    ds.check_variances()?;
    Ok(ds)
}

fn group_means<G: Eq + Hash>(values: &[f64], groups: &[G]) -> Result<Vec<f64>> {
    if values.len() != groups.len() {
        return Err(RveError::LengthMismatch(values.len(), groups.len()));
    }
    let mut slot: HashMap<&G, usize> = HashMap::new();
    let mut sums: Vec<(f64, usize)> = Vec::new();
    let mut assignment = Vec::with_capacity(values.len());
    for (x, g) in values.iter().zip(groups) {
        let s = *slot.entry(g).or_insert_with(|| {
            sums.push((0.0, 0));
            sums.len() - 1
        });
        sums[s].0 += x;
        sums[s].1 += 1;
        assignment.push(s);
    }
    Ok(assignment
        .into_iter()
        .map(|s| sums[s].0 / sums[s].1 as f64)
        .collect())
}

/// Replaces each value with the mean of its group.
pub fn group_mean<G: Eq + Hash>(values: &[f64], groups: &[G]) -> Result<Vec<f64>> {
    group_means(values, groups)
}

/// Deviation of each value from its group mean.
pub fn group_center<G: Eq + Hash>(values: &[f64], groups: &[G]) -> Result<Vec<f64>> {
    let means = group_means(values, groups)?;
    Ok(values.iter().zip(means).map(|(x, m)| x - m).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Dataset> {
        parse_csv(text.as_bytes(), &CsvSchema::default())
    }

    #[test]
    fn single_row() {
        let ds = parse("study,es,v\n1,0.5,0.04\n").unwrap();
        assert_eq!(ds.len(), 1);
        let r = &ds.rows()[0];
        assert_eq!(r.study_id, "1");
        assert_eq!(r.effect_size, 0.5);
        assert_eq!(r.var_eff_size, 0.04);
        assert_eq!(r.user_weight, None);
    }

    #[test]
    fn zero_variance_rejected() {
        let err = parse("study,es,v\n1,0.5,0\n").unwrap_err();
        assert!(matches!(err, RveError::NonPositiveVariance { line: 2, .. }));
    }

    #[test]
    fn ragged_rows_rejected() {
        let err = parse("study,es,v\n1,0.5,0.1\n2,0.3\n").unwrap_err();
        assert!(matches!(err, RveError::MalformedCsv { line: 3, .. }), "{err}");
    }

    #[test]
    fn empty_cell_rejected() {
        let err = parse("study,es,v,x\n1,0.5,0.1,\n").unwrap_err();
        assert!(matches!(err, RveError::EmptyCell { .. }));
    }

    #[test]
    fn bad_number_in_numeric_column() {
        let err = parse("study,es,v\n1,abc,0.1\n").unwrap_err();
        assert!(matches!(err, RveError::NonNumeric { line: 2, .. }));
    }

    #[test]
    fn missing_role_column() {
        let err = parse("study,es\n1,0.5\n").unwrap_err();
        assert!(matches!(err, RveError::MissingColumn(_)));
        let err = parse_csv(
            "study,es,v\n1,0.5,0.1\n".as_bytes(),
            &CsvSchema::new().variance("var.eff.size"),
        )
        .unwrap_err();
        assert!(matches!(err, RveError::MissingColumn(c) if c == "var.eff.size"));
    }

    #[test]
    fn column_kinds_inferred() {
        let ds = parse("Study,effect.size,var.eff.size,grp,x\na,0.1,0.2,B,1\nb,0.3,0.1,A,2\n").unwrap();
        assert_eq!(ds.roles().study, "Study");
        assert_eq!(ds.column("grp").unwrap().kind, ColumnKind::Categorical);
        assert_eq!(ds.column("x").unwrap().kind, ColumnKind::Numeric);
        assert_eq!(ds.column("Study").unwrap().kind, ColumnKind::Categorical);
    }

    #[test]
    fn user_weight_column() {
        let ds = parse_csv(
            "study,es,v,w\n1,0.5,0.1,2\n".as_bytes(),
            &CsvSchema::new().user_weight("w"),
        )
        .unwrap();
        assert_eq!(ds.rows()[0].user_weight, Some(2.0));
    }

    #[test]
    fn study_groups_keep_first_appearance_order() {
        let ds = parse("study,es,v\nb,1,1\na,2,1\nb,3,1\nc,4,1\na,5,1\n").unwrap();
        let groups = ds.study_groups();
        let ids: Vec<&str> = groups.iter().map(|g| g.0.as_str()).collect();
        assert_eq!(ids, ["b", "a", "c"]);
        assert_eq!(groups[0].1, [0, 2]);
        assert_eq!(groups[1].1, [1, 4]);
    }

    #[test]
    fn group_mean_examples() {
        assert_eq!(group_mean(&[1.0, 2.0, 3.0], &["a", "a", "a"]).unwrap(), [2.0; 3]);
        assert_eq!(
            group_mean(&[1.0, 3.0, 10.0], &["a", "a", "b"]).unwrap(),
            [2.0, 2.0, 10.0]
        );
        assert_eq!(group_mean(&[5.0], &["a"]).unwrap(), [5.0]);
        assert!(matches!(
            group_mean(&[1.0], &["a", "b"]),
            Err(RveError::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn group_center_examples() {
        assert_eq!(group_center(&[1.0, 2.0, 3.0], &[7, 7, 7]).unwrap(), [-1.0, 0.0, 1.0]);
        assert_eq!(group_center(&[4.0, 4.0], &[1, 1]).unwrap(), [0.0, 0.0]);
        let vals = [1.0, 3.0, 10.0, 6.0];
        let g = ["a", "a", "b", "b"];
        let m = group_mean(&vals, &g).unwrap();
        let c = group_center(&vals, &g).unwrap();
        for i in 0..4 {
            assert_eq!(m[i] + c[i], vals[i]);
        }
        assert!(group_center(&[1.0, 2.0], &["a"]).is_err());
    }
}
