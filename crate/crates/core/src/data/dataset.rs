//! Respondents, panel scenarios, CSV ingestion and validation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use crate::data::spec::ModelSpec;
use crate::error::{Error, Result};

pub const RESPONDENT_TABLE: &str = "respondents.csv";
pub const SCENARIO_TABLE: &str = "scenarios.csv";

const MISSING_MARKERS: [&str; 3] = ["", "NA", "."];

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceScenario {
    pub attributes: Vec<f64>,
    pub chosen: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Respondent {
    pub id: String,
    /// Membership covariates, in `ModelSpec::membership_covariates` order.
    pub z: Vec<f64>,
    /// Explanatory covariates, in `ModelSpec::explanatory_covariates` order.
    pub x: Vec<f64>,
    /// Ordinal responses in model indicator order; `None` marks a missing cell.
    pub indicators: Vec<Option<i64>>,
    pub scenarios: Vec<ChoiceScenario>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub membership_names: Vec<String>,
    pub explanatory_names: Vec<String>,
    pub attribute_names: Vec<String>,
    pub indicator_names: Vec<String>,
    pub categories: Vec<u32>,
    pub alternatives: usize,
}

impl DatasetMeta {
    pub fn for_spec(spec: &ModelSpec) -> Self {
        let inds = spec.indicators();
        DatasetMeta {
            membership_names: spec.membership_covariates.clone(),
            explanatory_names: spec.explanatory_covariates.clone(),
            attribute_names: spec.scenario_attributes.clone(),
            indicator_names: inds.iter().map(|i| i.name.clone()).collect(),
            categories: inds.iter().map(|i| i.categories).collect(),
            alternatives: spec.alternatives,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub respondents: Vec<Respondent>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn n_respondents(&self) -> usize {
        self.respondents.len()
    }

    pub fn observation_count(&self) -> usize {
        self.respondents.iter().map(|r| r.scenarios.len()).sum()
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            respondents: self.respondents[range].to_vec(),
            meta: self.meta.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub respondent: String,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "respondent {}: {}: {}", self.respondent, self.field, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} violations", self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "  {v}")?;
        }
        Ok(())
    }
}

/// Checks every dataset invariant against the model.
pub fn validate(dataset: &Dataset, spec: &ModelSpec) -> ValidationReport {
    let inds = spec.indicators();
    let mut violations = Vec::new();
    let mut push = |id: &str, field: String, message: String| {
        violations.push(Violation {
            respondent: id.to_string(),
            field,
            message,
        })
    };
    let m = spec.membership_covariates.len();
    let k = spec.explanatory_covariates.len();
    let a = spec.scenario_attributes.len();
    for r in &dataset.respondents {
        if r.z.len() != m {
            push(&r.id, "z".into(), format!("expected {m} membership covariates, got {}", r.z.len()));
        }
        if r.x.len() != k {
            push(&r.id, "x".into(), format!("expected {k} explanatory covariates, got {}", r.x.len()));
        }
        for (name, v) in spec.membership_covariates.iter().zip(&r.z) {
            if !v.is_finite() {
                push(&r.id, name.clone(), format!("non-finite value {v}"));
            }
        }
        for (name, v) in spec.explanatory_covariates.iter().zip(&r.x) {
            if !v.is_finite() {
                push(&r.id, name.clone(), format!("non-finite value {v}"));
            }
        }
        if r.indicators.len() != inds.len() {
            push(
                &r.id,
                "indicators".into(),
                format!("expected {} indicators, got {}", inds.len(), r.indicators.len()),
            );
        }
        for (info, value) in inds.iter().zip(&r.indicators) {
            match value {
                None if !spec.options.drop_missing_indicators => {
                    push(&r.id, info.name.clone(), "missing response".into())
                }
                None => {}
                Some(v) if *v < 1 || *v > info.categories as i64 => push(
                    &r.id,
                    info.name.clone(),
                    format!("value {v} outside 1..={}", info.categories),
                ),
                Some(_) => {}
            }
        }
        if r.scenarios.is_empty() {
            push(&r.id, "scenarios".into(), "no choice scenarios".into());
        }
        for (t, s) in r.scenarios.iter().enumerate() {
            if s.attributes.len() != a {
                push(
                    &r.id,
                    format!("scenario {}", t + 1),
                    format!("expected {a} attributes, got {}", s.attributes.len()),
                );
            }
            if s.attributes.iter().any(|v| !v.is_finite()) {
                push(&r.id, format!("scenario {}", t + 1), "non-finite attribute".into());
            }
            if s.chosen >= spec.alternatives {
                push(
                    &r.id,
                    format!("scenario {}", t + 1),
                    format!("chosen {} outside 0..{}", s.chosen, spec.alternatives),
                );
            }
        }
    }
    ValidationReport { violations }
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| Error::Csv {
            path: path.into(),
            source,
        })
}

fn header_index(headers: &csv::StringRecord) -> HashMap<String, usize> {
    headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.to_string(), i))
        .collect()
}

enum CovariateSource {
    Numeric(usize),
    Dummy { column: usize, level: String },
}

fn resolve_covariate(
    name: &str,
    table: &str,
    columns: &HashMap<String, usize>,
    spec: &ModelSpec,
) -> Result<CovariateSource> {
    if let Some(&i) = columns.get(name) {
        return Ok(CovariateSource::Numeric(i));
    }
    if let Some((col, level)) = name.split_once('=') {
        if let Some(cat) = spec.categorical.iter().find(|c| c.column == col) {
            if level == cat.reference {
                return Err(Error::Spec(format!(
                    "covariate `{name}` refers to the reference level of `{col}`"
                )));
            }
            if !cat.levels.is_empty() && !cat.levels.iter().any(|l| l == level) {
                return Err(Error::Spec(format!("`{level}` is not a declared level of `{col}`")));
            }
            let &column = columns.get(col).ok_or_else(|| Error::MissingColumn {
                table: table.to_string(),
                column: col.to_string(),
            })?;
            return Ok(CovariateSource::Dummy {
                column,
                level: level.to_string(),
            });
        }
    }
    Err(Error::MissingColumn {
        table: table.to_string(),
        column: name.to_string(),
    })
}

fn parse_f64(text: &str, table: &str, row: usize, column: &str) -> Result<f64> {
    text.parse::<f64>().map_err(|_| Error::Row {
        table: table.to_string(),
        row,
        message: format!("column `{column}`: `{text}` is not a number"),
    })
}

/// Parses both tables without range validation; see [`load_dataset`].
pub fn read_dataset(respondent_table: &Path, scenario_table: &Path, spec: &ModelSpec) -> Result<Dataset> {
    let rtable = respondent_table.display().to_string();
    let mut reader = open_csv(respondent_table)?;
    let headers = reader
        .headers()
        .map_err(|source| Error::Csv {
            path: respondent_table.into(),
            source,
        })?
        .clone();
    let columns = header_index(&headers);
    let id_col = *columns.get(&spec.id_column).ok_or_else(|| Error::MissingColumn {
        table: rtable.clone(),
        column: spec.id_column.clone(),
    })?;
    let z_src = spec
        .membership_covariates
        .iter()
        .map(|n| resolve_covariate(n, &rtable, &columns, spec))
        .collect::<Result<Vec<_>>>()?;
    let x_src = spec
        .explanatory_covariates
        .iter()
        .map(|n| resolve_covariate(n, &rtable, &columns, spec))
        .collect::<Result<Vec<_>>>()?;
    let inds = spec.indicators();
    let ind_cols = inds
        .iter()
        .map(|i| {
            columns.get(&i.name).copied().ok_or_else(|| Error::MissingColumn {
                table: rtable.clone(),
                column: i.name.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let categorical_checks: Vec<(usize, &crate::data::spec::CategoricalSpec)> = spec
        .categorical
        .iter()
        .filter(|c| !c.levels.is_empty())
        .filter_map(|c| columns.get(&c.column).map(|&i| (i, c)))
        .collect();

    let mut respondents = Vec::new();
    let mut index_of: HashMap<String, usize> = HashMap::new();
    for (row, record) in reader.records().enumerate() {
        let row = row + 1;
        let record = record.map_err(|source| Error::Csv {
            path: respondent_table.into(),
            source,
        })?;
        let id = record.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::Row {
                table: rtable.clone(),
                row,
                message: "empty respondent id".into(),
            });
        }
        for (col, cat) in &categorical_checks {
            let v = record.get(*col).unwrap_or("");
            if !cat.levels.iter().any(|l| l == v) {
                return Err(Error::Row {
                    table: rtable.clone(),
                    row,
                    message: format!("column `{}`: unknown level `{v}`", cat.column),
                });
            }
        }
        let eval = |src: &CovariateSource, name: &str| -> Result<f64> {
            match src {
                CovariateSource::Numeric(i) => parse_f64(record.get(*i).unwrap_or(""), &rtable, row, name),
                CovariateSource::Dummy { column, level } => {
                    Ok(if record.get(*column) == Some(level.as_str()) { 1.0 } else { 0.0 })
                }
            }
        };
        let z = z_src
            .iter()
            .zip(&spec.membership_covariates)
            .map(|(s, n)| eval(s, n))
            .collect::<Result<Vec<_>>>()?;
        let x = x_src
            .iter()
            .zip(&spec.explanatory_covariates)
            .map(|(s, n)| eval(s, n))
            .collect::<Result<Vec<_>>>()?;
        let mut indicators = Vec::with_capacity(ind_cols.len());
        for (col, info) in ind_cols.iter().zip(&inds) {
            let text = record.get(*col).unwrap_or("");
            if MISSING_MARKERS.contains(&text) {
                indicators.push(None);
            } else {
                let v = text.parse::<i64>().map_err(|_| Error::Row {
                    table: rtable.clone(),
                    row,
                    message: format!("indicator `{}`: `{text}` is not an integer", info.name),
                })?;
                indicators.push(Some(v));
            }
        }
        if index_of.insert(id.clone(), respondents.len()).is_some() {
            return Err(Error::Row {
                table: rtable.clone(),
                row,
                message: format!("duplicate respondent id `{id}`"),
            });
        }
        respondents.push(Respondent {
            id,
            z,
            x,
            indicators,
            scenarios: Vec::new(),
        });
    }

    let stable = scenario_table.display().to_string();
    let mut reader = open_csv(scenario_table)?;
    let headers = reader
        .headers()
        .map_err(|source| Error::Csv {
            path: scenario_table.into(),
            source,
        })?
        .clone();
    let columns = header_index(&headers);
    let col = |name: &str| {
        columns.get(name).copied().ok_or_else(|| Error::MissingColumn {
            table: stable.clone(),
            column: name.to_string(),
        })
    };
    let rid_col = col("respondent_id")?;
    let idx_col = col("scenario_index")?;
    let chosen_col = col("chosen")?;
    let attr_cols = spec
        .scenario_attributes
        .iter()
        .map(|a| col(a))
        .collect::<Result<Vec<_>>>()?;
    let mut pending: Vec<BTreeMap<i64, ChoiceScenario>> = vec![BTreeMap::new(); respondents.len()];
    for (row, record) in reader.records().enumerate() {
        let row = row + 1;
        let record = record.map_err(|source| Error::Csv {
            path: scenario_table.into(),
            source,
        })?;
        let rid = record.get(rid_col).unwrap_or("");
        let &n = index_of.get(rid).ok_or_else(|| {
            Error::Referential(format!(
                "scenario row {row} references unknown respondent `{rid}`"
            ))
        })?;
        let idx_text = record.get(idx_col).unwrap_or("");
        let idx = idx_text.parse::<i64>().map_err(|_| Error::Row {
            table: stable.clone(),
            row,
            message: format!("scenario_index `{idx_text}` is not an integer"),
        })?;
        let chosen_text = record.get(chosen_col).unwrap_or("");
        let chosen = chosen_text.parse::<usize>().map_err(|_| Error::Row {
            table: stable.clone(),
            row,
            message: format!("chosen `{chosen_text}` is not a non-negative integer"),
        })?;
        let attributes = attr_cols
            .iter()
            .zip(&spec.scenario_attributes)
            .map(|(&c, name)| parse_f64(record.get(c).unwrap_or(""), &stable, row, name))
            .collect::<Result<Vec<_>>>()?;
        if pending[n]
            .insert(idx, ChoiceScenario { attributes, chosen })
            .is_some()
        {
            return Err(Error::Row {
                table: stable.clone(),
                row,
                message: format!("duplicate scenario {idx} for respondent `{rid}`"),
            });
        }
    }
    for (r, scenarios) in respondents.iter_mut().zip(pending) {
        if scenarios.is_empty() {
            return Err(Error::Referential(format!(
                "respondent `{}` has no rows in the scenario table",
                r.id
            )));
        }
        r.scenarios = scenarios.into_values().collect();
    }
    Ok(Dataset {
        respondents,
        meta: DatasetMeta::for_spec(spec),
    })
}

/// Reads and validates a dataset; the first violation becomes an error.
pub fn load_dataset(respondent_table: &Path, scenario_table: &Path, spec: &ModelSpec) -> Result<Dataset> {
    let dataset = read_dataset(respondent_table, scenario_table, spec)?;
    let report = validate(&dataset, spec);
    if let Some(v) = report.violations.first() {
        let row = dataset
            .respondents
            .iter()
            .position(|r| r.id == v.respondent)
            .map_or(0, |i| i + 1);
        return Err(Error::Row {
            table: respondent_table.display().to_string(),
            row,
            message: v.to_string(),
        });
    }
    Ok(dataset)
}

/// Loads `respondents.csv` and `scenarios.csv` from a directory.
pub fn load_dataset_dir(dir: &Path, spec: &ModelSpec) -> Result<Dataset> {
    load_dataset(&dir.join(RESPONDENT_TABLE), &dir.join(SCENARIO_TABLE), spec)
}

/// Writes the two CSV tables. Covariates are written dummy-coded under their
/// covariate names, so reloading with the same spec reproduces every value.
pub fn write_dataset(dataset: &Dataset, dir: &Path, extra: Option<(&str, &[String])>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rpath = dir.join(RESPONDENT_TABLE);
    let csv_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source: csv::Error| Error::Csv { path: path.clone(), source }
    };
    let mut w = csv::Writer::from_path(&rpath).map_err(csv_err(&rpath))?;
    let meta = &dataset.meta;
    let x_only: Vec<usize> = (0..meta.explanatory_names.len())
        .filter(|&k| !meta.membership_names.contains(&meta.explanatory_names[k]))
        .collect();
    let mut header = vec!["id".to_string()];
    header.extend(meta.membership_names.iter().cloned());
    header.extend(x_only.iter().map(|&k| meta.explanatory_names[k].clone()));
    header.extend(meta.indicator_names.iter().cloned());
    if let Some((name, _)) = extra {
        header.push(name.to_string());
    }
    w.write_record(&header).map_err(csv_err(&rpath))?;
    for (n, r) in dataset.respondents.iter().enumerate() {
        let mut row = vec![r.id.clone()];
        row.extend(r.z.iter().map(|v| v.to_string()));
        row.extend(x_only.iter().map(|&k| r.x[k].to_string()));
        row.extend(r.indicators.iter().map(|v| match v {
            Some(v) => v.to_string(),
            None => "NA".to_string(),
        }));
        if let Some((_, values)) = extra {
            row.push(values[n].clone());
        }
        w.write_record(&row).map_err(csv_err(&rpath))?;
    }
    w.flush().map_err(|e| Error::io(&rpath, e))?;

    let spath = dir.join(SCENARIO_TABLE);
    let mut w = csv::Writer::from_path(&spath).map_err(csv_err(&spath))?;
    let mut header = vec!["respondent_id".to_string(), "scenario_index".to_string()];
    header.extend(meta.attribute_names.iter().cloned());
    header.push("chosen".to_string());
    w.write_record(&header).map_err(csv_err(&spath))?;
    for r in &dataset.respondents {
        for (t, s) in r.scenarios.iter().enumerate() {
            let mut row = vec![r.id.clone(), (t + 1).to_string()];
            row.extend(s.attributes.iter().map(|v| v.to_string()));
            row.push(s.chosen.to_string());
            w.write_record(&row).map_err(csv_err(&spath))?;
        }
    }
    w.flush().map_err(|e| Error::io(&spath, e))?;
    Ok(())
}
