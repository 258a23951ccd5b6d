//! Tabular classification data with contributor and demographic annotations.
//!
//! Rows are observations; each row belongs to exactly one contributor. Labels
//! are stored in the `{-1, +1}` margin convention used by the losses in
//! [`crate::model`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("non-finite or missing value {value:?} at row {row}, column `{column}`")]
    NonFinite { row: usize, column: String, value: String },
    #[error("label {value:?} at row {row} is not in {{0,1}} or {{-1,+1}}")]
    BadLabel { row: usize, value: String },
    #[error("{0} contains a single label class; both -1 and +1 are required")]
    SingleClass(&'static str),
    #[error("empty contributor id at row {0}")]
    EmptyContributor(usize),
    #[error("invalid table: {0}")]
    Invalid(String),
    #[error("invalid split: {0}")]
    Split(String),
}

/// A demographic attribute column, kept in its raw (unstandardized) form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum DemographicColumn {
    Categorical(Vec<String>),
    Numeric(Vec<f64>),
}

impl DemographicColumn {
    pub fn len(&self) -> usize {
        match self {
            DemographicColumn::Categorical(v) => v.len(),
            DemographicColumn::Numeric(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Self {
        match self {
            DemographicColumn::Categorical(v) => {
                DemographicColumn::Categorical(rows.iter().map(|&r| v[r].clone()).collect())
            }
            DemographicColumn::Numeric(v) => DemographicColumn::Numeric(rows.iter().map(|&r| v[r]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTable {
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<i8>,
    contributor_ids: Vec<String>,
    demographics: BTreeMap<String, DemographicColumn>,
    row_ids: Vec<usize>,
}

impl ObservationTable {
    /// Builds a table from row-major features. Row ids default to `0..n`.
    pub fn new(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<i8>,
        contributor_ids: Vec<String>,
    ) -> Result<Self, DatasetError> {
        let n = labels.len();
        Self::from_parts(
            features,
            n_features,
            labels,
            contributor_ids,
            BTreeMap::new(),
            (0..n).collect(),
        )
    }

    /// Builds a one-to-one table where contributor `i` owns row `i`.
    pub fn from_rows(rows: &[Vec<f64>], labels: &[i8]) -> Result<Self, DatasetError> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(DatasetError::Invalid("ragged feature rows".into()));
        }
        let features = rows.iter().flatten().copied().collect();
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        Self::new(features, d, labels.to_vec(), ids)
    }

    pub fn from_parts(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<i8>,
        contributor_ids: Vec<String>,
        demographics: BTreeMap<String, DemographicColumn>,
        row_ids: Vec<usize>,
    ) -> Result<Self, DatasetError> {
        let table = ObservationTable {
            features,
            n_features,
            labels,
            contributor_ids,
            demographics,
            row_ids,
        };
        table.validate()?;
        Ok(table)
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let n = self.labels.len();
        if self.n_features == 0 {
            return Err(DatasetError::Invalid("at least one feature column is required".into()));
        }
        if n == 0 {
            return Err(DatasetError::Invalid("table has no rows".into()));
        }
        if self.features.len() != n * self.n_features {
            return Err(DatasetError::Invalid(format!(
                "feature buffer holds {} values, expected {} rows x {} columns",
                self.features.len(),
                n,
                self.n_features
            )));
        }
        if self.contributor_ids.len() != n || self.row_ids.len() != n {
            return Err(DatasetError::Invalid("column lengths disagree".into()));
        }
        if let Some(pos) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(DatasetError::NonFinite {
                row: pos / self.n_features,
                column: format!("feature {}", pos % self.n_features),
                value: self.features[pos].to_string(),
            });
        }
        if let Some(row) = self.labels.iter().position(|&y| y != 1 && y != -1) {
            return Err(DatasetError::BadLabel {
                row,
                value: self.labels[row].to_string(),
            });
        }
        if let Some(row) = self.contributor_ids.iter().position(|c| c.is_empty()) {
            return Err(DatasetError::EmptyContributor(row));
        }
        for (name, col) in &self.demographics {
            if col.len() != n {
                return Err(DatasetError::Invalid(format!(
                    "demographic column `{name}` has {} values for {n} rows",
                    col.len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> f64 {
        f64::from(self.labels[i])
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn contributor_ids(&self) -> &[String] {
        &self.contributor_ids
    }

    pub fn row_ids(&self) -> &[usize] {
        &self.row_ids
    }

    pub fn demographics(&self) -> &BTreeMap<String, DemographicColumn> {
        &self.demographics
    }

    pub fn has_both_classes(&self) -> bool {
        self.labels.contains(&1) && self.labels.contains(&-1)
    }

    pub fn require_both_classes(&self, what: &'static str) -> Result<(), DatasetError> {
        if self.has_both_classes() {
            Ok(())
        } else {
            Err(DatasetError::SingleClass(what))
        }
    }

    /// Returns the sub-table made of the given positions, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Self, DatasetError> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.len()) {
            return Err(DatasetError::Invalid(format!("row {bad} out of range")));
        }
        let mut features = Vec::with_capacity(rows.len() * self.n_features);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        Self::from_parts(
            features,
            self.n_features,
            rows.iter().map(|&r| self.labels[r]).collect(),
            rows.iter().map(|&r| self.contributor_ids[r].clone()).collect(),
            self.demographics
                .iter()
                .map(|(k, c)| (k.clone(), c.select(rows)))
                .collect(),
            rows.iter().map(|&r| self.row_ids[r]).collect(),
        )
    }

    /// The table with position `i` removed.
    pub fn without(&self, i: usize) -> Result<Self, DatasetError> {
        let keep: Vec<usize> = (0..self.len()).filter(|&r| r != i).collect();
        self.select(&keep)
    }
}

/// How the contributor of each row is identified.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContributorSource {
    Column(String),
    RowIndex,
}

/// Column-role assignments for a CSV file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub label: String,
    pub contributor: ContributorSource,
    pub demographics: Vec<String>,
    pub drop: Vec<String>,
    /// Keep demographic columns out of the feature matrix.
    pub exclude_demographics: bool,
    pub standardize: bool,
}

impl Schema {
    pub fn new(label: impl Into<String>, contributor: ContributorSource) -> Self {
        Schema {
            label: label.into(),
            contributor,
            demographics: Vec::new(),
            drop: Vec::new(),
            exclude_demographics: false,
            standardize: true,
        }
    }
}

fn parse_label(raw: &str, row: usize) -> Result<i8, DatasetError> {
    match raw.trim() {
        "1" | "+1" | "1.0" | "+1.0" => Ok(1),
        "0" | "-1" | "0.0" | "-1.0" => Ok(-1),
        other => Err(DatasetError::BadLabel {
            row,
            value: other.to_string(),
        }),
    }
}

/// Loads a CSV with a header row according to `schema`.
///
/// Numeric feature columns are z-scored over the full table (constant columns
/// become all zeros); any feature column with a non-numeric entry is one-hot
/// encoded over its sorted distinct values.
pub fn load_dataset(path: &Path, schema: &Schema) -> Result<ObservationTable, DatasetError> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_dataset(file, schema)
}

pub fn read_dataset<R: std::io::Read>(reader: R, schema: &Schema) -> Result<ObservationTable, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let column_of = |name: &str| -> Result<usize, DatasetError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::Schema(format!("column `{name}` not found in header")))
    };

    let label_col = column_of(&schema.label)?;
    let contributor_col = match &schema.contributor {
        ContributorSource::Column(c) => Some(column_of(c)?),
        ContributorSource::RowIndex => None,
    };
    let demographic_cols = schema
        .demographics
        .iter()
        .map(|c| column_of(c))
        .collect::<Result<Vec<_>, _>>()?;
    let drop_cols = schema
        .drop
        .iter()
        .map(|c| column_of(c))
        .collect::<Result<BTreeSet<_>, _>>()?;
    if drop_cols.contains(&label_col) {
        return Err(DatasetError::Schema("label column is also dropped".into()));
    }
    if contributor_col == Some(label_col) || demographic_cols.contains(&label_col) {
        return Err(DatasetError::Schema(
            "label column cannot also be the contributor or a demographic column".into(),
        ));
    }

    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|c| {
            *c != label_col
                && Some(*c) != contributor_col
                && !drop_cols.contains(c)
                && !(schema.exclude_demographics && demographic_cols.contains(c))
        })
        .collect();

    let records = rdr.records().collect::<Result<Vec<_>, _>>()?;
    let n = records.len();
    if n < 2 {
        return Err(DatasetError::Invalid(format!("need at least 2 rows, found {n}")));
    }

    let mut labels = Vec::with_capacity(n);
    let mut contributors = Vec::with_capacity(n);
    for (r, rec) in records.iter().enumerate() {
        if rec.len() != headers.len() {
            return Err(DatasetError::Schema(format!(
                "row {r} has {} fields, header has {}",
                rec.len(),
                headers.len()
            )));
        }
        labels.push(parse_label(&rec[label_col], r)?);
        let id = match contributor_col {
            Some(c) => rec[c].trim().to_string(),
            None => r.to_string(),
        };
        if id.is_empty() {
            return Err(DatasetError::EmptyContributor(r));
        }
        contributors.push(id);
    }
    if !labels.contains(&1) || !labels.contains(&-1) {
        return Err(DatasetError::SingleClass("label column"));
    }

    // Column-major assembly, then transposed into the row-major buffer.
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for &c in &feature_cols {
        let raw: Vec<&str> = records.iter().map(|rec| rec[c].trim()).collect();
        let parsed: Vec<Option<f64>> = raw.iter().map(|s| s.parse::<f64>().ok()).collect();
        if parsed.iter().all(Option::is_some) {
            let values: Vec<f64> = parsed.into_iter().map(Option::unwrap).collect();
            if let Some(r) = values.iter().position(|v| !v.is_finite()) {
                return Err(DatasetError::NonFinite {
                    row: r,
                    column: headers[c].clone(),
                    value: raw[r].to_string(),
                });
            }
            columns.push(values);
        } else {
            if let Some(r) = raw.iter().position(|s| s.is_empty()) {
                return Err(DatasetError::NonFinite {
                    row: r,
                    column: headers[c].clone(),
                    value: String::new(),
                });
            }
            let levels: BTreeSet<&str> = raw.iter().copied().collect();
            for level in levels {
                columns.push(raw.iter().map(|s| f64::from(u8::from(*s == level))).collect());
            }
        }
    }
    if columns.is_empty() {
        return Err(DatasetError::Schema("no feature columns remain".into()));
    }
    if schema.standardize {
        columns.iter_mut().for_each(|col| standardize(col));
    }

    let d = columns.len();
    let mut features = vec![0.0; n * d];
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            features[i * d + j] = *v;
        }
    }

    let mut demographics = BTreeMap::new();
    for (&c, name) in demographic_cols.iter().zip(&schema.demographics) {
        let raw: Vec<&str> = records.iter().map(|rec| rec[c].trim()).collect();
        let numeric: Option<Vec<f64>> = raw
            .iter()
            .map(|s| s.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect();
        let col = match numeric {
            Some(values) => DemographicColumn::Numeric(values),
            None => DemographicColumn::Categorical(raw.iter().map(|s| s.to_string()).collect()),
        };
        demographics.insert(name.clone(), col);
    }

    ObservationTable::from_parts(features, d, labels, contributors, demographics, (0..n).collect())
}

/// In-place z-score with population variance; constant columns become zero.
fn standardize(col: &mut [f64]) {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd <= 1e-12 * mean.abs().max(1.0) {
        col.iter_mut().for_each(|v| *v = 0.0);
    } else {
        col.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Seeded Fisher-Yates shuffle, then the first `round(n * test_fraction)`
/// shuffled rows form the test part. Both parts keep their parent's row
/// order.
pub fn split_train_test(
    table: &ObservationTable,
    spec: SplitSpec,
) -> Result<(ObservationTable, ObservationTable), DatasetError> {
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(DatasetError::Split(format!(
            "test_fraction must lie in (0, 1), got {}",
            spec.test_fraction
        )));
    }
    let n = table.len();
    let n_test = (n as f64 * spec.test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(DatasetError::Split(format!(
            "test_fraction {} on {n} rows leaves an empty part",
            spec.test_fraction
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);
    let (test_rows, train_rows) = order.split_at(n_test);
    let mut test_rows = test_rows.to_vec();
    let mut train_rows = train_rows.to_vec();
    test_rows.sort_unstable();
    train_rows.sort_unstable();

    let train = table.select(&train_rows)?;
    if !train.has_both_classes() {
        return Err(DatasetError::Split(format!(
            "training part of seed {} holds a single class; choose another seed or a smaller test_fraction",
            spec.seed
        )));
    }
    Ok((train, table.select(&test_rows)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cardinality {
    OneToOne,
    OneToMany,
}

/// Contributor id to the table positions it owns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContributorIndex {
    groups: BTreeMap<String, Vec<usize>>,
    n_rows: usize,
    cardinality: Cardinality,
}

impl ContributorIndex {
    pub fn groups(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.groups
    }

    pub fn cardinality(&self) -> Cardinality {
        self.cardinality
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_contributors(&self) -> usize {
        self.groups.len()
    }

    /// Builds an index directly from per-row contributor ids.
    pub fn from_ids<S: AsRef<str>>(ids: &[S]) -> Self {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            groups.entry(id.as_ref().to_string()).or_default().push(i);
        }
        let cardinality = if groups.values().all(|g| g.len() == 1) {
            Cardinality::OneToOne
        } else {
            Cardinality::OneToMany
        };
        ContributorIndex {
            groups,
            n_rows: ids.len(),
            cardinality,
        }
    }
}

pub fn build_contributor_index(table: &ObservationTable) -> ContributorIndex {
    ContributorIndex::from_ids(table.contributor_ids())
}
