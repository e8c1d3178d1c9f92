//! Tabular data: schemas, CSV ingestion, schema inference, strata statistics
//! and deterministic splits.
//!
//! Missing categorical cells become the ordinary category [`MISSING_CATEGORY`]
//! and are remembered as missing so the no-mask training policy can mask them.
//! Rows with a missing numerical cell are dropped with a warning.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Reserved category for empty categorical cells.
pub const MISSING_CATEGORY: &str = "<NA>";

/// Default distinct-value threshold above which an all-numeric column is
/// inferred as numerical.
pub const DEFAULT_DISTINCT_THRESHOLD: usize = 20;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("column `{0}` missing from CSV header")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a finite number")]
    TypeParseFailure { row: usize, column: String, value: String },
    #[error("table has no rows")]
    EmptyTable,
    #[error("row {row} has {found} cells, schema has {expected}")]
    RaggedRow { row: usize, found: usize, expected: usize },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("split fraction {0} outside (0, 1)")]
    InvalidFraction(f64),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema file: {0}")]
    SchemaFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Categorical,
    Numerical,
}

impl fmt::Display for ColumnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColumnKind::Categorical => write!(f, "categorical"),
            ColumnKind::Numerical => write!(f, "numerical"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub position: usize,
}

/// Ordered list of columns with unique names and gap-free positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SchemaFile", into = "SchemaFile")]
pub struct Schema {
    columns: Vec<ColumnSpec>,
}

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    column: Vec<SchemaFileEntry>,
}

#[derive(Serialize, Deserialize)]
struct SchemaFileEntry {
    name: String,
    kind: ColumnKind,
}

impl TryFrom<SchemaFile> for Schema {
    type Error = DatasetError;

    fn try_from(file: SchemaFile) -> Result<Self, Self::Error> {
        Schema::new(file.column.into_iter().map(|c| (c.name, c.kind)))
    }
}

impl From<Schema> for SchemaFile {
    fn from(schema: Schema) -> Self {
        SchemaFile {
            column: schema
                .columns
                .into_iter()
                .map(|c| SchemaFileEntry { name: c.name, kind: c.kind })
                .collect(),
        }
    }
}

impl Schema {
    /// Builds a schema from `(name, kind)` pairs in column order.
    pub fn new<S: Into<String>>(
        columns: impl IntoIterator<Item = (S, ColumnKind)>,
    ) -> Result<Self, DatasetError> {
        let columns: Vec<ColumnSpec> = columns
            .into_iter()
            .enumerate()
            .map(|(position, (name, kind))| ColumnSpec { name: name.into(), kind, position })
            .collect();
        Self::from_specs(columns)
    }

    pub fn from_specs(columns: Vec<ColumnSpec>) -> Result<Self, DatasetError> {
        if columns.is_empty() {
            return Err(DatasetError::InvalidSchema("no columns".into()));
        }
        let mut seen = HashSet::new();
        for (i, c) in columns.iter().enumerate() {
            if c.position != i {
                return Err(DatasetError::InvalidSchema(format!(
                    "column `{}` has position {} but appears at {i}",
                    c.name, c.position
                )));
            }
            if c.name.is_empty() {
                return Err(DatasetError::InvalidSchema(format!("column {i} has an empty name")));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(DatasetError::InvalidSchema(format!("duplicate column `{}`", c.name)));
            }
        }
        Ok(Schema { columns })
    }

    /// Reads a schema file: a TOML document with one `[[column]]` table per
    /// column, each holding `name` and `kind` (`categorical` or `numerical`).
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, DatasetError> {
        toml::from_str(text).map_err(|e| DatasetError::SchemaFile(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn column(&self, index: usize) -> &ColumnSpec {
        &self.columns[index]
    }

    pub fn kind(&self, index: usize) -> ColumnKind {
        self.columns[index].kind
    }

    pub fn name(&self, index: usize) -> &str {
        &self.columns[index].name
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn categorical_indices(&self) -> Vec<usize> {
        self.indices_of_kind(ColumnKind::Categorical)
    }

    pub fn numerical_indices(&self) -> Vec<usize> {
        self.indices_of_kind(ColumnKind::Numerical)
    }

    fn indices_of_kind(&self, kind: ColumnKind) -> Vec<usize> {
        self.columns.iter().filter(|c| c.kind == kind).map(|c| c.position).collect()
    }

    /// Canonical `name:kind` text, one column per line.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for c in &self.columns {
            out.push_str(&c.name);
            out.push(':');
            out.push_str(&c.kind.to_string());
            out.push('\n');
        }
        out
    }

    /// Returns a copy of this schema with an extra column appended.
    pub fn with_column(&self, name: &str, kind: ColumnKind) -> Result<Schema, DatasetError> {
        let mut cols: Vec<(String, ColumnKind)> =
            self.columns.iter().map(|c| (c.name.clone(), c.kind)).collect();
        cols.push((name.to_string(), kind));
        Schema::new(cols)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    Cat(String),
    Num(f64),
}

impl Cell {
    pub fn as_cat(&self) -> Option<&str> {
        match self {
            Cell::Cat(s) => Some(s),
            Cell::Num(_) => None,
        }
    }

    pub fn as_num(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => Some(*v),
            Cell::Cat(_) => None,
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Cat(s) => f.write_str(s),
            Cell::Num(v) => write!(f, "{v}"),
        }
    }
}

pub type Row = Vec<Cell>;

/// Row-major table conforming to a [`Schema`].
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    schema: Schema,
    rows: Vec<Row>,
    missing: BTreeSet<(usize, usize)>,
    dropped_rows: usize,
}

impl Table {
    pub fn new(schema: Schema, rows: Vec<Row>) -> Result<Self, DatasetError> {
        for (r, row) in rows.iter().enumerate() {
            if row.len() != schema.len() {
                return Err(DatasetError::RaggedRow { row: r + 1, found: row.len(), expected: schema.len() });
            }
            for (c, cell) in row.iter().enumerate() {
                let ok = match (schema.kind(c), cell) {
                    (ColumnKind::Categorical, Cell::Cat(_)) => true,
                    (ColumnKind::Numerical, Cell::Num(v)) => v.is_finite(),
                    _ => false,
                };
                if !ok {
                    return Err(DatasetError::TypeParseFailure {
                        row: r + 1,
                        column: schema.name(c).to_string(),
                        value: cell.to_string(),
                    });
                }
            }
        }
        Ok(Table { schema, rows, missing: BTreeSet::new(), dropped_rows: 0 })
    }

    /// Marks `(row, column)` cells as missing at ingestion.
    pub fn with_missing(mut self, missing: impl IntoIterator<Item = (usize, usize)>) -> Self {
        self.missing.extend(missing);
        self
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn row(&self, index: usize) -> &Row {
        &self.rows[index]
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_missing(&self, row: usize, column: usize) -> bool {
        self.missing.contains(&(row, column))
    }

    pub fn missing_cells(&self) -> &BTreeSet<(usize, usize)> {
        &self.missing
    }

    /// Rows dropped at load time because a numerical cell was empty.
    pub fn dropped_rows(&self) -> usize {
        self.dropped_rows
    }

    /// Values of a numerical column.
    pub fn numeric_column(&self, column: usize) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r[column].as_num()).collect()
    }

    /// Copies the rows at `indices` (missing flags follow their rows).
    pub fn subset(&self, indices: &[usize]) -> Table {
        let rows = indices.iter().map(|&i| self.rows[i].clone()).collect();
        let mut missing = BTreeSet::new();
        for (new_i, &old_i) in indices.iter().enumerate() {
            for c in 0..self.schema.len() {
                if self.missing.contains(&(old_i, c)) {
                    missing.insert((new_i, c));
                }
            }
        }
        Table { schema: self.schema.clone(), rows, missing, dropped_rows: 0 }
    }

    /// Parses CSV text whose header matches `schema` in order.
    pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<Self, DatasetError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers()?.clone();
        for (i, col) in schema.columns().iter().enumerate() {
            if header.get(i).map(str::trim) != Some(col.name.as_str()) {
                return Err(DatasetError::MissingColumn(col.name.clone()));
            }
        }
        let mut rows = Vec::new();
        let mut missing = BTreeSet::new();
        let mut dropped = 0usize;
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let row_no = line + 1;
            if record.len() != schema.len() {
                return Err(DatasetError::RaggedRow { row: row_no, found: record.len(), expected: schema.len() });
            }
            let mut row = Vec::with_capacity(schema.len());
            let mut row_missing = Vec::new();
            let mut drop_row = false;
            for (c, field) in record.iter().enumerate() {
                let spec = schema.column(c);
                match spec.kind {
                    ColumnKind::Categorical => {
                        if field.is_empty() {
                            row_missing.push(c);
                            row.push(Cell::Cat(MISSING_CATEGORY.to_string()));
                        } else {
                            row.push(Cell::Cat(field.to_string()));
                        }
                    }
                    ColumnKind::Numerical => {
                        let trimmed = field.trim();
                        if trimmed.is_empty() {
                            drop_row = true;
                            row.push(Cell::Num(0.0));
                            continue;
                        }
                        match trimmed.parse::<f64>() {
                            Ok(v) if v.is_finite() => row.push(Cell::Num(v)),
                            _ => {
                                return Err(DatasetError::TypeParseFailure {
                                    row: row_no,
                                    column: spec.name.clone(),
                                    value: field.to_string(),
                                })
                            }
                        }
                    }
                }
            }
            if drop_row {
                dropped += 1;
                continue;
            }
            let r = rows.len();
            missing.extend(row_missing.into_iter().map(|c| (r, c)));
            rows.push(row);
        }
        if dropped > 0 {
            log::warn!("dropped {dropped} rows with missing numerical values");
        }
        if rows.is_empty() {
            return Err(DatasetError::EmptyTable);
        }
        Ok(Table { schema: schema.clone(), rows, missing, dropped_rows: dropped })
    }

    /// Writes the table as CSV with a header row. Missing categorical cells
    /// are written empty so a reload reproduces them.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DatasetError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(self.schema.columns().iter().map(|c| c.name.as_str()))?;
        let mut fields: Vec<String> = Vec::with_capacity(self.schema.len());
        for (r, row) in self.rows.iter().enumerate() {
            fields.clear();
            for (c, cell) in row.iter().enumerate() {
                if self.missing.contains(&(r, c)) {
                    fields.push(String::new());
                } else {
                    fields.push(cell.to_string());
                }
            }
            wtr.write_record(&fields)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Table, DatasetError> {
    let file = std::fs::File::open(path)?;
    Table::read_csv(std::io::BufReader::new(file), schema)
}

#[derive(Debug, Clone, Copy)]
pub struct InferOptions {
    pub distinct_threshold: usize,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions { distinct_threshold: DEFAULT_DISTINCT_THRESHOLD }
    }
}

/// Infers column kinds from the first `sample_rows` data rows.
pub fn infer_schema(path: impl AsRef<Path>, sample_rows: usize) -> Result<Schema, DatasetError> {
    let file = std::fs::File::open(path)?;
    infer_schema_from_reader(std::io::BufReader::new(file), sample_rows, InferOptions::default())
}

/// A column is numerical iff every sampled non-empty cell parses as a finite
/// real and its distinct-value count exceeds the threshold.
pub fn infer_schema_from_reader<R: Read>(
    reader: R,
    sample_rows: usize,
    options: InferOptions,
) -> Result<Schema, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut all_numeric = vec![true; header.len()];
    let mut distinct: Vec<HashSet<String>> = vec![HashSet::new(); header.len()];
    let mut seen_rows = 0usize;
    for record in rdr.records().take(sample_rows.max(1)) {
        let record = record?;
        seen_rows += 1;
        for (c, field) in record.iter().enumerate().take(header.len()) {
            if field.trim().is_empty() {
                continue;
            }
            if all_numeric[c] && !field.trim().parse::<f64>().map(f64::is_finite).unwrap_or(false) {
                all_numeric[c] = false;
            }
            if distinct[c].len() <= options.distinct_threshold {
                distinct[c].insert(field.to_string());
            }
        }
    }
    if seen_rows == 0 {
        return Err(DatasetError::EmptyTable);
    }
    Schema::new(header.into_iter().enumerate().map(|(c, name)| {
        let numeric = all_numeric[c] && distinct[c].len() > options.distinct_threshold;
        (name, if numeric { ColumnKind::Numerical } else { ColumnKind::Categorical })
    }))
}

/// Per categorical column, the fraction of rows taking each value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrataStats {
    columns: BTreeMap<usize, BTreeMap<String, f64>>,
}

impl StrataStats {
    pub fn column(&self, column: usize) -> Option<&BTreeMap<String, f64>> {
        self.columns.get(&column)
    }

    pub fn frequency(&self, column: usize, value: &str) -> Option<f64> {
        self.columns.get(&column)?.get(value).copied()
    }

    pub fn columns(&self) -> impl Iterator<Item = (usize, &BTreeMap<String, f64>)> {
        self.columns.iter().map(|(k, v)| (*k, v))
    }
}

pub fn compute_strata(table: &Table) -> Result<StrataStats, DatasetError> {
    if table.is_empty() {
        return Err(DatasetError::EmptyTable);
    }
    let n = table.row_count() as f64;
    let mut columns = BTreeMap::new();
    for c in table.schema().categorical_indices() {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for row in table.rows() {
            if let Cell::Cat(v) = &row[c] {
                *counts.entry(v.clone()).or_default() += 1;
            }
        }
        let freqs = counts.into_iter().map(|(v, k)| (v, k as f64 / n)).collect();
        columns.insert(c, freqs);
    }
    Ok(StrataStats { columns })
}

/// Seeded shuffle split into `(first, second)` with
/// `round(fraction * n)` rows in the first part.
pub fn train_test_split(table: &Table, fraction: f64, seed: u64) -> Result<(Table, Table), DatasetError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(fraction));
    }
    if table.is_empty() {
        return Err(DatasetError::EmptyTable);
    }
    let mut indices: Vec<usize> = (0..table.row_count()).collect();
    indices.shuffle(&mut rng::seeded(seed));
    let cut = (fraction * table.row_count() as f64).round() as usize;
    let (a, b) = indices.split_at(cut);
    Ok((table.subset(a), table.subset(b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_schema() -> Schema {
        Schema::new([
            ("browser", ColumnKind::Categorical),
            ("os", ColumnKind::Categorical),
            ("value", ColumnKind::Numerical),
        ])
        .unwrap()
    }

    #[test]
    fn load_small_csv() {
        let csv = "browser,os,value\nChrome,iOS,1.5\nSafari,Android,2\n";
        let t = Table::read_csv(csv.as_bytes(), &small_schema()).unwrap();
        assert_eq!(t.row_count(), 2);
        assert_eq!(t.row(1)[0], Cell::Cat("Safari".into()));
        assert_eq!(t.row(1)[2], Cell::Num(2.0));
    }

    #[test]
    fn parse_failure_reports_row_and_column() {
        let csv = "browser,os,value\na,b,1\na,b,2\na,b,3\na,b,4\na,b,abc\n";
        match Table::read_csv(csv.as_bytes(), &small_schema()) {
            Err(DatasetError::TypeParseFailure { row, column, .. }) => {
                assert_eq!(row, 5);
                assert_eq!(column, "value");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_mismatch_is_missing_column() {
        let csv = "browser,device,value\na,b,1\n";
        assert!(matches!(
            Table::read_csv(csv.as_bytes(), &small_schema()),
            Err(DatasetError::MissingColumn(c)) if c == "os"
        ));
    }

    #[test]
    fn empty_csv_is_empty_table() {
        let csv = "browser,os,value\n";
        assert!(matches!(Table::read_csv(csv.as_bytes(), &small_schema()), Err(DatasetError::EmptyTable)));
    }

    #[test]
    fn missing_cells() {
        let csv = "browser,os,value\n,iOS,1\nChrome,iOS,\nChrome,Android,3\n";
        let t = Table::read_csv(csv.as_bytes(), &small_schema()).unwrap();
        assert_eq!(t.row_count(), 2);
        assert_eq!(t.dropped_rows(), 1);
        assert_eq!(t.row(0)[0], Cell::Cat(MISSING_CATEGORY.into()));
        assert!(t.is_missing(0, 0));
        assert!(!t.is_missing(1, 0));
    }

    #[test]
    fn infer_kinds() {
        let mut csv = String::from("num,os,month\n");
        for i in 1..=100 {
            let os = if i % 2 == 0 { "iOS" } else { "Android" };
            csv.push_str(&format!("{i},{os},{}\n", (i % 12) + 1));
        }
        let s = infer_schema_from_reader(csv.as_bytes(), 1000, InferOptions::default()).unwrap();
        assert_eq!(s.kind(0), ColumnKind::Numerical);
        assert_eq!(s.kind(1), ColumnKind::Categorical);
        // 12 distinct integers do not exceed the threshold of 20.
        assert_eq!(s.kind(2), ColumnKind::Categorical);
    }

    #[test]
    fn strata_counts() {
        let schema = Schema::new([("c", ColumnKind::Categorical)]).unwrap();
        let mut rows = vec![vec![Cell::Cat("A".into())]; 9];
        rows.push(vec![Cell::Cat("B".into())]);
        let t = Table::new(schema.clone(), rows).unwrap();
        let s = compute_strata(&t).unwrap();
        assert!((s.frequency(0, "A").unwrap() - 0.9).abs() < 1e-12);
        assert!((s.frequency(0, "B").unwrap() - 0.1).abs() < 1e-12);

        let single = Table::new(schema, vec![vec![Cell::Cat("v".into())]; 3]).unwrap();
        assert_eq!(compute_strata(&single).unwrap().frequency(0, "v"), Some(1.0));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let schema = Schema::new([("id", ColumnKind::Numerical)]).unwrap();
        let rows = (0..100).map(|i| vec![Cell::Num(i as f64)]).collect();
        let t = Table::new(schema, rows).unwrap();
        let (a, b) = train_test_split(&t, 0.8, 7).unwrap();
        assert_eq!((a.row_count(), b.row_count()), (80, 20));
        let (a2, b2) = train_test_split(&t, 0.8, 7).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
        let mut ids: Vec<f64> = a.rows().iter().chain(b.rows()).map(|r| r[0].as_num().unwrap()).collect();
        ids.sort_by(f64::total_cmp);
        assert_eq!(ids, (0..100).map(|i| i as f64).collect::<Vec<_>>());
        assert!(matches!(train_test_split(&t, 1.0, 7), Err(DatasetError::InvalidFraction(_))));
    }

    #[test]
    fn schema_file_round_trip() {
        let s = small_schema();
        let text = s.to_toml();
        assert_eq!(Schema::from_toml(&text).unwrap(), s);
        assert!(Schema::new([("a", ColumnKind::Numerical), ("a", ColumnKind::Numerical)]).is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip_and_strata_invariants(
            rows in prop::collection::vec(("[a-c]{1,2}|<NA>|x,y|q\"", -1e6f64..1e6), 1..40),
            seed in any::<u64>(),
        ) {
            let schema = Schema::new([("c", ColumnKind::Categorical), ("n", ColumnKind::Numerical)]).unwrap();
            let rows: Vec<Row> = rows.into_iter().map(|(c, n)| vec![Cell::Cat(c), Cell::Num(n)]).collect();
            let t = Table::new(schema.clone(), rows).unwrap();
            let mut buf = Vec::new();
            t.write_csv(&mut buf).unwrap();
            let back = Table::read_csv(buf.as_slice(), &schema).unwrap();
            prop_assert_eq!(back.rows(), t.rows());

            let s = compute_strata(&t).unwrap();
            let total: f64 = s.column(0).unwrap().values().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);

            let mut idx: Vec<usize> = (0..t.row_count()).collect();
            idx.shuffle(&mut rng::seeded(seed));
            let shuffled = compute_strata(&t.subset(&idx)).unwrap();
            for (v, f) in s.column(0).unwrap() {
                prop_assert!((shuffled.frequency(0, v).unwrap() - f).abs() < 1e-12);
            }
        }
    }
}
