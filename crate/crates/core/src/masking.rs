//! Training masks. A mask entry of 1 marks a cell as unobserved (to be
//! generated), 0 as observed (a condition).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample_weighted;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ColumnKind, Schema, StrataStats, Table};

pub const DEFAULT_MASK_FACTOR: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("masking factor {0} is outside [0, 1]")]
    InvalidFactor(f64),
    #[error("value {value:?} of column {column:?} has no strata entry")]
    UnknownCategory { column: String, value: String },
    #[error("stratified masking needs strata statistics")]
    MissingStrata,
    #[error("column {0:?} is not categorical and cannot carry an equality condition")]
    NotCategorical(String),
    #[error("unknown mask kind {0:?}; expected stratified, random or none")]
    UnknownKind(String),
}

/// Binary `rows × cols` matrix, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mask { rows, cols, data: vec![0; rows * cols] }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Mask { rows, cols, data: vec![1; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[u8] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column_sum(&self, c: usize) -> usize {
        (0..self.rows).map(|r| self.get(r, c) as usize).sum()
    }

    pub fn total(&self) -> usize {
        self.data.iter().map(|v| *v as usize).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Stratified,
    Random,
    None,
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskKind::Stratified => "stratified",
            MaskKind::Random => "random",
            MaskKind::None => "none",
        })
    }
}

impl FromStr for MaskKind {
    type Err = MaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "stratified" => Ok(MaskKind::Stratified),
            "random" => Ok(MaskKind::Random),
            "none" => Ok(MaskKind::None),
            _ => Err(MaskError::UnknownKind(s.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub kind: MaskKind,
    pub factor: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy { kind: MaskKind::Stratified, factor: DEFAULT_MASK_FACTOR }
    }
}

impl MaskPolicy {
    pub fn new(kind: MaskKind, factor: f64) -> Result<Self, MaskError> {
        check_factor(factor)?;
        Ok(MaskPolicy { kind, factor })
    }

    /// Builds the mask for the batch made of `rows` (indices into `table`).
    pub fn mask<R: Rng + ?Sized>(
        &self,
        table: &Table,
        rows: &[usize],
        strata: Option<&StrataStats>,
        rng: &mut R,
    ) -> Result<Mask, MaskError> {
        match self.kind {
            MaskKind::Stratified => {
                stratified_mask(table, rows, self.factor, strata.ok_or(MaskError::MissingStrata)?, rng)
            }
            MaskKind::Random => random_mask(rows.len(), table.schema().len(), self.factor, rng),
            MaskKind::None => Ok(no_mask(table, rows)),
        }
    }
}

fn check_factor(r: f64) -> Result<(), MaskError> {
    if (0.0..=1.0).contains(&r) {
        Ok(())
    } else {
        Err(MaskError::InvalidFactor(r))
    }
}

/// Stratified masking: numerical columns are always masked; in every
/// categorical column exactly `floor(r * b)` distinct rows are masked, drawn
/// by successive weighted draws without replacement where a row's weight is
/// the global frequency of its value in that column.
pub fn stratified_mask<R: Rng + ?Sized>(
    table: &Table,
    rows: &[usize],
    r: f64,
    strata: &StrataStats,
    rng: &mut R,
) -> Result<Mask, MaskError> {
    check_factor(r)?;
    let schema = table.schema();
    let b = rows.len();
    let amount = (r * b as f64).floor() as usize;
    let mut mask = Mask::zeros(b, schema.len());
    let mut weights = vec![0.0; b];
    for (c, spec) in schema.columns().iter().enumerate() {
        if spec.kind == ColumnKind::Numerical {
            (0..b).for_each(|i| mask.set(i, c, 1));
            continue;
        }
        let freq = strata.column(c).ok_or(MaskError::MissingStrata)?;
        for (w, &row) in weights.iter_mut().zip(rows) {
            let value = table.row(row)[c].as_cat().unwrap_or_default();
            *w = *freq.get(value).ok_or_else(|| MaskError::UnknownCategory {
                column: spec.name.clone(),
                value: value.to_owned(),
            })?;
        }
        for i in weighted_without_replacement(&weights, amount, rng) {
            mask.set(i, c, 1);
        }
    }
    Ok(mask)
}

/// Draws `amount` distinct indices; each draw picks index `i` with
/// probability proportional to `weights[i]` among the not-yet-chosen ones.
pub fn weighted_without_replacement<R: Rng + ?Sized>(weights: &[f64], amount: usize, rng: &mut R) -> Vec<usize> {
    let amount = amount.min(weights.len());
    if amount == 0 {
        return Vec::new();
    }
    match sample_weighted(rng, weights.len(), |i| weights[i], amount) {
        Ok(idx) => idx.into_vec(),
        Err(_) => Vec::new(),
    }
}

/// Masks each cell independently with probability `rate`.
pub fn random_mask<R: Rng + ?Sized>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Result<Mask, MaskError> {
    check_factor(rate)?;
    let data = (0..rows * cols).map(|_| u8::from(rng.random_bool(rate))).collect();
    Ok(Mask { rows, cols, data })
}

/// Masks only the cells flagged missing at ingestion.
pub fn no_mask(table: &Table, rows: &[usize]) -> Mask {
    let mut mask = Mask::zeros(rows.len(), table.schema().len());
    for (i, &row) in rows.iter().enumerate() {
        for c in 0..table.schema().len() {
            if table.is_missing(row, c) {
                mask.set(i, c, 1);
            }
        }
    }
    mask
}

/// Runtime mask: 0 on columns carrying an equality condition, 1 elsewhere.
pub fn query_mask(schema: &Schema, conditioned: &BTreeSet<usize>) -> Result<Vec<u8>, MaskError> {
    for &c in conditioned {
        if schema.kind(c) != ColumnKind::Categorical {
            return Err(MaskError::NotCategorical(schema.name(c).to_owned()));
        }
    }
    Ok((0..schema.len()).map(|c| u8::from(!conditioned.contains(&c))).collect())
}
