//! Row vectorization. Categorical columns are label encoded against sorted
//! dictionaries and one-hot expanded; numerical columns go through KDE mode
//! detection, a small Gaussian mixture fit, and are stored as
//! `(mode one-hot, standardized residual)`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Cell, ColumnKind, Row, Schema, Table};

pub const MAX_MODES: usize = 3;
pub const KDE_GRID_POINTS: usize = 512;
pub const EM_MAX_ITERATIONS: usize = 1000;
pub const EM_TOLERANCE: f64 = 1e-6;
pub const SIGMA_FLOOR: f64 = 1e-6;
pub const RESIDUAL_CLIP: f64 = 4.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("cannot fit a transformer on an empty table")]
    EmptyTable,
    #[error("column has no values")]
    EmptyColumn,
    #[error("mixture fit failed: every component collapsed")]
    SingularComponent,
    #[error("value {value:?} is not in the dictionary of column {column:?}")]
    UnknownCategory { value: String, column: String },
    #[error("row does not match the schema: {0}")]
    RowShape(String),
    #[error("encoded vector has width {found}, expected {expected}")]
    WidthMismatch { found: usize, expected: usize },
}

/// Sorted distinct values of one categorical column. Labels are positions in
/// byte-wise sort order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct CategoryDictionary {
    values: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for CategoryDictionary {
    fn from(mut values: Vec<String>) -> Self {
        values.sort();
        values.dedup();
        let index = values.iter().enumerate().map(|(i, v)| (v.clone(), i as u32)).collect();
        CategoryDictionary { values, index }
    }
}

impl From<CategoryDictionary> for Vec<String> {
    fn from(d: CategoryDictionary) -> Self {
        d.values
    }
}

impl CategoryDictionary {
    pub fn from_values<'a>(values: impl IntoIterator<Item = &'a str>) -> Self {
        CategoryDictionary::from(values.into_iter().map(str::to_owned).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn label(&self, value: &str) -> Option<u32> {
        self.index.get(value).copied()
    }

    pub fn value(&self, label: u32) -> Option<&str> {
        self.values.get(label as usize).map(String::as_str)
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }
}

/// Dictionaries for every categorical column, keyed by schema position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelEncoder {
    pub dictionaries: BTreeMap<usize, CategoryDictionary>,
}

impl LabelEncoder {
    pub fn dictionary(&self, column: usize) -> Option<&CategoryDictionary> {
        self.dictionaries.get(&column)
    }
}

pub fn fit_label_encoders(table: &Table) -> Result<LabelEncoder, TransformError> {
    if table.is_empty() {
        return Err(TransformError::EmptyTable);
    }
    let dictionaries = table
        .schema()
        .categorical_indices()
        .into_iter()
        .map(|c| (c, CategoryDictionary::from_values(table.rows().iter().filter_map(|r| r[c].as_cat()))))
        .collect();
    Ok(LabelEncoder { dictionaries })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeDetection {
    pub centers: Vec<f64>,
    /// All values were identical; a single mode was assumed.
    pub degenerate: bool,
}

impl ModeDetection {
    pub fn mode_count(&self) -> usize {
        self.centers.len()
    }
}

fn mean_and_std(values: &[f64], ddof: f64) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    let denom = (n - ddof).max(1.0);
    (mean, (ss / denom).sqrt())
}

/// Gaussian KDE with Scott's bandwidth evaluated on a uniform grid; returns
/// `(grid, density)`.
pub fn kde_grid(values: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let (_, sd) = mean_and_std(values, 1.0);
    let h = sd * (n as f64).powf(-0.2);
    if h <= 0.0 || !h.is_finite() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = sorted[0] - h;
    let hi = sorted[n - 1] + h;
    let step = (hi - lo) / (KDE_GRID_POINTS - 1) as f64;
    let cutoff = 8.0 * h;
    let norm = 1.0 / (n as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let mut grid = Vec::with_capacity(KDE_GRID_POINTS);
    let mut density = Vec::with_capacity(KDE_GRID_POINTS);
    for i in 0..KDE_GRID_POINTS {
        let g = lo + step * i as f64;
        let start = sorted.partition_point(|v| *v < g - cutoff);
        let end = sorted.partition_point(|v| *v <= g + cutoff);
        let sum: f64 = sorted[start..end].iter().map(|v| (-0.5 * ((g - v) / h).powi(2)).exp()).sum();
        grid.push(g);
        density.push(sum * norm);
    }
    Some((grid, density))
}

/// Finds density modes of a numerical column: local maxima of the KDE,
/// keeping at most [`MAX_MODES`] of the highest, sorted ascending.
pub fn detect_modes(values: &[f64]) -> Result<ModeDetection, TransformError> {
    if values.is_empty() {
        return Err(TransformError::EmptyColumn);
    }
    let Some((grid, density)) = kde_grid(values) else {
        return Ok(ModeDetection { centers: vec![values[0]], degenerate: true });
    };
    let mut peaks: Vec<(f64, f64)> = (1..grid.len() - 1)
        .filter(|&i| density[i] > density[i - 1] && density[i] > density[i + 1])
        .map(|i| (grid[i], density[i]))
        .collect();
    if peaks.is_empty() {
        let best = crate::neural::argmax(&density);
        peaks.push((grid[best], density[best]));
    }
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1));
    peaks.truncate(MAX_MODES);
    let mut centers: Vec<f64> = peaks.into_iter().map(|p| p.0).collect();
    centers.sort_by(f64::total_cmp);
    Ok(ModeDetection { centers, degenerate: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

/// Per-column Gaussian mixture used for mode-specific normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeNormalizer {
    pub modes: Vec<Mode>,
}

/// Result of a mixture fit together with its per-iteration mean
/// log-likelihood trace.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub normalizer: ModeNormalizer,
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub reseeded: bool,
}

fn log_normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * z * z - std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl ModeNormalizer {
    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    fn log_joint(&self, value: f64, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.modes.iter().map(|m| m.weight.ln() + log_normal_pdf(value, m.mean, m.std)));
    }

    /// Hard mode assignment by maximum responsibility, then a clipped
    /// standardized residual.
    pub fn normalize(&self, value: f64) -> (usize, f64) {
        let mut scratch = Vec::with_capacity(self.modes.len());
        self.log_joint(value, &mut scratch);
        let mode = crate::neural::argmax(&scratch);
        (mode, self.residual(mode, value))
    }

    pub fn residual(&self, mode: usize, value: f64) -> f64 {
        let m = self.modes[mode];
        ((value - m.mean) / m.std).clamp(-RESIDUAL_CLIP, RESIDUAL_CLIP)
    }

    pub fn denormalize(&self, mode: usize, residual: f64) -> f64 {
        let m = self.modes[mode];
        m.mean + m.std * residual
    }

    pub fn mean_log_likelihood(&self, values: &[f64]) -> f64 {
        let mut scratch = Vec::with_capacity(self.modes.len());
        values
            .iter()
            .map(|v| {
                self.log_joint(*v, &mut scratch);
                log_sum_exp(&scratch)
            })
            .sum::<f64>()
            / values.len() as f64
    }
}

/// Fits a Gaussian mixture by EM starting from `centers`. With a single
/// center the fit is the closed-form sample mean and population std.
pub fn fit_mode_normalizer(values: &[f64], centers: &[f64]) -> Result<EmFit, TransformError> {
    if values.is_empty() {
        return Err(TransformError::EmptyColumn);
    }
    let (mean, sd) = mean_and_std(values, 0.0);
    if centers.len() <= 1 {
        let normalizer = ModeNormalizer { modes: vec![Mode { weight: 1.0, mean, std: sd.max(SIGMA_FLOOR) }] };
        let ll = normalizer.mean_log_likelihood(values);
        return Ok(EmFit { normalizer, log_likelihood: vec![ll], iterations: 0, reseeded: false });
    }
    let k = centers.len();
    let init_std = (sd / k as f64).max(SIGMA_FLOOR);
    let mut modes: Vec<Mode> =
        centers.iter().map(|c| Mode { weight: 1.0 / k as f64, mean: *c, std: init_std }).collect();
    let n = values.len();
    let mut resp = vec![0.0; n * k];
    let mut trace = Vec::new();
    let mut reseeded = false;
    let mut iterations = 0;
    let mut scratch = Vec::with_capacity(k);
    while iterations < EM_MAX_ITERATIONS {
        iterations += 1;
        let k = modes.len();
        resp.resize(n * k, 0.0);
        // E step.
        let current = ModeNormalizer { modes: modes.clone() };
        let mut total_ll = 0.0;
        let mut worst = (f64::INFINITY, 0usize);
        for (i, v) in values.iter().enumerate() {
            current.log_joint(*v, &mut scratch);
            let lse = log_sum_exp(&scratch);
            total_ll += lse;
            if lse < worst.0 {
                worst = (lse, i);
            }
            for j in 0..k {
                resp[i * k + j] = (scratch[j] - lse).exp();
            }
        }
        trace.push(total_ll / n as f64);
        // M step.
        let mut next = Vec::with_capacity(k);
        let mut empty = Vec::new();
        for j in 0..k {
            let nj: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            if nj < 1e-8 * n as f64 {
                empty.push(j);
                next.push(modes[j]);
                continue;
            }
            let mu = (0..n).map(|i| resp[i * k + j] * values[i]).sum::<f64>() / nj;
            let var = (0..n).map(|i| resp[i * k + j] * (values[i] - mu).powi(2)).sum::<f64>() / nj;
            next.push(Mode { weight: nj / n as f64, mean: mu, std: var.sqrt().max(SIGMA_FLOOR) });
        }
        if !empty.is_empty() {
            if !reseeded {
                // Restart an abandoned component at the worst-explained point.
                reseeded = true;
                for &j in &empty {
                    next[j] = Mode { weight: 1.0 / k as f64, mean: values[worst.1], std: init_std };
                }
            } else {
                let mut j = 0;
                next.retain(|_| {
                    let keep = !empty.contains(&j);
                    j += 1;
                    keep
                });
            }
            let total: f64 = next.iter().map(|m| m.weight).sum();
            next.iter_mut().for_each(|m| m.weight /= total);
            if next.is_empty() {
                return Err(TransformError::SingularComponent);
            }
            modes = next;
            continue;
        }
        modes = next;
        if trace.len() >= 2 {
            let delta = trace[trace.len() - 1] - trace[trace.len() - 2];
            if delta.abs() < EM_TOLERANCE {
                break;
            }
        }
    }
    let normalizer = ModeNormalizer { modes };
    trace.push(normalizer.mean_log_likelihood(values));
    Ok(EmFit { normalizer, log_likelihood: trace, iterations, reseeded })
}

/// Detects modes and fits the mixture for one column.
pub fn fit_column(values: &[f64]) -> Result<ModeNormalizer, TransformError> {
    let detection = detect_modes(values)?;
    Ok(fit_mode_normalizer(values, &detection.centers)?.normalizer)
}

/// Where each column lives inside the encoded vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Block {
    Categorical { column: usize, offset: usize, width: usize },
    Numerical { column: usize, offset: usize, modes: usize },
}

impl Block {
    pub fn column(&self) -> usize {
        match self {
            Block::Categorical { column, .. } | Block::Numerical { column, .. } => *column,
        }
    }

    pub fn offset(&self) -> usize {
        match self {
            Block::Categorical { offset, .. } | Block::Numerical { offset, .. } => *offset,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Block::Categorical { width, .. } => *width,
            Block::Numerical { modes, .. } => modes + 1,
        }
    }

    /// Index of the residual scalar for numerical blocks.
    pub fn residual_index(&self) -> Option<usize> {
        match self {
            Block::Numerical { offset, modes, .. } => Some(offset + modes),
            Block::Categorical { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingLayout {
    pub blocks: Vec<Block>,
    pub width: usize,
}

impl EncodingLayout {
    pub fn block(&self, column: usize) -> &Block {
        &self.blocks[column]
    }
}

/// Fitted per-column transforms for a schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transformer {
    pub schema: Schema,
    pub encoder: LabelEncoder,
    pub normalizers: BTreeMap<usize, ModeNormalizer>,
    pub layout: EncodingLayout,
}

impl Transformer {
    pub fn fit(table: &Table) -> Result<Self, TransformError> {
        let encoder = fit_label_encoders(table)?;
        let mut normalizers = BTreeMap::new();
        for c in table.schema().numerical_indices() {
            normalizers.insert(c, fit_column(&table.numeric_column(c))?);
        }
        Ok(Transformer::from_parts(table.schema().clone(), encoder, normalizers))
    }

    pub fn from_parts(schema: Schema, encoder: LabelEncoder, normalizers: BTreeMap<usize, ModeNormalizer>) -> Self {
        let mut blocks = Vec::with_capacity(schema.len());
        let mut offset = 0;
        for (c, spec) in schema.columns().iter().enumerate() {
            let block = match spec.kind {
                ColumnKind::Categorical => {
                    Block::Categorical { column: c, offset, width: encoder.dictionaries[&c].len() }
                }
                ColumnKind::Numerical => Block::Numerical { column: c, offset, modes: normalizers[&c].mode_count() },
            };
            offset += block.width();
            blocks.push(block);
        }
        Transformer { schema, encoder, normalizers, layout: EncodingLayout { blocks, width: offset } }
    }

    pub fn width(&self) -> usize {
        self.layout.width
    }

    pub fn dictionary(&self, column: usize) -> Option<&CategoryDictionary> {
        self.encoder.dictionary(column)
    }

    pub fn normalizer(&self, column: usize) -> Option<&ModeNormalizer> {
        self.normalizers.get(&column)
    }

    pub fn label(&self, column: usize, value: &str) -> Result<u32, TransformError> {
        self.dictionary(column).and_then(|d| d.label(value)).ok_or_else(|| TransformError::UnknownCategory {
            value: value.to_owned(),
            column: self.schema.name(column).to_owned(),
        })
    }

    /// Writes the encoding of `row` into `out` (length `width()`).
    pub fn encode_into(&self, row: &[Cell], out: &mut [f64]) -> Result<(), TransformError> {
        if row.len() != self.schema.len() {
            return Err(TransformError::RowShape(format!("{} cells for {} columns", row.len(), self.schema.len())));
        }
        if out.len() != self.width() {
            return Err(TransformError::WidthMismatch { found: out.len(), expected: self.width() });
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        for (block, cell) in self.layout.blocks.iter().zip(row) {
            match (block, cell) {
                (Block::Categorical { column, offset, .. }, Cell::Cat(v)) => {
                    out[offset + self.label(*column, v)? as usize] = 1.0;
                }
                (Block::Numerical { column, offset, modes }, Cell::Num(v)) => {
                    let (mode, residual) = self.normalizers[column].normalize(*v);
                    out[offset + mode] = 1.0;
                    out[offset + modes] = residual;
                }
                _ => {
                    return Err(TransformError::RowShape(format!(
                        "cell type does not match column {:?}",
                        self.schema.name(block.column())
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn encode_row(&self, row: &[Cell]) -> Result<Vec<f64>, TransformError> {
        let mut out = vec![0.0; self.width()];
        self.encode_into(row, &mut out)?;
        Ok(out)
    }

    /// Encodes every row into a row-major `n × width` buffer.
    pub fn encode_table(&self, table: &Table) -> Result<Vec<f64>, TransformError> {
        let w = self.width();
        let mut out = vec![0.0; table.row_count() * w];
        for (row, chunk) in table.rows().iter().zip(out.chunks_mut(w)) {
            self.encode_into(row, chunk)?;
        }
        Ok(out)
    }

    /// Decodes an encoded vector (or network output of the same layout):
    /// argmax over every one-hot block, residual taken as-is.
    pub fn decode_row(&self, encoded: &[f64]) -> Result<Row, TransformError> {
        if encoded.len() != self.width() {
            return Err(TransformError::WidthMismatch { found: encoded.len(), expected: self.width() });
        }
        Ok(self
            .layout
            .blocks
            .iter()
            .map(|block| match block {
                Block::Categorical { column, offset, width } => {
                    let label = crate::neural::argmax(&encoded[*offset..offset + width]);
                    Cell::Cat(self.encoder.dictionaries[column].values()[label].clone())
                }
                Block::Numerical { column, offset, modes } => {
                    let mode = crate::neural::argmax(&encoded[*offset..offset + modes]);
                    Cell::Num(self.normalizers[column].denormalize(mode, encoded[offset + modes]))
                }
            })
            .collect())
    }

    /// Expands a per-column mask to the encoded width.
    pub fn expand_mask(&self, column_mask: &[u8], out: &mut [f64]) {
        for (block, m) in self.layout.blocks.iter().zip(column_mask) {
            let start = block.offset();
            out[start..start + block.width()].iter_mut().for_each(|v| *v = f64::from(*m));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand_distr::{Distribution, Normal};

    fn normal_sample(mean: f64, sd: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        let d = Normal::new(mean, sd).unwrap();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    #[test]
    fn dictionary_uses_byte_order() {
        let d = CategoryDictionary::from_values(["iOS", "Safari", "Chrome"]);
        let mut oracle = ["iOS".as_bytes(), "Safari".as_bytes(), "Chrome".as_bytes()];
        oracle.sort();
        for (i, v) in oracle.iter().enumerate() {
            assert_eq!(d.label(std::str::from_utf8(v).unwrap()), Some(i as u32));
        }
        assert_eq!(d.label("Chrome"), Some(0));
        assert_eq!(d.label("Safari"), Some(1));
        assert_eq!(d.label("iOS"), Some(2));
        let single = CategoryDictionary::from_values(["X"]);
        assert_eq!(single.len(), 1);
        assert_eq!(single.value(0), Some("X"));
    }

    #[test]
    fn dictionary_serde_round_trip() {
        let d = CategoryDictionary::from_values(["b", "a", "c"]);
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(json, r#"["a","b","c"]"#);
        let back: CategoryDictionary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn unimodal_sample_has_one_mode() {
        let det = detect_modes(&normal_sample(0.0, 1.0, 5000, 1)).unwrap();
        assert_eq!(det.mode_count(), 1);
        assert!(!det.degenerate);
    }

    #[test]
    fn bimodal_sample_has_two_modes() {
        let mut v = normal_sample(-10.0, 1.0, 2500, 2);
        v.extend(normal_sample(10.0, 1.0, 2500, 3));
        let det = detect_modes(&v).unwrap();
        assert_eq!(det.mode_count(), 2);
        assert!((det.centers[0] + 10.0).abs() < 0.5);
        assert!((det.centers[1] - 10.0).abs() < 0.5);
    }

    #[test]
    fn constant_column_is_degenerate() {
        let det = detect_modes(&[4.0; 20]).unwrap();
        assert!(det.degenerate);
        assert_eq!(det.centers, vec![4.0]);
        let norm = fit_column(&[4.0; 20]).unwrap();
        assert_eq!(norm.normalize(4.0), (0, 0.0));
    }

    #[test]
    fn single_mode_fit_is_closed_form() {
        let v = normal_sample(10.0, 2.0, 10_000, 4);
        let fit = fit_mode_normalizer(&v, &[10.0]).unwrap();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert_eq!(fit.normalizer.modes[0].mean, mean);
        assert_eq!(fit.normalizer.modes[0].std, std);
        assert!((mean - 10.0).abs() < 0.1 && (std - 2.0).abs() < 0.1);
    }

    #[test]
    fn two_cluster_em() {
        let mut v = vec![0.0; 100];
        v.extend(vec![100.0; 100]);
        let fit = fit_mode_normalizer(&v, &[10.0, 90.0]).unwrap();
        let m = &fit.normalizer.modes;
        assert_eq!(m.len(), 2);
        assert!(m[0].mean.abs() < 1e-6 && (m[1].mean - 100.0).abs() < 1e-6);
        assert!((m[0].weight - 0.5).abs() < 1e-6 && (m[1].weight - 0.5).abs() < 1e-6);
        assert!(m.iter().all(|mode| mode.std >= SIGMA_FLOOR));
    }

    #[test]
    fn em_log_likelihood_is_monotone() {
        let mut v = normal_sample(0.0, 1.0, 3000, 5);
        v.extend(normal_sample(4.0, 0.7, 1500, 6));
        v.extend(normal_sample(9.0, 1.5, 1000, 7));
        let fit = fit_mode_normalizer(&v, &[-1.0, 3.0, 8.0]).unwrap();
        assert!(!fit.reseeded);
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{} then {}", w[0], w[1]);
        }
        let total: f64 = fit.normalizer.modes.iter().map(|m| m.weight).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalize_examples() {
        let one = ModeNormalizer { modes: vec![Mode { weight: 1.0, mean: 10.0, std: 2.0 }] };
        assert_eq!(one.normalize(14.0), (0, 2.0));
        assert_eq!(one.normalize(10.0), (0, 0.0));
        assert_eq!(one.normalize(1000.0), (0, RESIDUAL_CLIP));
        let two = ModeNormalizer {
            modes: vec![Mode { weight: 0.5, mean: -10.0, std: 1.0 }, Mode { weight: 0.5, mean: 10.0, std: 1.0 }],
        };
        assert_eq!(two.normalize(10.0), (1, 0.0));
        assert_eq!(two.denormalize(1, 0.5), 10.5);
    }

    #[test]
    fn residuals_are_roughly_standardized() {
        let mut v = normal_sample(-5.0, 1.0, 4000, 8);
        v.extend(normal_sample(5.0, 2.0, 4000, 9));
        let norm = fit_column(&v).unwrap();
        let mut per_mode: Vec<Vec<f64>> = vec![Vec::new(); norm.mode_count()];
        for x in &v {
            let (m, r) = norm.normalize(*x);
            per_mode[m].push(r);
        }
        for rs in per_mode.iter().filter(|r| r.len() > 100) {
            let (mean, sd) = mean_and_std(rs, 0.0);
            assert!(mean.abs() < 0.1, "residual mean {mean}");
            assert!((0.5..=1.5).contains(&sd), "residual std {sd}");
        }
    }
}
