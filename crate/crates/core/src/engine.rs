//! Query execution over a trained model bundle, plus the bundle file format.
//!
//! Per conjunctive term: AVG generates `n` rows conditioned on the term's
//! equalities and averages the target over rows that satisfy the whole term;
//! COUNT is `selectivity × |T|` (with residual ranges, scaled by the fraction
//! of generated equality-matching rows that also pass the ranges); SUM is
//! AVG × COUNT. Terms are then recombined by the plan's rule.
//!
//! File layout (little-endian):
//!
//! ```text
//! "ELCT" | u32 version | [u8; 32] schema fingerprint | u32 section count
//! per section: [u8; 4] tag | u64 length | [u8; 32] SHA-256 of payload | payload
//! ```
//!
//! Sections: `TRNS` (JSON metadata: schema, transformer, |T|, discretizers,
//! configs), `CVAE` (encoder, prior, decoder networks), `ARMD` (selectivity
//! model, absent when there are no categorical columns).

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cvae::{CvaeConfig, CvaeError, CvaeModel, Decoding, TrainTrace};
use crate::dataset::{Row, Schema, Table};
use crate::masking::MaskPolicy;
use crate::neural::{ByteReader, DenseNet};
use crate::planner::{discretize_table, plan, CombineRule, Discretizer, PlanContext, PlanError, QueryPlan, Term};
use crate::selectivity::{train_ar, ArConfig, ArModel, ArTrainReport, SelectivityError, SelectivityEstimate};
use crate::sqlfront::{parse, to_dnf, Aggregate, OrderKey, SqlError, DEFAULT_DNF_CAP};
use crate::transform::{LabelEncoder, TransformError, Transformer};

pub const MAGIC: &[u8; 4] = b"ELCT";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_SAMPLES: usize = 1000;
pub const MIN_SURVIVORS: usize = 30;
pub const REGENERATE_FACTOR: usize = 4;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Sql(#[from] SqlError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Cvae(#[from] CvaeError),
    #[error(transparent)]
    Selectivity(#[from] SelectivityError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error("model file version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt model file: {0}")]
    CorruptFile(String),
    #[error("query could not be answered: no generated rows survived its filters")]
    UnansweredQuery,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl EngineError {
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            EngineError::Sql(_)
                | EngineError::Plan(_)
                | EngineError::VersionMismatch { .. }
                | EngineError::CorruptFile(_)
                | EngineError::SchemaMismatch(_)
                | EngineError::Io(_)
                | EngineError::Cvae(CvaeError::InvalidConfig(_))
                | EngineError::Selectivity(SelectivityError::InvalidConfig(_))
        )
    }
}

/// What the executor needs from a model (or from an exact oracle).
pub trait AqpBackend: Sync {
    fn schema(&self) -> &Schema;
    fn encoder(&self) -> &LabelEncoder;
    fn discretizers(&self) -> &[Discretizer] {
        &[]
    }
    fn row_count(&self) -> usize;
    /// Rows conditioned on categorical equalities. Implementations may emit
    /// rows that violate the conditions.
    fn generate(&self, conditions: &[(usize, String)], n: usize, rng: &mut dyn RngCore) -> Result<Vec<Row>, EngineError>;
    fn selectivity(&self, conditions: &[(usize, String)], rng: &mut dyn RngCore) -> Result<SelectivityEstimate, EngineError>;

    fn in_vocabulary(&self, conditions: &[(usize, String)]) -> bool {
        conditions.iter().all(|(c, v)| self.encoder().dictionary(*c).is_some_and(|d| d.label(v).is_some()))
    }
}

/// Backend answering from the raw table: generation returns every matching
/// row, selectivity is the exact fraction. Used to test the planner and
/// executor independently of model quality.
pub struct ExactBackend {
    table: Table,
    encoder: LabelEncoder,
}

impl ExactBackend {
    pub fn new(table: Table) -> Result<Self, EngineError> {
        let encoder = crate::transform::fit_label_encoders(&table)?;
        Ok(ExactBackend { table, encoder })
    }

    pub fn table(&self) -> &Table {
        &self.table
    }
}

fn matches_conditions(row: &[crate::dataset::Cell], conditions: &[(usize, String)]) -> bool {
    conditions.iter().all(|(c, v)| row[*c].as_cat() == Some(v.as_str()))
}

impl AqpBackend for ExactBackend {
    fn schema(&self) -> &Schema {
        self.table.schema()
    }

    fn encoder(&self) -> &LabelEncoder {
        &self.encoder
    }

    fn row_count(&self) -> usize {
        self.table.row_count()
    }

    fn generate(&self, conditions: &[(usize, String)], _n: usize, _rng: &mut dyn RngCore) -> Result<Vec<Row>, EngineError> {
        Ok(self.table.rows().iter().filter(|r| matches_conditions(r, conditions)).cloned().collect())
    }

    fn selectivity(&self, conditions: &[(usize, String)], _rng: &mut dyn RngCore) -> Result<SelectivityEstimate, EngineError> {
        let hits = self.table.rows().iter().filter(|r| matches_conditions(r, conditions)).count();
        Ok(SelectivityEstimate {
            estimate: hits as f64 / self.table.row_count() as f64,
            walks: 0,
            std_error: 0.0,
            not_in_vocabulary: !self.in_vocabulary(conditions),
        })
    }
}

/// Everything persisted for one trained table.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub cvae: CvaeModel,
    pub ar: Option<ArModel>,
    pub meta: BundleMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub row_count: usize,
    pub discretizers: Vec<Discretizer>,
    pub mask: MaskPolicy,
    pub cvae: CvaeConfig,
    pub selest: ArConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct TransformSection {
    transformer: Transformer,
    meta: BundleMeta,
}

/// Training options for a full bundle.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub cvae: CvaeConfig,
    pub selest: ArConfig,
    pub mask: MaskPolicy,
    /// Numerical columns to discretize into auxiliary bin columns.
    pub discretize: Vec<usize>,
    pub bins: usize,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub cvae: TrainTrace,
    pub selest: Option<ArTrainReport>,
}

/// Fits the transformer, the generative model and the selectivity model.
pub fn train_bundle(table: &Table, options: &TrainOptions) -> Result<(ModelBundle, TrainReport), EngineError> {
    let (table, discretizers) = if options.discretize.is_empty() {
        (table.clone(), Vec::new())
    } else {
        let bins = if options.bins == 0 { crate::planner::DEFAULT_BINS } else { options.bins };
        discretize_table(table, &options.discretize, bins)?
    };
    let transformer = Transformer::fit(&table)?;
    let mut cvae = CvaeModel::new(transformer, options.cvae.clone())?;
    let trace = cvae.train(&table, &options.mask)?;
    let (ar, selest) = if table.schema().categorical_indices().is_empty() {
        (None, None)
    } else {
        let (model, report) = train_ar(&table, &cvae.transformer.encoder, &options.selest)?;
        (Some(model), Some(report))
    };
    let meta = BundleMeta {
        row_count: table.row_count(),
        discretizers,
        mask: options.mask,
        cvae: options.cvae.clone(),
        selest: options.selest.clone(),
    };
    Ok((ModelBundle { cvae, ar, meta }, TrainReport { cvae: trace, selest }))
}

/// SHA-256 over the canonical schema text and every dictionary.
pub fn fingerprint(transformer: &Transformer) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(transformer.schema.canonical_text().as_bytes());
    for (c, d) in &transformer.encoder.dictionaries {
        h.update(format!("\n#{c}").as_bytes());
        for v in d.values() {
            h.update((v.len() as u64).to_le_bytes());
            h.update(v.as_bytes());
        }
    }
    h.finalize().into()
}

impl ModelBundle {
    pub fn transformer(&self) -> &Transformer {
        &self.cvae.transformer
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        fingerprint(self.transformer())
    }

    /// The training table's schema without auxiliary bin columns.
    pub fn user_schema(&self) -> Schema {
        let own = &self.transformer().schema;
        let user_columns = own.len() - self.meta.discretizers.len();
        Schema::from_specs(own.columns()[..user_columns].to_vec()).expect("prefix of a valid schema")
    }

    /// Checks that `schema` is the one this bundle was trained on (ignoring
    /// auxiliary bin columns, which are appended after the user's columns).
    pub fn check_schema(&self, schema: &Schema) -> Result<(), EngineError> {
        let own = &self.transformer().schema;
        let user_columns = own.len() - self.meta.discretizers.len();
        let same = schema.len() == user_columns
            && (0..user_columns).all(|c| schema.name(c) == own.name(c) && schema.kind(c) == own.kind(c));
        if same || schema.canonical_text() == own.canonical_text() {
            Ok(())
        } else {
            Err(EngineError::SchemaMismatch(format!(
                "model was trained on columns [{}], got [{}]",
                own.columns().iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(", "),
                schema.columns().iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(", ")
            )))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let trns = serde_json::to_vec(&TransformSection { transformer: self.transformer().clone(), meta: self.meta.clone() })
            .expect("metadata serializes");
        let mut cvae = Vec::new();
        self.cvae.encoder.write_le(&mut cvae);
        self.cvae.prior.write_le(&mut cvae);
        self.cvae.decoder.write_le(&mut cvae);
        let mut sections: Vec<(&[u8; 4], Vec<u8>)> = vec![(b"TRNS", trns), (b"CVAE", cvae)];
        if let Some(ar) = &self.ar {
            let mut buf = Vec::new();
            ar.write_le(&mut buf);
            sections.push((b"ARMD", buf));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (tag, payload) in sections {
            out.extend_from_slice(tag);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&Sha256::digest(&payload));
            out.extend_from_slice(&payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EngineError> {
        let corrupt = |m: &str| EngineError::CorruptFile(m.to_owned());
        let mut r = ByteReader::new(bytes);
        if r.take(4) != Some(MAGIC.as_slice()) {
            return Err(corrupt("bad magic bytes"));
        }
        let version = r.u32().ok_or_else(|| corrupt("truncated header"))?;
        if version != FORMAT_VERSION {
            return Err(EngineError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let stored_fp: [u8; 32] =
            r.take(32).ok_or_else(|| corrupt("truncated header"))?.try_into().expect("32 bytes");
        let count = r.u32().ok_or_else(|| corrupt("truncated header"))?;
        let (mut trns, mut cvae, mut ar) = (None, None, None);
        for _ in 0..count {
            let tag: [u8; 4] = r.take(4).ok_or_else(|| corrupt("truncated section"))?.try_into().expect("4 bytes");
            let len = usize::try_from(r.u64().ok_or_else(|| corrupt("truncated section"))?)
                .map_err(|_| corrupt("section too large"))?;
            let sum = r.take(32).ok_or_else(|| corrupt("truncated section"))?;
            let payload = r.take(len).ok_or_else(|| corrupt("truncated section"))?;
            if Sha256::digest(payload).as_slice() != sum {
                return Err(corrupt(&format!("checksum mismatch in section {}", String::from_utf8_lossy(&tag))));
            }
            match &tag {
                b"TRNS" => trns = Some(payload),
                b"CVAE" => cvae = Some(payload),
                b"ARMD" => ar = Some(payload),
                _ => return Err(corrupt("unknown section")),
            }
        }
        if !r.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        let trns: TransformSection =
            serde_json::from_slice(trns.ok_or_else(|| corrupt("missing TRNS section"))?).map_err(|e| corrupt(&e.to_string()))?;
        if fingerprint(&trns.transformer) != stored_fp {
            return Err(corrupt("fingerprint does not match the stored schema"));
        }
        let mut nets = ByteReader::new(cvae.ok_or_else(|| corrupt("missing CVAE section"))?);
        let encoder = DenseNet::read_le(&mut nets).ok_or_else(|| corrupt("bad encoder"))?;
        let prior = DenseNet::read_le(&mut nets).ok_or_else(|| corrupt("bad prior"))?;
        let decoder = DenseNet::read_le(&mut nets).ok_or_else(|| corrupt("bad decoder"))?;
        if !nets.is_empty() {
            return Err(corrupt("trailing bytes in CVAE section"));
        }
        let cvae = CvaeModel::from_parts(trns.transformer, trns.meta.cvae.clone(), encoder, prior, decoder)
            .map_err(|e| corrupt(&e.to_string()))?;
        let ar = ar.map(ArModel::read_le).transpose().map_err(|e| corrupt(&e.to_string()))?;
        Ok(ModelBundle { cvae, ar, meta: trns.meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EngineError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EngineError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl AqpBackend for ModelBundle {
    fn schema(&self) -> &Schema {
        &self.transformer().schema
    }

    fn encoder(&self) -> &LabelEncoder {
        &self.transformer().encoder
    }

    fn discretizers(&self) -> &[Discretizer] {
        &self.meta.discretizers
    }

    fn row_count(&self) -> usize {
        self.meta.row_count
    }

    fn generate(&self, conditions: &[(usize, String)], n: usize, rng: &mut dyn RngCore) -> Result<Vec<Row>, EngineError> {
        Ok(self.cvae.generate(conditions, n, Decoding::Sample, rng)?)
    }

    fn selectivity(&self, conditions: &[(usize, String)], rng: &mut dyn RngCore) -> Result<SelectivityEstimate, EngineError> {
        let oov = !self.in_vocabulary(conditions);
        match &self.ar {
            Some(ar) => Ok(ar.estimate(conditions, self.meta.selest.walks, rng)?),
            None => Ok(SelectivityEstimate { estimate: if oov { 0.0 } else { 1.0 }, walks: 0, std_error: 0.0, not_in_vocabulary: oov }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub n_samples: usize,
    pub min_survivors: usize,
    pub regenerate_factor: usize,
    pub dnf_cap: usize,
    pub term_cap: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            n_samples: DEFAULT_SAMPLES,
            min_survivors: MIN_SURVIVORS,
            regenerate_factor: REGENERATE_FACTOR,
            dnf_cap: DEFAULT_DNF_CAP,
            term_cap: crate::planner::DEFAULT_TERM_CAP,
        }
    }
}

/// Per-term execution record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TermDiagnostic {
    pub group: Vec<String>,
    pub term: String,
    pub sign: i32,
    pub generated: usize,
    /// Generated rows satisfying the term's equalities.
    pub matching_equalities: usize,
    /// Generated rows satisfying the whole term.
    pub survivors: usize,
    pub count: Option<f64>,
    pub avg: Option<f64>,
    pub selectivity: Option<f64>,
    pub std_error: Option<f64>,
    pub not_in_vocabulary: bool,
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub key: Vec<String>,
    pub value: f64,
    /// Fewer than the survivor threshold backed some AVG term.
    pub low_confidence: bool,
    /// Some contributing term could not be answered and was left out.
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub aggregate: Aggregate,
    pub grouped: bool,
    /// Answered rows after ORDER BY / LIMIT (default order: by key).
    pub rows: Vec<ResultRow>,
    /// Keys of groups (or the scalar row, key `[]`) that could not be answered.
    pub unanswered: Vec<Vec<String>>,
    pub diagnostics: Vec<TermDiagnostic>,
}

impl QueryResult {
    /// Value of a scalar query, `None` when unanswered.
    pub fn scalar(&self) -> Option<f64> {
        if self.grouped {
            None
        } else {
            self.rows.first().map(|r| r.value)
        }
    }

    /// Like [`QueryResult::scalar`], but an unanswered scalar is an error.
    pub fn require_scalar(&self) -> Result<f64, EngineError> {
        self.scalar().ok_or(EngineError::UnansweredQuery)
    }

    pub fn value_for(&self, key: &[String]) -> Option<f64> {
        self.rows.iter().find(|r| r.key == key).map(|r| r.value)
    }
}

/// Executes queries against one backend.
pub struct Engine<'a> {
    pub backend: &'a dyn AqpBackend,
    pub config: EngineConfig,
}

struct TermSample {
    generated: usize,
    matching_equalities: usize,
    survivors: Vec<f64>,
    low_confidence: bool,
}

impl<'a> Engine<'a> {
    pub fn new(backend: &'a dyn AqpBackend, config: EngineConfig) -> Self {
        Engine { backend, config }
    }

    pub fn plan(&self, sql: &str) -> Result<QueryPlan, EngineError> {
        let ast = parse(sql, self.backend.schema())?;
        let dnf = to_dnf(ast.predicate.as_ref(), self.config.dnf_cap)?;
        Ok(plan(
            &ast,
            &dnf,
            PlanContext {
                schema: self.backend.schema(),
                encoder: self.backend.encoder(),
                discretizers: self.backend.discretizers(),
                cap: self.config.term_cap,
            },
        )?)
    }

    pub fn query(&self, sql: &str, rng: &mut dyn RngCore) -> Result<QueryResult, EngineError> {
        let plan = self.plan(sql)?;
        self.execute(&plan, rng)
    }

    /// Generates for a term and keeps the target values of rows satisfying
    /// the whole term; regenerates once with more samples when few survive.
    fn sample(&self, term: &Term, target: Option<usize>, rng: &mut dyn RngCore) -> Result<TermSample, EngineError> {
        let conditions = term.conjunction.conditions();
        let mut n = self.config.n_samples.max(1);
        let mut regenerated = false;
        loop {
            let rows = self.backend.generate(&conditions, n, rng)?;
            let eq_rows: Vec<&Row> = rows.iter().filter(|r| matches_conditions(r, &conditions)).collect();
            let survivors: Vec<f64> = eq_rows
                .iter()
                .filter(|r| term.conjunction.matches(r))
                .map(|r| target.and_then(|t| r[t].as_num()).unwrap_or(0.0))
                .collect();
            if survivors.len() >= self.config.min_survivors || regenerated {
                let low_confidence = survivors.len() < self.config.min_survivors;
                return Ok(TermSample { generated: rows.len(), matching_equalities: eq_rows.len(), survivors, low_confidence });
            }
            regenerated = true;
            n = n.saturating_mul(self.config.regenerate_factor.max(1));
        }
    }

    fn count(&self, term: &Term, diag: &mut TermDiagnostic, sample: &mut Option<TermSample>, target: Option<usize>, rng: &mut dyn RngCore) -> Result<Option<f64>, EngineError> {
        let conditions = term.conjunction.conditions();
        let est = self.backend.selectivity(&conditions, rng)?;
        diag.selectivity = Some(est.estimate);
        diag.std_error = Some(est.std_error);
        diag.not_in_vocabulary = est.not_in_vocabulary;
        let eq_count = est.estimate * self.backend.row_count() as f64;
        if term.conjunction.ranges.is_empty() || eq_count == 0.0 {
            return Ok(Some(eq_count));
        }
        if sample.is_none() {
            *sample = Some(self.sample(term, target, rng)?);
        }
        let s = sample.as_ref().expect("sampled");
        if s.matching_equalities == 0 {
            return Ok(None);
        }
        Ok(Some(eq_count * s.survivors.len() as f64 / s.matching_equalities as f64))
    }

    fn avg(&self, term: &Term, sample: &mut Option<TermSample>, target: Option<usize>, rng: &mut dyn RngCore) -> Result<Option<f64>, EngineError> {
        if !self.backend.in_vocabulary(&term.conjunction.conditions()) {
            return Ok(None);
        }
        if sample.is_none() {
            *sample = Some(self.sample(term, target, rng)?);
        }
        let s = sample.as_ref().expect("sampled");
        if s.survivors.is_empty() {
            return Ok(None);
        }
        Ok(Some(s.survivors.iter().sum::<f64>() / s.survivors.len() as f64))
    }

    pub fn execute(&self, plan: &QueryPlan, rng: &mut dyn RngCore) -> Result<QueryResult, EngineError> {
        let schema = self.backend.schema();
        let mut rows = Vec::new();
        let mut unanswered = Vec::new();
        let mut diagnostics = Vec::new();
        for group in &plan.groups {
            let mut low_confidence = false;
            let mut partial = false;
            let mut count_sum = 0.0;
            let mut weighted = 0.0;
            let mut weight = 0.0;
            let mut single_value = None;
            for term in &group.terms {
                let mut diag = TermDiagnostic {
                    group: group.key.clone(),
                    term: term.conjunction.render(schema),
                    sign: term.sign,
                    ..TermDiagnostic::default()
                };
                let mut sample = None;
                let s = f64::from(term.sign);
                match (plan.aggregate, group.rule) {
                    (Aggregate::Avg, CombineRule::Single) => {
                        single_value = self.avg(term, &mut sample, plan.target, rng)?;
                        diag.avg = single_value;
                    }
                    (Aggregate::Count, _) => {
                        let c = self.count(term, &mut diag, &mut sample, plan.target, rng)?;
                        diag.count = c;
                        match c {
                            Some(c) => count_sum += s * c,
                            None => partial = true,
                        }
                    }
                    (Aggregate::Avg, _) | (Aggregate::Sum, _) => {
                        let c = self.count(term, &mut diag, &mut sample, plan.target, rng)?;
                        diag.count = c;
                        match c {
                            Some(c) if c != 0.0 => match self.avg(term, &mut sample, plan.target, rng)? {
                                Some(a) => {
                                    diag.avg = Some(a);
                                    weighted += s * c * a;
                                    weight += s * c;
                                }
                                None => partial = true,
                            },
                            Some(_) => {}
                            None => partial = true,
                        }
                    }
                }
                if let Some(smp) = &sample {
                    diag.generated = smp.generated;
                    diag.matching_equalities = smp.matching_equalities;
                    diag.survivors = smp.survivors.len();
                    diag.low_confidence = smp.low_confidence;
                    low_confidence |= smp.low_confidence;
                }
                diagnostics.push(diag);
            }
            let value = match (plan.aggregate, group.rule) {
                (Aggregate::Avg, CombineRule::Single) => single_value,
                (Aggregate::Avg, _) => (weight > 0.0).then(|| weighted / weight),
                (Aggregate::Sum, _) => (weight > 0.0).then_some(weighted),
                (Aggregate::Count, _) => {
                    let c = count_sum.max(0.0);
                    // A group is present only when it has rows.
                    (!plan.is_grouped() || c > 0.0).then_some(c)
                }
            };
            match value {
                Some(value) => rows.push(ResultRow { key: group.key.clone(), value, low_confidence, partial }),
                None => unanswered.push(group.key.clone()),
            }
        }
        if plan.groups.is_empty() && !plan.is_grouped() {
            // Every conjunction was unsatisfiable.
            match plan.aggregate {
                Aggregate::Count => rows.push(ResultRow { key: Vec::new(), value: 0.0, low_confidence: false, partial: false }),
                _ => unanswered.push(Vec::new()),
            }
        }
        order_and_limit(&mut rows, plan);
        Ok(QueryResult { aggregate: plan.aggregate, grouped: plan.is_grouped(), rows, unanswered, diagnostics })
    }
}

/// Sorts answered rows by the ORDER BY key (ties broken by the full group
/// key) and truncates to LIMIT; without ORDER BY rows are sorted by key.
pub fn order_and_limit(rows: &mut Vec<ResultRow>, plan: &QueryPlan) {
    let by_key = |a: &ResultRow, b: &ResultRow| a.key.cmp(&b.key);
    match &plan.order_by {
        None => rows.sort_by(by_key),
        Some(order) => {
            let primary = |a: &ResultRow, b: &ResultRow| -> Ordering {
                match order.key {
                    OrderKey::Aggregate => a.value.total_cmp(&b.value),
                    OrderKey::Group(c) => {
                        let slot = plan.group_by.iter().position(|g| *g == c).unwrap_or(0);
                        a.key.get(slot).cmp(&b.key.get(slot))
                    }
                }
            };
            rows.sort_by(|a, b| {
                let p = primary(a, b);
                let p = if order.descending { p.reverse() } else { p };
                p.then_with(|| by_key(a, b))
            });
        }
    }
    if let Some(n) = plan.limit {
        rows.truncate(usize::try_from(n).unwrap_or(usize::MAX));
    }
}
