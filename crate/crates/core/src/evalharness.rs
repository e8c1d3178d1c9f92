//! Ground truth, synthetic workloads and error metrics.
//!
//! `oracle_execute` is a full scan written independently of the planner and
//! engine so the two can be cross-checked. Workloads follow the usual recipe:
//! for each predicate count k, sample attribute sets of size k, take predicate
//! values from a random tuple, and ask AVG of every numerical column.
//!
//! Report files:
//!
//! - `report.jsonl`: one [`QueryRecord`] per line.
//! - `summary.json`: the [`EvalSummary`].
//! - `summary.txt`: the same summary as a table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Cell, Table};
use crate::engine::{train_bundle, AqpBackend, Engine, EngineConfig, EngineError, TrainOptions};
use crate::masking::MaskKind;
use crate::rng::{derive_indexed_seed, seeded, stream};
use crate::sqlfront::{render, Aggregate, OrderKey, Predicate, QueryAst};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("relative error is undefined for ground truth {g}")]
    UndefinedRelativeError { g: f64 },
    #[error("bin completeness needs at least one ground-truth group")]
    EmptyTruthGroups,
    #[error("workload needs at least one categorical and one numerical column")]
    UnsuitableTable,
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Exact answer of a query: one row per non-empty group (or a single row
/// with an empty key for scalar queries).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactResult {
    pub grouped: bool,
    /// `None` only for a scalar AVG/SUM over zero rows.
    pub rows: Vec<(Vec<String>, Option<f64>)>,
}

impl ExactResult {
    pub fn scalar(&self) -> Option<f64> {
        if self.grouped {
            None
        } else {
            self.rows.first().and_then(|r| r.1)
        }
    }

    pub fn groups(&self) -> BTreeMap<Vec<String>, f64> {
        self.rows.iter().filter_map(|(k, v)| v.map(|v| (k.clone(), v))).collect()
    }
}

fn cell_text(cell: &Cell) -> String {
    match cell {
        Cell::Cat(s) => s.clone(),
        Cell::Num(x) => format!("{x:?}"),
    }
}

/// Full-scan evaluation: filter, group, aggregate, order, limit.
pub fn oracle_execute(ast: &QueryAst, table: &Table) -> ExactResult {
    let mut groups: BTreeMap<Vec<String>, (usize, f64)> = BTreeMap::new();
    for row in table.rows() {
        if ast.predicate.as_ref().is_some_and(|p| !p.eval(row)) {
            continue;
        }
        let key: Vec<String> = ast.group_by.iter().map(|&c| cell_text(&row[c])).collect();
        let acc = groups.entry(key).or_insert((0, 0.0));
        acc.0 += 1;
        if let Some(t) = ast.target {
            acc.1 += row[t].as_num().unwrap_or(0.0);
        }
    }
    let value = |n: usize, sum: f64| match ast.aggregate {
        Aggregate::Count => Some(n as f64),
        Aggregate::Sum => (n > 0).then_some(sum),
        Aggregate::Avg => (n > 0).then(|| sum / n as f64),
    };
    let grouped = !ast.group_by.is_empty();
    let mut rows: Vec<(Vec<String>, Option<f64>)> = if grouped {
        groups.into_iter().map(|(k, (n, s))| (k, value(n, s))).collect()
    } else {
        let (n, s) = groups.remove(&Vec::new()).unwrap_or((0, 0.0));
        vec![(Vec::new(), value(n, s))]
    };
    if let Some(order) = &ast.order_by {
        rows.sort_by(|a, b| {
            let primary = match order.key {
                OrderKey::Aggregate => a.1.unwrap_or(f64::NAN).total_cmp(&b.1.unwrap_or(f64::NAN)),
                OrderKey::Group(c) => {
                    let slot = ast.group_by.iter().position(|g| *g == c).unwrap_or(0);
                    a.0.get(slot).cmp(&b.0.get(slot))
                }
            };
            let primary = if order.descending { primary.reverse() } else { primary };
            primary.then_with(|| a.0.cmp(&b.0))
        });
    }
    if let Some(limit) = ast.limit {
        rows.truncate(usize::try_from(limit).unwrap_or(usize::MAX));
    }
    ExactResult { grouped, rows }
}

/// |g − a| / |g|.
pub fn relative_error(g: f64, a: f64) -> Result<f64, EvalError> {
    if g == 0.0 {
        return Err(EvalError::UndefinedRelativeError { g });
    }
    Ok((g - a).abs() / g.abs())
}

/// 2|g − a| / (|g| + |a|), zero when both are zero.
pub fn smape(g: f64, a: f64) -> f64 {
    let denom = g.abs() + a.abs();
    if denom == 0.0 {
        0.0
    } else {
        2.0 * (g - a).abs() / denom
    }
}

/// |G ∩ A| / |G|.
pub fn bin_completeness<K: Ord>(truth: &BTreeSet<K>, approx: &BTreeSet<K>) -> Result<f64, EvalError> {
    if truth.is_empty() {
        return Err(EvalError::EmptyTruthGroups);
    }
    Ok(truth.intersection(approx).count() as f64 / truth.len() as f64)
}

/// Mean relative error over (truth, approx) pairs; pairs with zero truth are
/// skipped. `None` when nothing is left.
pub fn group_query_error(pairs: &[(f64, f64)]) -> Option<f64> {
    let errs: Vec<f64> = pairs.iter().filter_map(|&(g, a)| relative_error(g, a).ok()).collect();
    (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    /// Attribute combinations sampled per predicate count.
    pub count: usize,
    pub aggregates: Vec<Aggregate>,
    /// Add a GROUP BY on a categorical column that carries no predicate.
    pub group_by: bool,
    pub seed: u64,
    pub log_selectivity: bool,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec { count: 100, aggregates: vec![Aggregate::Avg], group_by: false, seed: 0, log_selectivity: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadQuery {
    pub k: usize,
    pub sql: String,
    pub ast: QueryAst,
}

/// Builds the synthetic workload. With the default spec this yields
/// `count × |A_C| × |A_N|` AVG queries.
pub fn generate_synthetic_workload(table: &Table, spec: &WorkloadSpec) -> Result<Vec<WorkloadQuery>, EvalError> {
    let schema = table.schema();
    let cats = schema.categorical_indices();
    let nums = schema.numerical_indices();
    if cats.is_empty() || nums.is_empty() || table.is_empty() {
        return Err(EvalError::UnsuitableTable);
    }
    if spec.count == 0 || spec.aggregates.is_empty() {
        return Err(EvalError::InvalidSpec("count and aggregates must be non-empty".into()));
    }
    let max_k = if spec.group_by { cats.len() - 1 } else { cats.len() };
    if max_k == 0 {
        return Err(EvalError::InvalidSpec("GROUP BY workloads need two categorical columns".into()));
    }
    let mut rng = stream(spec.seed, "workload");
    let mut out = Vec::new();
    for k in 1..=max_k {
        for _ in 0..spec.count {
            let mut columns: Vec<usize> = sample(&mut rng, cats.len(), k).into_iter().map(|i| cats[i]).collect();
            columns.sort_unstable();
            let tuple = table.row(rng.random_range(0..table.row_count()));
            let preds: Vec<Predicate> = columns
                .iter()
                .map(|&c| Predicate::Eq { column: c, value: tuple[c].as_cat().unwrap_or_default().to_owned() })
                .collect();
            let predicate = if preds.len() == 1 { preds.into_iter().next() } else { Some(Predicate::And(preds)) };
            let group_by: Vec<usize> = if spec.group_by {
                let free: Vec<usize> = cats.iter().copied().filter(|c| !columns.contains(c)).collect();
                vec![free[rng.random_range(0..free.len())]]
            } else {
                Vec::new()
            };
            for &aggregate in &spec.aggregates {
                let targets: Vec<Option<usize>> =
                    if aggregate == Aggregate::Count { vec![None] } else { nums.iter().map(|&n| Some(n)).collect() };
                for target in targets {
                    let ast = QueryAst {
                        aggregate,
                        target,
                        alias: None,
                        select_columns: group_by.clone(),
                        table: "t".into(),
                        predicate: predicate.clone(),
                        group_by: group_by.clone(),
                        order_by: None,
                        limit: None,
                    };
                    out.push(WorkloadQuery { k, sql: render(&ast, schema), ast });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupDetail {
    pub truth_groups: usize,
    pub answered_groups: usize,
    pub bin_completeness: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub index: usize,
    pub sql: String,
    pub k: usize,
    pub truth: Option<f64>,
    pub approx: Option<f64>,
    pub answered: bool,
    pub relative_error: Option<f64>,
    pub smape: Option<f64>,
    pub low_confidence: bool,
    /// True selectivity of the WHERE clause.
    pub selectivity: f64,
    pub groups: Option<GroupDetail>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Spread> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Spread { q1: quantile(&v, 0.25), median: quantile(&v, 0.5), q3: quantile(&v, 0.75) })
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KSummary {
    pub k: usize,
    pub total: usize,
    pub answered: usize,
    pub answered_fraction: f64,
    /// Answered queries with zero ground truth, excluded from R.E.
    pub undefined_relative_error: usize,
    pub relative_error: Option<Spread>,
    pub smape: Option<Spread>,
    pub mean_bin_completeness: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_samples: usize,
    pub total: usize,
    pub answered: usize,
    pub per_k: Vec<KSummary>,
    pub overall: KSummary,
    /// Query counts per decade of true selectivity, keyed by floor(log10).
    pub selectivity_histogram: Option<BTreeMap<i32, usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<QueryRecord>,
    pub summary: EvalSummary,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalConfig {
    pub engine: EngineConfig,
    pub seed: u64,
    pub log_selectivity: bool,
}


fn evaluate_one(engine: &Engine<'_>, table: &Table, index: usize, q: &WorkloadQuery, seed: u64) -> QueryRecord {
    let truth = oracle_execute(&q.ast, table);
    let matching = q.ast.predicate.as_ref().map_or(table.row_count(), |p| table.rows().iter().filter(|r| p.eval(r)).count());
    let mut rec = QueryRecord {
        index,
        sql: q.sql.clone(),
        k: q.k,
        selectivity: matching as f64 / table.row_count().max(1) as f64,
        ..QueryRecord::default()
    };
    let mut rng = seeded(derive_indexed_seed(seed, "eval-query", index as u64));
    let result = engine.plan(&q.sql).and_then(|plan| engine.execute(&plan, &mut rng));
    let result = match result {
        Ok(r) => r,
        Err(e) => {
            rec.error = Some(e.to_string());
            return rec;
        }
    };
    rec.low_confidence = result.rows.iter().any(|r| r.low_confidence);
    if truth.grouped {
        let truth_groups = truth.groups();
        let approx: BTreeMap<Vec<String>, f64> = result.rows.iter().map(|r| (r.key.clone(), r.value)).collect();
        let pairs: Vec<(f64, f64)> =
            truth_groups.iter().filter_map(|(k, &g)| approx.get(k).map(|&a| (g, a))).collect();
        let truth_keys: BTreeSet<Vec<String>> = truth_groups.keys().cloned().collect();
        let approx_keys: BTreeSet<Vec<String>> = approx.keys().cloned().collect();
        rec.answered = !pairs.is_empty();
        rec.relative_error = group_query_error(&pairs);
        rec.smape = rec.answered.then(|| pairs.iter().map(|&(g, a)| smape(g, a)).sum::<f64>() / pairs.len() as f64);
        rec.groups = bin_completeness(&truth_keys, &approx_keys).ok().map(|b| GroupDetail {
            truth_groups: truth_keys.len(),
            answered_groups: approx_keys.len(),
            bin_completeness: b,
        });
    } else {
        rec.truth = truth.scalar();
        rec.approx = result.scalar();
        rec.answered = rec.approx.is_some();
        if let (Some(g), Some(a)) = (rec.truth, rec.approx) {
            rec.relative_error = relative_error(g, a).ok();
            rec.smape = Some(smape(g, a));
        }
    }
    rec
}

fn summarize_k(k: usize, records: &[&QueryRecord]) -> KSummary {
    let answered: Vec<&&QueryRecord> = records.iter().filter(|r| r.answered).collect();
    let re: Vec<f64> = answered.iter().filter_map(|r| r.relative_error).collect();
    let sm: Vec<f64> = answered.iter().filter_map(|r| r.smape).collect();
    let bins: Vec<f64> = records.iter().filter_map(|r| r.groups.as_ref().map(|g| g.bin_completeness)).collect();
    KSummary {
        k,
        total: records.len(),
        answered: answered.len(),
        answered_fraction: if records.is_empty() { 0.0 } else { answered.len() as f64 / records.len() as f64 },
        undefined_relative_error: answered.iter().filter(|r| r.relative_error.is_none() && r.smape.is_some()).count(),
        relative_error: Spread::of(&re),
        smape: Spread::of(&sm),
        mean_bin_completeness: (!bins.is_empty()).then(|| bins.iter().sum::<f64>() / bins.len() as f64),
    }
}

pub fn summarize(records: &[QueryRecord], n_samples: usize, log_selectivity: bool) -> EvalSummary {
    let mut by_k: BTreeMap<usize, Vec<&QueryRecord>> = BTreeMap::new();
    for r in records {
        by_k.entry(r.k).or_default().push(r);
    }
    let per_k = by_k.iter().map(|(&k, rs)| summarize_k(k, rs)).collect();
    let all: Vec<&QueryRecord> = records.iter().collect();
    let histogram = log_selectivity.then(|| {
        let mut h = BTreeMap::new();
        for r in records.iter().filter(|r| r.selectivity > 0.0) {
            *h.entry(r.selectivity.log10().floor() as i32).or_insert(0) += 1;
        }
        h
    });
    EvalSummary {
        n_samples,
        total: records.len(),
        answered: records.iter().filter(|r| r.answered).count(),
        per_k,
        overall: summarize_k(0, &all),
        selectivity_histogram: histogram,
    }
}

/// Runs every query against `backend` and `table`. Queries run in parallel;
/// each gets its own seed derived from its index, so the report does not
/// depend on scheduling.
pub fn run_eval(backend: &dyn AqpBackend, table: &Table, workload: &[WorkloadQuery], config: &EvalConfig) -> EvalReport {
    let engine = Engine::new(backend, config.engine);
    let records: Vec<QueryRecord> = workload
        .par_iter()
        .enumerate()
        .map(|(i, q)| evaluate_one(&engine, table, i, q, config.seed))
        .collect();
    let summary = summarize(&records, config.engine.n_samples, config.log_selectivity);
    EvalReport { records, summary }
}

fn fmt_spread(s: &Option<Spread>, scale: f64) -> String {
    match s {
        Some(s) => format!("{:.2} [{:.2}, {:.2}]", s.median * scale, s.q1 * scale, s.q3 * scale),
        None => "-".into(),
    }
}

impl EvalSummary {
    /// Per-k table: answered share, R.E. (percent) and sMAPE medians with quartiles.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "samples per query: {}", self.n_samples);
        let _ = writeln!(out, "{:>3} {:>6} {:>9} {:>26} {:>24} {:>6}", "k", "total", "answered", "R.E. % median [q1, q3]", "sMAPE median [q1, q3]", "bins");
        let rows = self.per_k.iter().chain(std::iter::once(&self.overall));
        for s in rows {
            let label = if s.k == 0 { "all".to_string() } else { s.k.to_string() };
            let bins = s.mean_bin_completeness.map_or("-".into(), |b| format!("{b:.3}"));
            let _ = writeln!(
                out,
                "{:>3} {:>6} {:>8.1}% {:>26} {:>24} {:>6}",
                label,
                s.total,
                100.0 * s.answered_fraction,
                fmt_spread(&s.relative_error, 100.0),
                fmt_spread(&s.smape, 1.0),
                bins
            );
        }
        if let Some(h) = &self.selectivity_histogram {
            let _ = writeln!(out, "selectivity histogram (decade: queries)");
            for (d, n) in h {
                let _ = writeln!(out, "  1e{d}: {n}");
            }
        }
        out
    }
}

impl EvalReport {
    pub fn write_jsonl<W: std::io::Write>(&self, mut w: W) -> Result<(), EvalError> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Writes `report.jsonl`, `summary.json` and `summary.txt` into `dir`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<(), EvalError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join("report.jsonl"))?);
        self.write_jsonl(&mut f)?;
        f.flush()?;
        fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(&self.summary)?)?;
        fs::write(dir.join("summary.txt"), self.summary.table())?;
        Ok(())
    }
}

/// Evaluates the same workload at several sample counts.
pub fn samples_sweep(
    backend: &dyn AqpBackend,
    table: &Table,
    workload: &[WorkloadQuery],
    samples: &[usize],
    config: &EvalConfig,
) -> Vec<EvalReport> {
    samples
        .iter()
        .map(|&n| {
            let mut c = *config;
            c.engine.n_samples = n;
            run_eval(backend, table, workload, &c)
        })
        .collect()
}

/// Median R.E. (percent) per sample count and k.
pub fn sweep_table(reports: &[EvalReport]) -> String {
    grid("samples", reports.iter().map(|r| (r.summary.n_samples.to_string(), &r.summary)))
}

fn grid<'a>(label: &str, rows: impl Iterator<Item = (String, &'a EvalSummary)>) -> String {
    let rows: Vec<(String, &EvalSummary)> = rows.collect();
    let ks: BTreeSet<usize> = rows.iter().flat_map(|(_, s)| s.per_k.iter().map(|k| k.k)).collect();
    let mut out = format!("median R.E. %\n{label:>10}");
    for k in &ks {
        let _ = write!(out, " {:>8}", format!("k={k}"));
    }
    let _ = writeln!(out, " {:>8}", "all");
    for (name, s) in rows {
        let _ = write!(out, "{name:>10}");
        for k in &ks {
            let v = s.per_k.iter().find(|x| x.k == *k).and_then(|x| x.relative_error.as_ref());
            let _ = write!(out, " {:>8}", v.map_or("-".into(), |v| format!("{:.2}", 100.0 * v.median)));
        }
        let all = s.overall.relative_error.as_ref().map_or("-".into(), |v| format!("{:.2}", 100.0 * v.median));
        let _ = writeln!(out, " {all:>8}");
    }
    out
}

/// Trains one bundle per masking kind (same factor and configs otherwise)
/// and evaluates each on the same workload.
pub fn masking_ablation(
    table: &Table,
    options: &TrainOptions,
    kinds: &[MaskKind],
    workload: &[WorkloadQuery],
    config: &EvalConfig,
) -> Result<Vec<(MaskKind, EvalReport)>, EvalError> {
    kinds
        .iter()
        .map(|&kind| {
            let mut opts = options.clone();
            opts.mask.kind = kind;
            let (bundle, _) = train_bundle(table, &opts)?;
            Ok((kind, run_eval(&bundle, table, workload, config)))
        })
        .collect()
}

pub fn ablation_table(results: &[(MaskKind, EvalReport)]) -> String {
    grid("masking", results.iter().map(|(k, r)| (k.to_string(), &r.summary)))
}
