//! Decomposition of a parsed query into conjunctive subqueries plus the rule
//! for recombining their answers.
//!
//! A DNF with one conjunction is answered directly. Several conjunctions
//! that pairwise fix some shared column to different values are disjoint and
//! simply added up (COUNT/SUM) or count-weighted (AVG). Overlapping ones go
//! through inclusion–exclusion: every non-empty subset of conjunctions
//! becomes one intersected term with sign `(-1)^(|S|+1)`, with identical
//! intersections coalesced into one term. Because the union's
//! SUM and COUNT are both signed sums over those terms, the union's AVG is
//! `Σ s·count·avg / Σ s·count` over the same terms.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Cell, ColumnKind, Schema, Table};
use crate::sqlfront::{Aggregate, Conjunction, Dnf, OrderBy, QueryAst};
use crate::transform::LabelEncoder;

pub const DEFAULT_TERM_CAP: usize = 1024;
pub const DEFAULT_BINS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("inclusion-exclusion needs more than {cap} terms")]
    DnfBlowup { cap: usize },
    #[error("no dictionary for group-by column {0:?}")]
    MissingDictionary(String),
    #[error("discretizer error: {0}")]
    Discretizer(String),
}

/// One conjunctive subquery with its inclusion–exclusion sign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub conjunction: Conjunction,
    /// Inclusion–exclusion coefficient: `±1`, or a sum of those when
    /// identical intersections were coalesced.
    pub sign: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CombineRule {
    /// One positive term; its answer is the answer.
    Single,
    /// AVG over several terms: `Σ s·c·avg / Σ s·c`.
    CountWeightedAvg,
    /// COUNT or SUM over several terms: `Σ s·x`.
    SignedSum,
}

/// Terms answering one output row (the single row of a scalar query, or one
/// group).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPlan {
    /// Values of the group-by columns, empty for scalar queries.
    pub key: Vec<String>,
    pub terms: Vec<Term>,
    pub rule: CombineRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub aggregate: Aggregate,
    pub target: Option<usize>,
    pub group_by: Vec<usize>,
    pub groups: Vec<GroupPlan>,
    pub order_by: Option<OrderBy>,
    pub limit: Option<u64>,
    /// Conjunctions dropped because a range was empty.
    pub unsatisfiable: usize,
    /// The DNF was found pairwise disjoint (no inclusion–exclusion needed).
    pub disjoint: bool,
}

impl QueryPlan {
    pub fn is_grouped(&self) -> bool {
        !self.group_by.is_empty()
    }

    pub fn term_count(&self) -> usize {
        self.groups.iter().map(|g| g.terms.len()).sum()
    }

    pub fn render(&self, schema: &Schema) -> String {
        PlanDisplay { plan: self, schema }.to_string()
    }
}

struct PlanDisplay<'a> {
    plan: &'a QueryPlan,
    schema: &'a Schema,
}

impl fmt::Display for PlanDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.plan;
        let target = p.target.map_or("*", |c| self.schema.name(c));
        writeln!(f, "aggregate: {}({target})", p.aggregate)?;
        if p.is_grouped() {
            let names: Vec<&str> = p.group_by.iter().map(|c| self.schema.name(*c)).collect();
            writeln!(f, "group by: {}", names.join(", "))?;
        }
        writeln!(f, "disjoint: {}, unsatisfiable conjunctions: {}", p.disjoint, p.unsatisfiable)?;
        for g in &p.groups {
            if p.is_grouped() {
                writeln!(f, "group ({}) rule {:?}", g.key.join(", "), g.rule)?;
            } else {
                writeln!(f, "rule {:?}", g.rule)?;
            }
            for t in &g.terms {
                writeln!(f, "  {:+} {}", t.sign, t.conjunction.render(self.schema))?;
            }
        }
        if let Some(o) = &p.order_by {
            writeln!(f, "order by: {:?} {}", o.key, if o.descending { "desc" } else { "asc" })?;
        }
        if let Some(n) = p.limit {
            writeln!(f, "limit: {n}")?;
        }
        Ok(())
    }
}

/// Equal-frequency binning of a numerical column, materialized as an extra
/// categorical column at training time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discretizer {
    pub column: usize,
    pub aux_column: usize,
    /// Inclusive lower edge of each bin; bin `i` covers `[edges[i], edges[i+1])`
    /// and the last bin is closed on the right at `upper`.
    pub edges: Vec<f64>,
    pub upper: f64,
}

impl Discretizer {
    /// Builds at most `bins` equal-frequency bins over column `column`; the
    /// caller appends the auxiliary column at position `aux_column`.
    pub fn fit(table: &Table, column: usize, aux_column: usize, bins: usize) -> Result<Self, PlanError> {
        if table.schema().kind(column) != ColumnKind::Numerical || bins == 0 {
            return Err(PlanError::Discretizer("needs a numerical column and at least one bin".into()));
        }
        let mut values = table.numeric_column(column);
        if values.is_empty() {
            return Err(PlanError::Discretizer("empty column".into()));
        }
        values.sort_by(f64::total_cmp);
        let n = values.len();
        let mut edges = vec![values[0]];
        for b in 1..bins {
            let e = values[(b * n / bins).min(n - 1)];
            if e > *edges.last().expect("non-empty") {
                edges.push(e);
            }
        }
        Ok(Discretizer { column, aux_column, edges, upper: values[n - 1] })
    }

    pub fn bin_count(&self) -> usize {
        self.edges.len()
    }

    pub fn label(bin: usize) -> String {
        format!("bin{bin:02}")
    }

    /// Bin index of `x` (values outside the fitted span go to the end bins).
    pub fn bin_of(&self, x: f64) -> usize {
        self.edges.partition_point(|e| *e <= x).saturating_sub(1)
    }

    fn bin_bounds(&self, bin: usize) -> (f64, f64, bool) {
        let lo = if bin == 0 { f64::NEG_INFINITY } else { self.edges[bin] };
        match self.edges.get(bin + 1) {
            Some(next) => (lo, *next, false),
            None => (lo, f64::INFINITY, true),
        }
    }

    /// Splits a range into per-bin disjuncts. Each carries the bin equality;
    /// the range itself is kept only where the bin is not fully inside it.
    fn expand(&self, lo: f64, hi: f64) -> Vec<(String, Option<(f64, f64)>)> {
        let mut out = Vec::new();
        if lo > hi {
            return out;
        }
        for bin in self.bin_of(lo)..=self.bin_of(hi) {
            let (b_lo, b_hi, last) = self.bin_bounds(bin);
            // Bin is [b_lo, b_hi) (or unbounded above for the last bin).
            let inside = lo <= b_lo && (if last { hi == f64::INFINITY } else { hi >= b_hi });
            out.push((Self::label(bin), if inside { None } else { Some((lo, hi)) }));
        }
        out
    }

    pub fn cell(&self, x: f64) -> Cell {
        Cell::Cat(Self::label(self.bin_of(x)))
    }
}

/// Appends one auxiliary bin column per discretized numerical column.
pub fn discretize_table(table: &Table, columns: &[usize], bins: usize) -> Result<(Table, Vec<Discretizer>), PlanError> {
    let mut schema = table.schema().clone();
    let mut discretizers = Vec::new();
    for &c in columns {
        let name = format!("{}__bin", table.schema().name(c));
        schema = schema.with_column(&name, ColumnKind::Categorical).map_err(|e| PlanError::Discretizer(e.to_string()))?;
        discretizers.push(Discretizer::fit(table, c, schema.len() - 1, bins)?);
    }
    let rows = table
        .rows()
        .iter()
        .map(|r| {
            let mut r = r.clone();
            for d in &discretizers {
                r.push(d.cell(r[d.column].as_num().unwrap_or(f64::NAN)));
            }
            r
        })
        .collect();
    let extended = Table::new(schema, rows)
        .map_err(|e| PlanError::Discretizer(e.to_string()))?
        .with_missing(table.missing_cells().iter().copied());
    Ok((extended, discretizers))
}

fn expand_ranges(dnf: &Dnf, discretizers: &[Discretizer]) -> Vec<Conjunction> {
    let mut out = Vec::new();
    for conj in &dnf.conjunctions {
        let mut partial = vec![conj.clone()];
        for (col, (lo, hi)) in &conj.ranges {
            let Some(d) = discretizers.iter().find(|d| d.column == *col) else { continue };
            let pieces = d.expand(*lo, *hi);
            let mut next = Vec::new();
            for base in &partial {
                for (label, residual) in &pieces {
                    let mut c = base.clone();
                    match residual {
                        Some(r) => {
                            c.ranges.insert(*col, *r);
                        }
                        None => {
                            c.ranges.remove(col);
                        }
                    }
                    if let Some(m) = c.merge(&Conjunction::equality(d.aux_column, label.clone())) {
                        next.push(m);
                    }
                }
            }
            partial = next;
        }
        out.extend(partial);
    }
    out
}

/// Inclusion–exclusion terms for possibly overlapping conjunctions, built
/// incrementally: `1[U ∪ C] = 1[U] + 1[C] − 1[U ∧ C]`. Identical intersections
/// are coalesced by summing their coefficients, terms whose coefficient
/// cancels are dropped, and contradictory intersections are never created.
pub fn inclusion_exclusion(conjunctions: &[Conjunction], cap: usize) -> Result<Vec<Term>, PlanError> {
    let mut terms: Vec<Term> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut add = |terms: &mut Vec<Term>, conjunction: Conjunction, sign: i32| {
        let key = format!("{conjunction:?}");
        match index.get(&key) {
            Some(&i) => terms[i].sign += sign,
            None => {
                index.insert(key, terms.len());
                terms.push(Term { conjunction, sign });
            }
        }
    };
    for c in conjunctions {
        let existing: Vec<(Conjunction, i32)> =
            terms.iter().filter(|t| t.sign != 0).map(|t| (t.conjunction.clone(), t.sign)).collect();
        add(&mut terms, c.clone(), 1);
        for (t, sign) in existing {
            if let Some(both) = t.merge(c).filter(|m| !m.has_empty_range()) {
                add(&mut terms, both, -sign);
            }
        }
        if terms.iter().filter(|t| t.sign != 0).count() > cap {
            return Err(PlanError::DnfBlowup { cap });
        }
    }
    terms.retain(|t| t.sign != 0);
    Ok(terms)
}

/// True when every row satisfying `a` also satisfies `b`.
pub fn implies(a: &Conjunction, b: &Conjunction) -> bool {
    b.equalities.iter().all(|(c, v)| a.equalities.get(c) == Some(v))
        && b.ranges.iter().all(|(c, (lo, hi))| a.ranges.get(c).is_some_and(|(alo, ahi)| lo <= alo && ahi <= hi))
}

/// Drops conjunctions implied by another one; the union is unchanged.
pub fn absorb(conjunctions: Vec<Conjunction>) -> Vec<Conjunction> {
    let keep: Vec<bool> = (0..conjunctions.len())
        .map(|i| {
            !conjunctions.iter().enumerate().any(|(j, other)| {
                j != i && implies(&conjunctions[i], other) && (j < i || !implies(other, &conjunctions[i]))
            })
        })
        .collect();
    conjunctions.into_iter().zip(keep).filter_map(|(c, k)| k.then_some(c)).collect()
}

pub fn pairwise_disjoint(conjunctions: &[Conjunction]) -> bool {
    conjunctions.iter().enumerate().all(|(i, a)| conjunctions[i + 1..].iter().all(|b| a.contradicts(b)))
}

fn rule_for(aggregate: Aggregate, terms: &[Term]) -> CombineRule {
    if terms.len() == 1 && terms[0].sign == 1 {
        CombineRule::Single
    } else if aggregate == Aggregate::Avg {
        CombineRule::CountWeightedAvg
    } else {
        CombineRule::SignedSum
    }
}

/// Planner inputs besides the query itself.
#[derive(Debug, Clone, Copy)]
pub struct PlanContext<'a> {
    pub schema: &'a Schema,
    pub encoder: &'a LabelEncoder,
    pub discretizers: &'a [Discretizer],
    pub cap: usize,
}

pub fn plan(ast: &QueryAst, dnf: &Dnf, ctx: PlanContext<'_>) -> Result<QueryPlan, PlanError> {
    let expanded = expand_ranges(dnf, ctx.discretizers);
    let total = expanded.len();
    let satisfiable: Vec<Conjunction> = expanded.into_iter().filter(|c| !c.has_empty_range()).collect();
    let unsatisfiable = total - satisfiable.len();
    let satisfiable = absorb(satisfiable);
    let disjoint = pairwise_disjoint(&satisfiable);
    let terms: Vec<Term> = if disjoint {
        satisfiable.into_iter().map(|conjunction| Term { conjunction, sign: 1 }).collect()
    } else {
        inclusion_exclusion(&satisfiable, ctx.cap)?
    };

    let mut groups = Vec::new();
    if ast.group_by.is_empty() {
        let rule = rule_for(ast.aggregate, &terms);
        groups.push(GroupPlan { key: Vec::new(), terms, rule });
    } else {
        let mut dictionaries = Vec::with_capacity(ast.group_by.len());
        for &c in &ast.group_by {
            let d = ctx
                .encoder
                .dictionary(c)
                .ok_or_else(|| PlanError::MissingDictionary(ctx.schema.name(c).to_owned()))?;
            dictionaries.push(d.values());
        }
        let combos: usize = dictionaries.iter().map(|d| d.len()).product();
        for mut idx in 0..combos {
            let mut key = Vec::with_capacity(dictionaries.len());
            let mut group = Conjunction::default();
            // Last group column varies fastest so keys come out sorted.
            let mut parts = vec![0; dictionaries.len()];
            for (slot, d) in dictionaries.iter().enumerate().rev() {
                parts[slot] = idx % d.len();
                idx /= d.len();
            }
            for (slot, &c) in ast.group_by.iter().enumerate() {
                let v = dictionaries[slot][parts[slot]].clone();
                group.equalities.insert(c, v.clone());
                key.push(v);
            }
            let group_terms: Vec<Term> = terms
                .iter()
                .filter_map(|t| t.conjunction.merge(&group).map(|conjunction| Term { conjunction, sign: t.sign }))
                .collect();
            if group_terms.is_empty() {
                continue;
            }
            let rule = rule_for(ast.aggregate, &group_terms);
            groups.push(GroupPlan { key, terms: group_terms, rule });
        }
    }
    Ok(QueryPlan {
        aggregate: ast.aggregate,
        target: ast.target,
        group_by: ast.group_by.clone(),
        groups,
        order_by: ast.order_by.clone(),
        limit: ast.limit,
        unsatisfiable,
        disjoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sqlfront::{parse, to_dnf, DEFAULT_DNF_CAP};
    use crate::transform::CategoryDictionary;
    use std::collections::BTreeMap;

    fn schema() -> Schema {
        Schema::new(vec![
            ("A", ColumnKind::Categorical),
            ("B", ColumnKind::Categorical),
            ("Month", ColumnKind::Categorical),
            ("V", ColumnKind::Numerical),
        ])
        .unwrap()
    }

    fn encoder() -> LabelEncoder {
        let mut dictionaries = BTreeMap::new();
        dictionaries.insert(0, CategoryDictionary::from_values(["1", "2", "3"]));
        dictionaries.insert(1, CategoryDictionary::from_values(["1", "2", "3"]));
        let months: Vec<String> = (1..=12).map(|m| format!("{m:02}")).collect();
        dictionaries.insert(2, CategoryDictionary::from(months));
        LabelEncoder { dictionaries }
    }

    fn plan_sql(sql: &str) -> QueryPlan {
        let s = schema();
        let ast = parse(sql, &s).unwrap();
        let dnf = to_dnf(ast.predicate.as_ref(), DEFAULT_DNF_CAP).unwrap();
        let enc = encoder();
        plan(&ast, &dnf, PlanContext { schema: &s, encoder: &enc, discretizers: &[], cap: DEFAULT_TERM_CAP }).unwrap()
    }

    #[test]
    fn overlapping_count_uses_inclusion_exclusion() {
        let p = plan_sql("SELECT COUNT(*) FROM t WHERE A = '1' OR B = '2'");
        let g = &p.groups[0];
        assert_eq!(g.rule, CombineRule::SignedSum);
        assert_eq!(
            g.terms,
            vec![
                Term { conjunction: Conjunction::equality(0, "1"), sign: 1 },
                Term { conjunction: Conjunction::equality(1, "2"), sign: 1 },
                Term {
                    conjunction: Conjunction::equality(0, "1").merge(&Conjunction::equality(1, "2")).unwrap(),
                    sign: -1
                },
            ]
        );
    }

    #[test]
    fn disjoint_avg_is_count_weighted() {
        let p = plan_sql("SELECT AVG(V) FROM t WHERE A = '1' OR A = '2'");
        assert!(p.disjoint);
        assert_eq!(p.groups[0].rule, CombineRule::CountWeightedAvg);
        assert_eq!(p.groups[0].terms.len(), 2);
        assert!(p.groups[0].terms.iter().all(|t| t.sign == 1));
    }

    #[test]
    fn group_by_expands_per_category() {
        let p = plan_sql("SELECT Month, AVG(V) FROM t WHERE A = '1' AND B = '2' GROUP BY Month");
        assert_eq!(p.groups.len(), 12);
        for (i, g) in p.groups.iter().enumerate() {
            assert_eq!(g.key, vec![format!("{:02}", i + 1)]);
            assert_eq!(g.rule, CombineRule::Single);
            assert_eq!(g.terms[0].conjunction.equalities.len(), 3);
        }
        let p = plan_sql("SELECT A, COUNT(*) FROM t WHERE A = '2' GROUP BY A");
        assert_eq!(p.groups.len(), 1);
        assert_eq!(p.groups[0].key, vec!["2".to_string()]);
    }

    #[test]
    fn subset_count_for_overlaps() {
        // k mutually compatible conjunctions give 2^k - 1 terms.
        let conj: Vec<Conjunction> = (0..3).map(|c| Conjunction::equality(c, "x")).collect();
        assert_eq!(inclusion_exclusion(&conj, DEFAULT_TERM_CAP).unwrap().len(), 7);
        let many: Vec<Conjunction> = (0..11).map(|c| Conjunction::equality(c, "x")).collect();
        assert!(matches!(inclusion_exclusion(&many, DEFAULT_TERM_CAP), Err(PlanError::DnfBlowup { .. })));
    }

    #[test]
    fn empty_range_is_unsatisfiable() {
        let p = plan_sql("SELECT COUNT(*) FROM t WHERE V BETWEEN 5 AND 1");
        assert_eq!(p.unsatisfiable, 1);
        assert!(p.groups[0].terms.is_empty());
    }

    #[test]
    fn discretizer_covers_ranges() {
        let d = Discretizer { column: 3, aux_column: 4, edges: vec![0.0, 10.0, 20.0, 30.0], upper: 40.0 };
        let pieces = d.expand(f64::NEG_INFINITY, f64::INFINITY);
        assert_eq!(pieces.len(), 4);
        assert!(pieces.iter().all(|(_, r)| r.is_none()));
        let pieces = d.expand(12.0, 20.0);
        assert_eq!(pieces, vec![(Discretizer::label(1), Some((12.0, 20.0))), (Discretizer::label(2), Some((12.0, 20.0)))]);
        let pieces = d.expand(10.0, 25.0);
        assert_eq!(pieces[0], (Discretizer::label(1), None));
        assert_eq!(d.bin_of(-5.0), 0);
        assert_eq!(d.bin_of(35.0), 3);
    }
}
