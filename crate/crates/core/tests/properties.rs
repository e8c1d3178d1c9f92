mod common;

use std::collections::BTreeMap;

use aqp_core::dataset::{compute_strata, Cell, ColumnKind, Table};
use aqp_core::engine::{AqpBackend, ExactBackend};
use aqp_core::evalharness::oracle_execute;
use aqp_core::masking::{random_mask, stratified_mask, MaskKind, MaskPolicy};
use aqp_core::planner::{absorb, inclusion_exclusion, plan, PlanContext, DEFAULT_TERM_CAP};
use aqp_core::rng::seeded;
use aqp_core::sqlfront::{parse, render, to_dnf, Aggregate, Conjunction, OrderKey, Predicate, QueryAst, DEFAULT_DNF_CAP};
use aqp_core::transform::Transformer;
use common::{random_predicate, random_query, toy_schema, toy_table};
use proptest::prelude::*;

fn grid_rows() -> Vec<Vec<Cell>> {
    let mut rows = Vec::new();
    for a in ["a", "b", "c", "zz"] {
        for b in ["a", "b", "c"] {
            for n in -1..=6 {
                for m in [-2.5, -2.0, 0.0, 2.5, 5.5] {
                    rows.push(vec![Cell::Cat(a.into()), Cell::Cat(b.into()), Cell::Num(f64::from(n)), Cell::Num(m)]);
                }
            }
        }
    }
    rows
}

/// Independent evaluator: direct recursion over the tree, then grouping by
/// sorting instead of hashing.
fn naive_eval(p: &Predicate, row: &[Cell]) -> bool {
    match p {
        Predicate::Eq { column, value } => matches!(&row[*column], Cell::Cat(v) if v == value),
        Predicate::In { column, values } => values.iter().any(|v| matches!(&row[*column], Cell::Cat(x) if x == v)),
        Predicate::Between { column, lo, hi } => matches!(row[*column], Cell::Num(x) if *lo <= x && x <= *hi),
        Predicate::And(c) => c.iter().all(|q| naive_eval(q, row)),
        Predicate::Or(c) => c.iter().any(|q| naive_eval(q, row)),
    }
}

fn key_text(cell: &Cell) -> String {
    match cell {
        Cell::Cat(s) => s.clone(),
        Cell::Num(x) => format!("{x:?}"),
    }
}

fn naive_groups(ast: &QueryAst, table: &Table) -> BTreeMap<Vec<String>, f64> {
    let mut kept: Vec<(Vec<String>, f64)> = table
        .rows()
        .iter()
        .filter(|r| ast.predicate.as_ref().is_none_or(|p| naive_eval(p, r)))
        .map(|r| (ast.group_by.iter().map(|c| key_text(&r[*c])).collect(), ast.target.map_or(0.0, |t| r[t].as_num().unwrap())))
        .collect();
    kept.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = BTreeMap::new();
    for chunk in kept.chunk_by(|a, b| a.0 == b.0) {
        let n = chunk.len() as f64;
        let s: f64 = chunk.iter().map(|x| x.1).sum();
        let v = match ast.aggregate {
            Aggregate::Count => n,
            Aggregate::Sum => s,
            Aggregate::Avg => s / n,
        };
        out.insert(chunk[0].0.clone(), v);
    }
    if ast.group_by.is_empty() && ast.aggregate == Aggregate::Count && out.is_empty() {
        out.insert(Vec::new(), 0.0);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn transform_round_trips_rows(seed in any::<u64>(), rows in 30usize..120) {
        let table = toy_table(rows, &mut seeded(seed));
        let t = Transformer::fit(&table).unwrap();
        for row in table.rows() {
            let back = t.decode_row(&t.encode_row(row).unwrap()).unwrap();
            for (c, (a, b)) in row.iter().zip(&back).enumerate() {
                match (a, b) {
                    (Cell::Cat(x), Cell::Cat(y)) => prop_assert_eq!(x, y),
                    (Cell::Num(x), Cell::Num(y)) => prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "column {c}: {x} vs {y}"),
                    _ => prop_assert!(false, "cell kind changed"),
                }
            }
        }
    }

    #[test]
    fn dnf_matches_the_tree(seed in any::<u64>()) {
        let p = random_predicate(&mut seeded(seed), 3);
        let dnf = to_dnf(Some(&p), 1 << 16).unwrap();
        for row in grid_rows() {
            prop_assert_eq!(dnf.matches(&row), naive_eval(&p, &row));
        }
    }

    #[test]
    fn signed_terms_count_each_row_once(seed in any::<u64>()) {
        let p = random_predicate(&mut seeded(seed), 2);
        let dnf = to_dnf(Some(&p), DEFAULT_DNF_CAP).unwrap();
        let conj: Vec<Conjunction> = dnf.conjunctions.iter().filter(|c| !c.has_empty_range()).cloned().collect();
        let absorbed = absorb(conj.clone());
        let terms = inclusion_exclusion(&absorbed, DEFAULT_TERM_CAP).unwrap();
        for row in grid_rows() {
            let any = conj.iter().any(|c| c.matches(&row));
            prop_assert_eq!(absorbed.iter().any(|c| c.matches(&row)), any);
            let signed: i32 = terms.iter().filter(|t| t.conjunction.matches(&row)).map(|t| t.sign).sum();
            prop_assert_eq!(signed, i32::from(any));
        }
    }

    #[test]
    fn plans_cover_exactly_the_matching_rows(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let table = toy_table(60, &mut rng);
        let ast = random_query(&mut rng);
        let backend = ExactBackend::new(table.clone()).unwrap();
        let dnf = to_dnf(ast.predicate.as_ref(), DEFAULT_DNF_CAP).unwrap();
        let schema = toy_schema();
        let ctx = PlanContext { schema: &schema, encoder: backend.encoder(), discretizers: &[], cap: DEFAULT_TERM_CAP };
        let Ok(plan) = plan(&ast, &dnf, ctx) else { return Ok(()) };
        for row in table.rows() {
            let wanted = ast.predicate.as_ref().is_none_or(|p| naive_eval(p, row));
            let key: Vec<String> = ast.group_by.iter().map(|c| key_text(&row[*c])).collect();
            let signed: i32 = plan
                .groups
                .iter()
                .filter(|g| g.key == key)
                .flat_map(|g| &g.terms)
                .filter(|t| t.conjunction.matches(row))
                .map(|t| t.sign)
                .sum();
            prop_assert_eq!(signed, i32::from(wanted));
        }
    }

    #[test]
    fn render_then_parse_is_identity(seed in any::<u64>()) {
        let ast = random_query(&mut seeded(seed));
        let schema = toy_schema();
        let sql = render(&ast, &schema);
        let back = parse(&sql, &schema).unwrap();
        prop_assert_eq!(render(&back, &schema), sql.clone());
        prop_assert_eq!(back, ast, "{}", sql);
    }

    #[test]
    fn parser_never_panics(s in "\\PC{0,80}") {
        let _ = parse(&s, &toy_schema());
    }

    #[test]
    fn parser_survives_token_soup(tokens in proptest::collection::vec(
        prop::sample::select(vec![
            "SELECT", "AVG(", "SUM(", "COUNT(*)", "N", "A", "B", ")", "(", ",", "FROM", "t", "WHERE", "AND", "OR",
            "=", "'a'", "IN", "BETWEEN", "1", "-2.5", "GROUP BY", "ORDER BY", "DESC", "LIMIT", "3", "'", "\"", "JOIN",
        ]),
        0..25,
    )) {
        let _ = parse(&tokens.join(" "), &toy_schema());
    }

    #[test]
    fn stratified_masks_obey_counts(seed in any::<u64>(), b in 1usize..80, r in 0.0f64..=1.0) {
        let mut rng = seeded(seed);
        let table = toy_table(120, &mut rng);
        let strata = compute_strata(&table).unwrap();
        let rows: Vec<usize> = (0..b).collect();
        let mask = stratified_mask(&table, &rows, r, &strata, &mut rng).unwrap();
        let expected = (r * b as f64).floor() as usize;
        for c in 0..table.schema().len() {
            let sum = mask.column_sum(c);
            match table.schema().kind(c) {
                ColumnKind::Numerical => prop_assert_eq!(sum, b),
                ColumnKind::Categorical => prop_assert_eq!(sum, expected),
            }
        }
    }

    #[test]
    fn masks_are_reproducible(seed in any::<u64>(), kind in prop::sample::select(vec![MaskKind::Stratified, MaskKind::Random, MaskKind::None])) {
        let table = toy_table(50, &mut seeded(1));
        let strata = compute_strata(&table).unwrap();
        let rows: Vec<usize> = (0..50).collect();
        let policy = MaskPolicy::new(kind, 0.5).unwrap();
        let a = policy.mask(&table, &rows, Some(&strata), &mut seeded(seed)).unwrap();
        let b = policy.mask(&table, &rows, Some(&strata), &mut seeded(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn random_mask_extremes(seed in any::<u64>(), rows in 1usize..40, cols in 1usize..6) {
        let mut rng = seeded(seed);
        prop_assert_eq!(random_mask(rows, cols, 0.0, &mut rng).unwrap().total(), 0);
        prop_assert_eq!(random_mask(rows, cols, 1.0, &mut rng).unwrap().total(), rows * cols);
    }

    #[test]
    fn oracle_agrees_with_naive_evaluator(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let table = toy_table(80, &mut rng);
        let mut ast = random_query(&mut rng);
        ast.order_by = None;
        ast.limit = None;
        let exact = oracle_execute(&ast, &table);
        let naive = naive_groups(&ast, &table);
        if ast.group_by.is_empty() {
            prop_assert_eq!(exact.scalar(), naive.get(&Vec::new()).copied());
        } else {
            let got = exact.groups();
            prop_assert_eq!(got.len(), naive.len());
            for (k, v) in &naive {
                prop_assert!((got[k] - v).abs() <= 1e-9 * v.abs().max(1.0));
            }
        }
    }

    #[test]
    fn ordering_respects_the_order_key(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let table = toy_table(80, &mut rng);
        let ast = random_query(&mut rng);
        let Some(order) = &ast.order_by else { return Ok(()) };
        let exact = oracle_execute(&ast, &table);
        for w in exact.rows.windows(2) {
            let ord = match order.key {
                OrderKey::Aggregate => w[0].1.unwrap_or(f64::NAN).total_cmp(&w[1].1.unwrap_or(f64::NAN)),
                OrderKey::Group(c) => {
                    let slot = ast.group_by.iter().position(|g| *g == c).unwrap();
                    w[0].0[slot].cmp(&w[1].0[slot])
                }
            };
            let ord = if order.descending { ord.reverse() } else { ord };
            prop_assert!(ord.then_with(|| w[0].0.cmp(&w[1].0)).is_le());
        }
    }
}
