//! Shared fixtures: a small mixed table, random predicate trees and random
//! queries for differential testing.

#![allow(dead_code)]

use aqp_core::dataset::{Cell, ColumnKind, Schema, Table};
use aqp_core::sqlfront::{Aggregate, OrderBy, OrderKey, Predicate, QueryAst};
use rand::seq::IndexedRandom;
use rand::Rng;

pub const CAT_VALUES: [&str; 3] = ["a", "b", "c"];
/// Predicate constants include a value that never occurs in the data.
pub const CAT_CONSTANTS: [&str; 4] = ["a", "b", "c", "zz"];

/// Columns: `A`, `B` categorical over {a, b, c}; `N`, `M` numerical on the
/// integer grid 0..=5 so BETWEEN bounds hit ties.
pub fn toy_schema() -> Schema {
    Schema::new(vec![
        ("A", ColumnKind::Categorical),
        ("B", ColumnKind::Categorical),
        ("N", ColumnKind::Numerical),
        ("M", ColumnKind::Numerical),
    ])
    .unwrap()
}

pub fn toy_table<R: Rng>(rows: usize, rng: &mut R) -> Table {
    let rows = (0..rows)
        .map(|_| {
            // Skewed first column so groups differ in size.
            let a = if rng.random_bool(0.6) { "a" } else { CAT_VALUES[rng.random_range(1..3)] };
            vec![
                Cell::Cat(a.into()),
                Cell::Cat(CAT_VALUES.choose(rng).unwrap().to_string()),
                Cell::Num(f64::from(rng.random_range(0..=5))),
                Cell::Num(f64::from(rng.random_range(0..=5)) * 1.5 - 2.0),
            ]
        })
        .collect();
    Table::new(toy_schema(), rows).unwrap()
}

fn leaf<R: Rng>(rng: &mut R) -> Predicate {
    match rng.random_range(0..3) {
        0 => Predicate::Eq { column: rng.random_range(0..2), value: CAT_CONSTANTS.choose(rng).unwrap().to_string() },
        1 => {
            let n = rng.random_range(1..=3);
            let values = CAT_CONSTANTS.choose_multiple(rng, n).map(|s| s.to_string()).collect();
            Predicate::In { column: rng.random_range(0..2), values }
        }
        _ => {
            let lo = f64::from(rng.random_range(-1..=5));
            let hi = if rng.random_bool(0.1) { lo - 1.0 } else { lo + f64::from(rng.random_range(0..=4)) };
            Predicate::Between { column: rng.random_range(2..4), lo, hi }
        }
    }
}

/// Random tree over the toy schema with at most `depth` levels of AND/OR.
pub fn random_predicate<R: Rng>(rng: &mut R, depth: usize) -> Predicate {
    if depth == 0 || rng.random_bool(0.35) {
        return leaf(rng);
    }
    let children = (0..rng.random_range(2..=3)).map(|_| random_predicate(rng, depth - 1)).collect();
    if rng.random_bool(0.5) {
        Predicate::And(children)
    } else {
        Predicate::Or(children)
    }
}

/// Random query over the toy schema covering every clause the parser accepts.
pub fn random_query<R: Rng>(rng: &mut R) -> QueryAst {
    let aggregate = *[Aggregate::Avg, Aggregate::Sum, Aggregate::Count].choose(rng).unwrap();
    let target = (aggregate != Aggregate::Count).then(|| rng.random_range(2..4));
    let group_by: Vec<usize> = match rng.random_range(0..4) {
        0 | 1 => Vec::new(),
        2 => vec![rng.random_range(0..2)],
        _ => vec![0, 1],
    };
    let order_by = (!group_by.is_empty() && rng.random_bool(0.5)).then(|| OrderBy {
        key: if rng.random_bool(0.5) { OrderKey::Aggregate } else { OrderKey::Group(*group_by.choose(rng).unwrap()) },
        descending: rng.random_bool(0.5),
    });
    let limit = (!group_by.is_empty() && rng.random_bool(0.3)).then(|| rng.random_range(1..=4));
    QueryAst {
        aggregate,
        target,
        alias: None,
        select_columns: group_by.clone(),
        table: "t".into(),
        predicate: rng.random_bool(0.9).then(|| random_predicate(rng, 2)),
        group_by,
        order_by,
        limit,
    }
}

/// `|a - g| <= tol * max(1, |g|)`.
pub fn close(a: f64, g: f64, tol: f64) -> bool {
    (a - g).abs() <= tol * g.abs().max(1.0)
}
