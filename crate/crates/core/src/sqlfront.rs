//! Parser for the supported SQL subset and the DNF normalizer.
//!
//! Grammar (keywords case-insensitive):
//!
//! ```text
//! query      = "SELECT" select_list "FROM" ident [ "WHERE" or_expr ]
//!              [ "GROUP" "BY" column { "," column } ]
//!              [ "ORDER" "BY" order_key [ "ASC" | "DESC" ] ]
//!              [ "LIMIT" integer ] [ ";" ]
//! select_list = { column "," } aggregate [ "AS" ident ]
//! aggregate  = ( "AVG" | "SUM" ) "(" column ")" | "COUNT" "(" ( "*" | column ) ")"
//! or_expr    = and_expr { "OR" and_expr }
//! and_expr   = atom { "AND" atom }
//! atom       = "(" or_expr ")" | column "=" literal
//!            | column "IN" "(" literal { "," literal } ")"
//!            | column "BETWEEN" number "AND" number
//! order_key  = column | ident (the aggregate alias) | aggregate
//! column     = ident | "`" any text "`"
//! literal    = string | number
//! ```

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Cell, ColumnKind, Schema};

pub const DEFAULT_DNF_CAP: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SqlError {
    #[error("syntax error at byte {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
    #[error("unsupported query: {0}")]
    Unsupported(String),
    #[error("predicate expands to more than {cap} conjunctions")]
    DnfBlowup { cap: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Aggregate {
    Avg,
    Sum,
    Count,
}

impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregate::Avg => "AVG",
            Aggregate::Sum => "SUM",
            Aggregate::Count => "COUNT",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Predicate {
    Eq { column: usize, value: String },
    In { column: usize, values: Vec<String> },
    Between { column: usize, lo: f64, hi: f64 },
    And(Vec<Predicate>),
    Or(Vec<Predicate>),
}

impl Predicate {
    pub fn eval(&self, row: &[Cell]) -> bool {
        match self {
            Predicate::Eq { column, value } => row[*column].as_cat() == Some(value.as_str()),
            Predicate::In { column, values } => {
                row[*column].as_cat().is_some_and(|v| values.iter().any(|x| x == v))
            }
            Predicate::Between { column, lo, hi } => row[*column].as_num().is_some_and(|v| *lo <= v && v <= *hi),
            Predicate::And(children) => children.iter().all(|c| c.eval(row)),
            Predicate::Or(children) => children.iter().any(|c| c.eval(row)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrderKey {
    Group(usize),
    Aggregate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderBy {
    pub key: OrderKey,
    pub descending: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAst {
    pub aggregate: Aggregate,
    /// Aggregated column; `None` for `COUNT(*)`.
    pub target: Option<usize>,
    pub alias: Option<String>,
    /// Plain columns listed before the aggregate in the select list.
    pub select_columns: Vec<usize>,
    pub table: String,
    pub predicate: Option<Predicate>,
    pub group_by: Vec<usize>,
    pub order_by: Option<OrderBy>,
    pub limit: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    QuotedIdent(String),
    Str(String),
    Num(String),
    Sym(char),
    /// Comparison operators the subset rejects (`<`, `<=`, `!=`, ...).
    Op(String),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    pos: usize,
}

fn syntax(position: usize, message: impl Into<String>) -> SqlError {
    SqlError::Syntax { position, message: message.into() }
}

fn lex(sql: &str) -> Result<Vec<Token>, SqlError> {
    let mut out = Vec::new();
    let mut chars = sql.char_indices().peekable();
    while let Some(&(pos, c)) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let mut s = String::new();
            while let Some(&(_, c)) = chars.peek() {
                if c.is_alphanumeric() || c == '_' || c == '.' {
                    s.push(c);
                    chars.next();
                } else {
                    break;
                }
            }
            out.push(Token { tok: Tok::Ident(s), pos });
            continue;
        }
        let starts_number = c.is_ascii_digit()
            || ((c == '-' || c == '.') && {
                let mut look = chars.clone();
                look.next();
                look.peek().is_some_and(|(_, n)| n.is_ascii_digit() || (c == '-' && *n == '.'))
            });
        if starts_number {
            let mut s = String::new();
            s.push(c);
            chars.next();
            while let Some(&(_, c)) = chars.peek() {
                let exp_sign = (c == '-' || c == '+') && s.ends_with(['e', 'E']);
                if c.is_ascii_digit() || c == '.' || c == 'e' || c == 'E' || exp_sign {
                    s.push(c);
                    chars.next();
                } else {
                    break;
                }
            }
            if s.parse::<f64>().is_err() {
                return Err(syntax(pos, format!("malformed number {s:?}")));
            }
            out.push(Token { tok: Tok::Num(s), pos });
            continue;
        }
        match c {
            '\'' | '"' | '`' => {
                chars.next();
                let mut s = String::new();
                loop {
                    match chars.next() {
                        None => return Err(syntax(pos, "unterminated quoted text")),
                        Some((_, q)) if q == c => {
                            if chars.peek().is_some_and(|(_, n)| *n == c) {
                                s.push(c);
                                chars.next();
                            } else {
                                break;
                            }
                        }
                        Some((_, other)) => s.push(other),
                    }
                }
                let tok = if c == '`' { Tok::QuotedIdent(s) } else { Tok::Str(s) };
                out.push(Token { tok, pos });
            }
            '(' | ')' | ',' | '*' | '=' | ';' => {
                chars.next();
                out.push(Token { tok: Tok::Sym(c), pos });
            }
            '<' | '>' | '!' => {
                chars.next();
                let mut op = c.to_string();
                if let Some(&(_, n)) = chars.peek() {
                    if n == '=' || (c == '<' && n == '>') {
                        op.push(n);
                        chars.next();
                    }
                }
                out.push(Token { tok: Tok::Op(op), pos });
            }
            _ => return Err(syntax(pos, format!("unexpected character {c:?}"))),
        }
    }
    Ok(out)
}

const RESERVED: &[&str] = &[
    "SELECT", "FROM", "WHERE", "GROUP", "BY", "ORDER", "LIMIT", "AND", "OR", "IN", "BETWEEN", "AS", "ASC", "DESC",
    "AVG", "SUM", "COUNT", "JOIN", "HAVING", "NOT", "ON", "UNION", "LIKE", "INNER", "LEFT", "RIGHT", "OUTER", "CROSS",
    "DISTINCT", "IS", "NULL",
];

struct Parser<'a> {
    tokens: Vec<Token>,
    idx: usize,
    end: usize,
    schema: &'a Schema,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.idx).map(|t| &t.tok)
    }

    fn pos(&self) -> usize {
        self.tokens.get(self.idx).map_or(self.end, |t| t.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.tokens.get(self.idx).map(|t| t.tok.clone());
        self.idx += 1;
        t
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Ident(s)) if s.eq_ignore_ascii_case(kw))
    }

    fn is_kw_at(&self, offset: usize, kw: &str) -> bool {
        matches!(self.tokens.get(self.idx + offset).map(|t| &t.tok), Some(Tok::Ident(s)) if s.eq_ignore_ascii_case(kw))
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.is_kw(kw) {
            self.idx += 1;
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), SqlError> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            Err(syntax(self.pos(), format!("expected {kw}")))
        }
    }

    fn eat_sym(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Sym(c)) {
            self.idx += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, c: char) -> Result<(), SqlError> {
        if self.eat_sym(c) {
            Ok(())
        } else {
            Err(syntax(self.pos(), format!("expected {c:?}")))
        }
    }

    fn reject_unsupported(&self) -> Result<(), SqlError> {
        for kw in ["JOIN", "HAVING", "NOT", "UNION", "LIKE", "INNER", "LEFT", "RIGHT", "OUTER", "CROSS", "IS"] {
            if self.is_kw(kw) {
                return Err(SqlError::Unsupported(format!("{kw} is not supported")));
            }
        }
        if self.is_kw("SELECT") {
            return Err(SqlError::Unsupported("subqueries are not supported".into()));
        }
        if let Some(Tok::Op(op)) = self.peek() {
            return Err(SqlError::Unsupported(format!("comparison operator {op} is not supported")));
        }
        Ok(())
    }

    /// Identifier text (bare or backtick-quoted), without schema lookup.
    fn ident(&mut self) -> Result<(String, bool), SqlError> {
        self.reject_unsupported()?;
        let pos = self.pos();
        match self.next() {
            Some(Tok::Ident(s)) if !RESERVED.iter().any(|k| s.eq_ignore_ascii_case(k)) => Ok((s, false)),
            Some(Tok::QuotedIdent(s)) => Ok((s, true)),
            _ => Err(syntax(pos, "expected an identifier")),
        }
    }

    fn column(&mut self) -> Result<usize, SqlError> {
        let (name, _) = self.ident()?;
        self.schema.index_of(&name).ok_or(SqlError::UnknownColumn(name))
    }

    fn is_aggregate_start(&self) -> bool {
        (self.is_kw("AVG") || self.is_kw("SUM") || self.is_kw("COUNT"))
            && matches!(self.tokens.get(self.idx + 1).map(|t| &t.tok), Some(Tok::Sym('(')))
    }

    fn aggregate(&mut self) -> Result<(Aggregate, Option<usize>), SqlError> {
        let pos = self.pos();
        let agg = if self.eat_kw("AVG") {
            Aggregate::Avg
        } else if self.eat_kw("SUM") {
            Aggregate::Sum
        } else if self.eat_kw("COUNT") {
            Aggregate::Count
        } else {
            return Err(syntax(pos, "expected AVG, SUM or COUNT"));
        };
        self.expect_sym('(')?;
        if self.is_kw("DISTINCT") {
            return Err(SqlError::Unsupported("DISTINCT aggregates are not supported".into()));
        }
        if self.is_aggregate_start() {
            return Err(SqlError::Unsupported("nested aggregates are not supported".into()));
        }
        let target = if agg == Aggregate::Count && self.eat_sym('*') {
            None
        } else {
            let c = self.column()?;
            if agg != Aggregate::Count && self.schema.kind(c) != ColumnKind::Numerical {
                return Err(SqlError::TypeMismatch(format!(
                    "{agg} needs a numerical column, {:?} is categorical",
                    self.schema.name(c)
                )));
            }
            Some(c)
        };
        self.expect_sym(')')?;
        Ok((agg, target))
    }

    fn literal(&mut self) -> Result<(String, bool), SqlError> {
        self.reject_unsupported()?;
        let pos = self.pos();
        match self.next() {
            Some(Tok::Str(s)) => Ok((s, false)),
            Some(Tok::Num(s)) => Ok((s, true)),
            _ => Err(syntax(pos, "expected a literal")),
        }
    }

    fn category_literal(&mut self, column: usize) -> Result<String, SqlError> {
        if self.schema.kind(column) != ColumnKind::Categorical {
            return Err(SqlError::TypeMismatch(format!(
                "equality on numerical column {:?}; use BETWEEN",
                self.schema.name(column)
            )));
        }
        Ok(self.literal()?.0)
    }

    fn number(&mut self) -> Result<f64, SqlError> {
        let pos = self.pos();
        match self.literal()? {
            (s, true) => s.parse().map_err(|_| syntax(pos, "malformed number")),
            (s, false) => Err(SqlError::TypeMismatch(format!("BETWEEN bound {s:?} is not a number"))),
        }
    }

    fn or_expr(&mut self) -> Result<Predicate, SqlError> {
        let mut items = vec![self.and_expr()?];
        while self.eat_kw("OR") {
            items.push(self.and_expr()?);
        }
        Ok(if items.len() == 1 { items.pop().expect("one item") } else { Predicate::Or(items) })
    }

    fn and_expr(&mut self) -> Result<Predicate, SqlError> {
        let mut items = vec![self.atom()?];
        while self.eat_kw("AND") {
            items.push(self.atom()?);
        }
        Ok(if items.len() == 1 { items.pop().expect("one item") } else { Predicate::And(items) })
    }

    fn atom(&mut self) -> Result<Predicate, SqlError> {
        self.reject_unsupported()?;
        if self.eat_sym('(') {
            let inner = self.or_expr()?;
            self.expect_sym(')')?;
            return Ok(inner);
        }
        let column = self.column()?;
        self.reject_unsupported()?;
        if self.eat_sym('=') {
            let value = self.category_literal(column)?;
            return Ok(Predicate::Eq { column, value });
        }
        if self.eat_kw("IN") {
            if self.schema.kind(column) != ColumnKind::Categorical {
                return Err(SqlError::TypeMismatch(format!("IN on numerical column {:?}", self.schema.name(column))));
            }
            self.expect_sym('(')?;
            let mut values = vec![self.literal()?.0];
            while self.eat_sym(',') {
                values.push(self.literal()?.0);
            }
            self.expect_sym(')')?;
            return Ok(Predicate::In { column, values });
        }
        if self.eat_kw("BETWEEN") {
            if self.schema.kind(column) != ColumnKind::Numerical {
                return Err(SqlError::TypeMismatch(format!(
                    "BETWEEN on categorical column {:?}",
                    self.schema.name(column)
                )));
            }
            let lo = self.number()?;
            self.expect_kw("AND")?;
            let hi = self.number()?;
            return Ok(Predicate::Between { column, lo, hi });
        }
        Err(syntax(self.pos(), "expected =, IN or BETWEEN"))
    }

    fn query(&mut self) -> Result<QueryAst, SqlError> {
        self.expect_kw("SELECT")?;
        let mut select_columns = Vec::new();
        while !self.is_aggregate_start() {
            if self.peek().is_none() || self.is_kw("FROM") {
                return Err(SqlError::Unsupported("the select list needs exactly one aggregate".into()));
            }
            let pos = self.pos();
            let c = self.column()?;
            if !self.eat_sym(',') {
                return Err(if self.is_kw("FROM") || self.peek().is_none() {
                    SqlError::Unsupported("the select list needs exactly one aggregate".into())
                } else {
                    SqlError::Unsupported(format!("select expression at byte {pos} is not supported"))
                });
            }
            select_columns.push(c);
        }
        let (aggregate, target) = self.aggregate()?;
        let alias = if self.eat_kw("AS") { Some(self.ident()?.0) } else { None };
        if self.eat_sym(',') {
            return Err(SqlError::Unsupported("only one aggregate and no trailing select items".into()));
        }
        self.expect_kw("FROM")?;
        if self.eat_sym('(') {
            return Err(SqlError::Unsupported("subqueries are not supported".into()));
        }
        let (table, _) = self.ident()?;
        if self.eat_sym(',') {
            return Err(SqlError::Unsupported("multiple tables are not supported".into()));
        }
        self.reject_unsupported()?;
        let predicate = if self.eat_kw("WHERE") { Some(self.or_expr()?) } else { None };
        self.reject_unsupported()?;
        let mut group_by = Vec::new();
        if self.is_kw("GROUP") {
            self.idx += 1;
            self.expect_kw("BY")?;
            loop {
                let c = self.column()?;
                if self.schema.kind(c) != ColumnKind::Categorical {
                    return Err(SqlError::TypeMismatch(format!(
                        "GROUP BY on numerical column {:?}",
                        self.schema.name(c)
                    )));
                }
                group_by.push(c);
                if !self.eat_sym(',') {
                    break;
                }
            }
        }
        self.reject_unsupported()?;
        for c in &select_columns {
            if !group_by.contains(c) {
                return Err(SqlError::Unsupported(format!(
                    "column {:?} is selected without being grouped",
                    self.schema.name(*c)
                )));
            }
        }
        let order_by = if self.is_kw("ORDER") && self.is_kw_at(1, "BY") {
            self.idx += 2;
            let key = if self.is_aggregate_start() {
                let pos = self.pos();
                let agg = self.aggregate()?;
                if agg != (aggregate, target) {
                    return Err(syntax(pos, "ORDER BY aggregate differs from the selected one"));
                }
                OrderKey::Aggregate
            } else {
                let (name, _) = self.ident()?;
                if alias.as_deref() == Some(name.as_str()) {
                    OrderKey::Aggregate
                } else {
                    let c = self.schema.index_of(&name).ok_or_else(|| SqlError::UnknownColumn(name.clone()))?;
                    if !group_by.contains(&c) {
                        return Err(SqlError::Unsupported(format!(
                            "ORDER BY key {name:?} must be a group-by column or the aggregate"
                        )));
                    }
                    OrderKey::Group(c)
                }
            };
            let descending = if self.eat_kw("DESC") {
                true
            } else {
                self.eat_kw("ASC");
                false
            };
            Some(OrderBy { key, descending })
        } else {
            None
        };
        let limit = if self.eat_kw("LIMIT") {
            let pos = self.pos();
            match self.next() {
                Some(Tok::Num(s)) => match s.parse::<u64>() {
                    Ok(n) if n > 0 => Some(n),
                    _ => return Err(syntax(pos, "LIMIT needs a positive integer")),
                },
                _ => return Err(syntax(pos, "LIMIT needs a positive integer")),
            }
        } else {
            None
        };
        self.reject_unsupported()?;
        self.eat_sym(';');
        if self.idx < self.tokens.len() {
            return Err(syntax(self.pos(), "unexpected trailing input"));
        }
        Ok(QueryAst { aggregate, target, alias, select_columns, table, predicate, group_by, order_by, limit })
    }
}

/// Parses and validates one statement against `schema`.
pub fn parse(sql: &str, schema: &Schema) -> Result<QueryAst, SqlError> {
    let tokens = lex(sql)?;
    let mut parser = Parser { tokens, idx: 0, end: sql.len(), schema };
    parser.query()
}

fn is_plain_ident(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_alphabetic() || c == '_')
        && chars.all(|c| c.is_alphanumeric() || c == '_' || c == '.')
        && !RESERVED.iter().any(|k| s.eq_ignore_ascii_case(k))
}

fn quote_ident(s: &str) -> String {
    if is_plain_ident(s) {
        s.to_owned()
    } else {
        format!("`{}`", s.replace('`', "``"))
    }
}

fn quote_str(s: &str) -> String {
    format!("'{}'", s.replace('\'', "''"))
}

fn render_predicate(p: &Predicate, schema: &Schema, out: &mut String) {
    let col = |c: &usize| quote_ident(schema.name(*c));
    match p {
        Predicate::Eq { column, value } => {
            let _ = write!(out, "{} = {}", col(column), quote_str(value));
        }
        Predicate::In { column, values } => {
            let list: Vec<String> = values.iter().map(|v| quote_str(v)).collect();
            let _ = write!(out, "{} IN ({})", col(column), list.join(", "));
        }
        Predicate::Between { column, lo, hi } => {
            let _ = write!(out, "{} BETWEEN {lo:?} AND {hi:?}", col(column));
        }
        Predicate::And(children) | Predicate::Or(children) => {
            let joiner = if matches!(p, Predicate::And(_)) { " AND " } else { " OR " };
            for (i, child) in children.iter().enumerate() {
                if i > 0 {
                    out.push_str(joiner);
                }
                let nested = matches!(child, Predicate::And(_) | Predicate::Or(_));
                if nested {
                    out.push('(');
                }
                render_predicate(child, schema, out);
                if nested {
                    out.push(')');
                }
            }
        }
    }
}

pub fn render_predicate_sql(p: &Predicate, schema: &Schema) -> String {
    let mut out = String::new();
    render_predicate(p, schema, &mut out);
    out
}

/// Renders the AST back to SQL that parses to an equal AST.
pub fn render(ast: &QueryAst, schema: &Schema) -> String {
    let mut out = String::from("SELECT ");
    for c in &ast.select_columns {
        let _ = write!(out, "{}, ", quote_ident(schema.name(*c)));
    }
    let target = ast.target.map_or_else(|| "*".to_owned(), |c| quote_ident(schema.name(c)));
    let agg = format!("{}({target})", ast.aggregate);
    out.push_str(&agg);
    if let Some(alias) = &ast.alias {
        let _ = write!(out, " AS {}", quote_ident(alias));
    }
    let _ = write!(out, " FROM {}", quote_ident(&ast.table));
    if let Some(p) = &ast.predicate {
        out.push_str(" WHERE ");
        render_predicate(p, schema, &mut out);
    }
    if !ast.group_by.is_empty() {
        let cols: Vec<String> = ast.group_by.iter().map(|c| quote_ident(schema.name(*c))).collect();
        let _ = write!(out, " GROUP BY {}", cols.join(", "));
    }
    if let Some(order) = &ast.order_by {
        let key = match order.key {
            OrderKey::Group(c) => quote_ident(schema.name(c)),
            OrderKey::Aggregate => agg.clone(),
        };
        let _ = write!(out, " ORDER BY {key} {}", if order.descending { "DESC" } else { "ASC" });
    }
    if let Some(n) = ast.limit {
        let _ = write!(out, " LIMIT {n}");
    }
    out
}

/// One AND-term of a DNF: equalities on distinct categorical columns and
/// intersected closed ranges on numerical columns. A range with `lo > hi`
/// is kept and makes the conjunction unsatisfiable.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Conjunction {
    pub equalities: BTreeMap<usize, String>,
    pub ranges: BTreeMap<usize, (f64, f64)>,
}

impl Conjunction {
    pub fn equality(column: usize, value: impl Into<String>) -> Self {
        Conjunction { equalities: BTreeMap::from([(column, value.into())]), ranges: BTreeMap::new() }
    }

    pub fn range(column: usize, lo: f64, hi: f64) -> Self {
        Conjunction { equalities: BTreeMap::new(), ranges: BTreeMap::from([(column, (lo, hi))]) }
    }

    /// Conjunction of both, or `None` when they require different values of
    /// the same column.
    pub fn merge(&self, other: &Conjunction) -> Option<Conjunction> {
        let mut out = self.clone();
        for (c, v) in &other.equalities {
            match out.equalities.get(c) {
                Some(existing) if existing != v => return None,
                Some(_) => {}
                None => {
                    out.equalities.insert(*c, v.clone());
                }
            }
        }
        for (c, (lo, hi)) in &other.ranges {
            out.ranges
                .entry(*c)
                .and_modify(|(a, b)| {
                    *a = a.max(*lo);
                    *b = b.min(*hi);
                })
                .or_insert((*lo, *hi));
        }
        Some(out)
    }

    /// True when some range is empty.
    pub fn has_empty_range(&self) -> bool {
        self.ranges.values().any(|(lo, hi)| lo > hi)
    }

    /// The two conjunctions cannot both hold: they fix a shared column to
    /// different values.
    pub fn contradicts(&self, other: &Conjunction) -> bool {
        self.equalities.iter().any(|(c, v)| other.equalities.get(c).is_some_and(|w| w != v))
    }

    pub fn is_true(&self) -> bool {
        self.equalities.is_empty() && self.ranges.is_empty()
    }

    pub fn matches(&self, row: &[Cell]) -> bool {
        self.equalities.iter().all(|(c, v)| row[*c].as_cat() == Some(v.as_str()))
            && self.ranges.iter().all(|(c, (lo, hi))| row[*c].as_num().is_some_and(|x| *lo <= x && x <= *hi))
    }

    pub fn conditions(&self) -> Vec<(usize, String)> {
        self.equalities.iter().map(|(c, v)| (*c, v.clone())).collect()
    }

    pub fn render(&self, schema: &Schema) -> String {
        let mut parts: Vec<String> = self
            .equalities
            .iter()
            .map(|(c, v)| format!("{} = {}", quote_ident(schema.name(*c)), quote_str(v)))
            .collect();
        parts.extend(
            self.ranges.iter().map(|(c, (lo, hi))| format!("{} BETWEEN {lo:?} AND {hi:?}", quote_ident(schema.name(*c)))),
        );
        if parts.is_empty() {
            "TRUE".into()
        } else {
            parts.join(" AND ")
        }
    }
}

/// OR of conjunctions. `TRUE` is a single empty conjunction, `FALSE` the
/// empty list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dnf {
    pub conjunctions: Vec<Conjunction>,
}

impl Dnf {
    pub fn always() -> Self {
        Dnf { conjunctions: vec![Conjunction::default()] }
    }

    pub fn matches(&self, row: &[Cell]) -> bool {
        self.conjunctions.iter().any(|c| c.matches(row))
    }

    fn dedup(mut self) -> Self {
        let mut out: Vec<Conjunction> = Vec::with_capacity(self.conjunctions.len());
        for c in self.conjunctions.drain(..) {
            if !out.contains(&c) {
                out.push(c);
            }
        }
        Dnf { conjunctions: out }
    }
}

/// Converts a predicate tree to DNF, expanding `IN` lists, dropping
/// contradictory conjunctions and duplicates.
pub fn to_dnf(predicate: Option<&Predicate>, cap: usize) -> Result<Dnf, SqlError> {
    match predicate {
        None => Ok(Dnf::always()),
        Some(p) => dnf_of(p, cap),
    }
}

fn dnf_of(p: &Predicate, cap: usize) -> Result<Dnf, SqlError> {
    let check = |d: Dnf| if d.conjunctions.len() > cap { Err(SqlError::DnfBlowup { cap }) } else { Ok(d) };
    match p {
        Predicate::Eq { column, value } => Ok(Dnf { conjunctions: vec![Conjunction::equality(*column, value.clone())] }),
        Predicate::In { column, values } => check(
            Dnf { conjunctions: values.iter().map(|v| Conjunction::equality(*column, v.clone())).collect() }.dedup(),
        ),
        Predicate::Between { column, lo, hi } => Ok(Dnf { conjunctions: vec![Conjunction::range(*column, *lo, *hi)] }),
        Predicate::Or(children) => {
            let mut all = Vec::new();
            for child in children {
                all.extend(dnf_of(child, cap)?.conjunctions);
                if all.len() > cap * 4 {
                    all = Dnf { conjunctions: all }.dedup().conjunctions;
                }
            }
            check(Dnf { conjunctions: all }.dedup())
        }
        Predicate::And(children) => {
            let mut acc = Dnf::always();
            for child in children {
                let rhs = dnf_of(child, cap)?;
                let mut next = Vec::new();
                for a in &acc.conjunctions {
                    for b in &rhs.conjunctions {
                        if let Some(m) = a.merge(b) {
                            next.push(m);
                        }
                    }
                    if next.len() > cap * 4 {
                        next = Dnf { conjunctions: next }.dedup().conjunctions;
                        if next.len() > cap {
                            return Err(SqlError::DnfBlowup { cap });
                        }
                    }
                }
                acc = check(Dnf { conjunctions: next }.dedup())?;
            }
            Ok(acc)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema::new(vec![
            ("Browser", ColumnKind::Categorical),
            ("OS", ColumnKind::Categorical),
            ("Age", ColumnKind::Categorical),
            ("Month", ColumnKind::Categorical),
            ("Value", ColumnKind::Numerical),
        ])
        .unwrap()
    }

    #[test]
    fn parses_the_example_query() {
        let s = schema();
        let ast = parse(
            "SELECT Month, AVG(Value) FROM T WHERE Browser='Chrome' AND OS='iOS' AND Age='Senior' GROUP BY Month",
            &s,
        )
        .unwrap();
        assert_eq!(ast.aggregate, Aggregate::Avg);
        assert_eq!(ast.target, Some(4));
        assert_eq!(ast.group_by, vec![3]);
        assert_eq!(
            ast.predicate,
            Some(Predicate::And(vec![
                Predicate::Eq { column: 0, value: "Chrome".into() },
                Predicate::Eq { column: 1, value: "iOS".into() },
                Predicate::Eq { column: 2, value: "Senior".into() },
            ]))
        );
    }

    #[test]
    fn count_star_and_keywords_case() {
        let s = schema();
        let ast = parse("select count(*) from t", &s).unwrap();
        assert_eq!(ast.aggregate, Aggregate::Count);
        assert_eq!(ast.target, None);
        assert_eq!(ast.predicate, None);
        let ast = parse(r#"SELECT SUM(Value) AS total FROM t WHERE OS = "iOS";"#, &s).unwrap();
        assert_eq!(ast.alias.as_deref(), Some("total"));
    }

    #[test]
    fn rejects_unsupported_shapes() {
        let s = schema();
        for sql in [
            "SELECT AVG(Value) FROM T JOIN U ON T.a = U.a",
            "SELECT AVG(Value) FROM (SELECT * FROM T)",
            "SELECT OS, AVG(Value) FROM T GROUP BY OS HAVING AVG(Value) = 1",
            "SELECT Browser, AVG(Value) FROM T",
            "SELECT AVG(Value) FROM T WHERE Value < 3",
            "SELECT AVG(Value) FROM T WHERE NOT OS = 'iOS'",
            "SELECT Value FROM T",
        ] {
            assert!(matches!(parse(sql, &s), Err(SqlError::Unsupported(_))), "{sql}");
        }
    }

    #[test]
    fn type_and_name_errors() {
        let s = schema();
        assert!(matches!(parse("SELECT AVG(Nope) FROM T", &s), Err(SqlError::UnknownColumn(_))));
        assert!(matches!(parse("SELECT AVG(OS) FROM T", &s), Err(SqlError::TypeMismatch(_))));
        assert!(matches!(parse("SELECT COUNT(*) FROM T WHERE OS BETWEEN 1 AND 2", &s), Err(SqlError::TypeMismatch(_))));
        assert!(matches!(parse("SELECT COUNT(*) FROM T WHERE Value = 3", &s), Err(SqlError::TypeMismatch(_))));
        assert!(matches!(parse("SELECT COUNT(*) FROM T GROUP BY Value", &s), Err(SqlError::TypeMismatch(_))));
        assert!(matches!(parse("SELECT COUNT(*) FROM", &s), Err(SqlError::Syntax { .. })));
        assert!(matches!(parse("SELECT COUNT(*) FROM T WHERE OS = 'x", &s), Err(SqlError::Syntax { .. })));
        assert!(matches!(parse("SELECT COUNT(*) FROM T LIMIT 0", &s), Err(SqlError::Syntax { .. })));
    }

    #[test]
    fn order_by_and_limit() {
        let s = schema();
        let ast = parse("SELECT OS, COUNT(*) AS c FROM T GROUP BY OS ORDER BY c DESC LIMIT 3", &s).unwrap();
        assert_eq!(ast.order_by, Some(OrderBy { key: OrderKey::Aggregate, descending: true }));
        assert_eq!(ast.limit, Some(3));
        let ast = parse("SELECT OS, AVG(Value) FROM T GROUP BY OS ORDER BY OS", &s).unwrap();
        assert_eq!(ast.order_by, Some(OrderBy { key: OrderKey::Group(1), descending: false }));
        assert!(parse("SELECT OS, AVG(Value) FROM T GROUP BY OS ORDER BY Month", &s).is_err());
    }

    #[test]
    fn dnf_examples() {
        let a1 = Predicate::Eq { column: 0, value: "1".into() };
        let a2 = Predicate::Eq { column: 0, value: "2".into() };
        let b2 = Predicate::Eq { column: 1, value: "2".into() };
        let c3 = Predicate::Eq { column: 2, value: "3".into() };
        let p = Predicate::And(vec![a1.clone(), Predicate::Or(vec![b2.clone(), c3.clone()])]);
        let d = to_dnf(Some(&p), DEFAULT_DNF_CAP).unwrap();
        assert_eq!(
            d.conjunctions,
            vec![
                Conjunction::equality(0, "1").merge(&Conjunction::equality(1, "2")).unwrap(),
                Conjunction::equality(0, "1").merge(&Conjunction::equality(2, "3")).unwrap(),
            ]
        );
        let p = Predicate::In { column: 0, values: vec!["1".into(), "2".into()] };
        assert_eq!(
            to_dnf(Some(&p), DEFAULT_DNF_CAP).unwrap().conjunctions,
            vec![Conjunction::equality(0, "1"), Conjunction::equality(0, "2")]
        );
        let p = Predicate::Or(vec![Predicate::And(vec![a1, a2]), b2]);
        assert_eq!(to_dnf(Some(&p), DEFAULT_DNF_CAP).unwrap().conjunctions, vec![Conjunction::equality(1, "2")]);
        assert_eq!(to_dnf(None, DEFAULT_DNF_CAP).unwrap(), Dnf::always());
    }

    #[test]
    fn dnf_cap_is_enforced() {
        let ins: Vec<Predicate> = (0..4)
            .map(|c| Predicate::In { column: c, values: (0..8).map(|v| v.to_string()).collect() })
            .collect();
        let p = Predicate::And(ins);
        assert_eq!(to_dnf(Some(&p), DEFAULT_DNF_CAP), Err(SqlError::DnfBlowup { cap: DEFAULT_DNF_CAP }));
        assert_eq!(to_dnf(Some(&p), 4096).unwrap().conjunctions.len(), 4096);
    }

    #[test]
    fn ranges_intersect() {
        let p = Predicate::And(vec![
            Predicate::Between { column: 4, lo: 0.0, hi: 10.0 },
            Predicate::Between { column: 4, lo: 5.0, hi: 20.0 },
        ]);
        let d = to_dnf(Some(&p), DEFAULT_DNF_CAP).unwrap();
        assert_eq!(d.conjunctions, vec![Conjunction::range(4, 5.0, 10.0)]);
        let p = Predicate::Between { column: 4, lo: 3.0, hi: 1.0 };
        assert!(to_dnf(Some(&p), DEFAULT_DNF_CAP).unwrap().conjunctions[0].has_empty_range());
    }
}
