//! SQL scripts reproducing a plan's forward pass, plus loaders for its inputs.
//!
//! Nodes with a `table` become `CREATE TABLE ... AS SELECT` statements; the
//! primitives between two materialized nodes are fused into that statement.
//!
//! Every emitted table follows one convention: a coordinate without a row has
//! value 0. Tables known to hold a row for every coordinate are tracked as
//! *full*; operations whose result at a missing row would not be 0 (`exp`,
//! `MAX`, dense `COUNT`) are only emitted over full inputs, and `densify`
//! produces a full table by left-joining onto a generated coordinate grid.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plan::{InputRole, NodeId, Op, Plan, Relations};
use crate::relcore::{Agg, GroupKey, IndexSchema, OutputColumn, ScalarFn, Side, TensorRelation};

/// Spelling profile of the target engine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dialect {
    /// Two-argument `MAX`, recursive CTEs, multi-row `VALUES`.
    #[default]
    EmbeddedDefault,
    /// `CASE` for relu, a numbers table for grids, one row per `INSERT`.
    StrictSql92,
}

impl Dialect {
    pub const ALL: [Dialect; 2] = [Dialect::EmbeddedDefault, Dialect::StrictSql92];

    pub fn as_str(self) -> &'static str {
        match self {
            Dialect::EmbeddedDefault => "embedded-default",
            Dialect::StrictSql92 => "strict-sql92",
        }
    }
}

impl fmt::Display for Dialect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dialect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Dialect::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::InvalidParams(format!("unknown dialect `{s}` (expected embedded-default or strict-sql92)")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Statement {
    pub comment: Vec<String>,
    pub sql: String,
    /// Table created by this statement, if any.
    pub creates: Option<String>,
}

/// An ordered list of statements; rendering is deterministic.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SqlScript {
    pub dialect: Dialect,
    pub statements: Vec<Statement>,
    /// Tables holding the value of a plan node, in creation order.
    pub node_tables: Vec<(String, NodeId)>,
}

impl SqlScript {
    fn new(dialect: Dialect) -> Self {
        SqlScript { dialect, statements: Vec::new(), node_tables: Vec::new() }
    }

    fn push(&mut self, comment: Vec<String>, sql: String, creates: Option<&str>) {
        self.statements.push(Statement { comment, sql, creates: creates.map(str::to_string) });
    }

    /// The statement creating `table`.
    pub fn creating(&self, table: &str) -> Option<&Statement> {
        self.statements.iter().find(|s| s.creates.as_deref() == Some(table))
    }

    pub fn render(&self) -> String {
        let mut out = format!("-- dialect: {}\n", self.dialect);
        for s in &self.statements {
            out.push('\n');
            for c in &s.comment {
                out.push_str("-- ");
                out.push_str(c);
                out.push('\n');
            }
            out.push_str(&s.sql);
            out.push_str(";\n");
        }
        out
    }
}

impl fmt::Display for SqlScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

fn unsupported(node: &str, why: impl fmt::Display) -> Error {
    Error::UnsupportedNode(format!("`{node}`: {why}"))
}

/// Exact, round-trippable literal for a value.
fn real(x: f64) -> String {
    format!("{x:?}")
}

// ---------------------------------------------------------------------------
// Query model

#[derive(Clone, Debug, PartialEq)]
struct Ref {
    item: usize,
    col: String,
}

/// `(offset + Σ k·ref) / div`.
#[derive(Clone, Debug, PartialEq)]
struct Index {
    terms: Vec<(Ref, i64)>,
    offset: i64,
    div: Option<i64>,
}

impl Index {
    fn col(item: usize, col: &str) -> Self {
        Index { terms: vec![(Ref { item, col: col.into() }, 1)], offset: 0, div: None }
    }

    fn as_ref(&self) -> Option<&Ref> {
        match (self.terms.as_slice(), self.offset, self.div) {
            ([(r, 1)], 0, None) => Some(r),
            _ => None,
        }
    }

    fn shift(&mut self, by: usize) {
        for (r, _) in &mut self.terms {
            r.item += by;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Val {
    Col(Ref),
    Num(f64),
    Mul(Box<Val>, Box<Val>),
    Add(Box<Val>, Box<Val>),
    Quot(Box<Val>, Box<Val>),
    Apply(ScalarFn, Box<Val>),
    Sum(Box<Val>),
    Max(Box<Val>),
    Count(Box<Val>),
    Coalesce(Box<Val>),
}

impl Val {
    fn shift(&mut self, by: usize) {
        match self {
            Val::Col(r) => r.item += by,
            Val::Num(_) => {}
            Val::Mul(a, b) | Val::Add(a, b) | Val::Quot(a, b) => {
                a.shift(by);
                b.shift(by);
            }
            Val::Apply(_, a) | Val::Sum(a) | Val::Max(a) | Val::Count(a) | Val::Coalesce(a) => a.shift(by),
        }
    }

    fn mul(a: Val, b: Val) -> Val {
        match (a, b) {
            (Val::Num(x), v) | (v, Val::Num(x)) if x == 1.0 => v,
            (a, b) => Val::Mul(Box::new(a), Box::new(b)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Cond {
    Eq(Index, Index),
    Between(Index, i64, i64),
}

impl Cond {
    fn shift(&mut self, by: usize) {
        match self {
            Cond::Eq(a, b) => {
                a.shift(by);
                b.shift(by);
            }
            Cond::Between(a, _, _) => a.shift(by),
        }
    }
}

#[derive(Clone, Debug)]
struct Item {
    /// Table name or parenthesized subquery.
    source: String,
    /// Name used to qualify columns.
    name: String,
    columns: Vec<String>,
    /// `Some` for a `LEFT JOIN ... ON`.
    on: Option<Vec<Cond>>,
}

/// Which coordinates are guaranteed to have a row.
#[derive(Clone, Debug, PartialEq)]
enum Cover {
    Partial,
    Full,
    /// Exactly one row for each assignment of the other columns.
    OnePer(String),
}

#[derive(Clone, Debug)]
struct Query {
    items: Vec<Item>,
    conds: Vec<Cond>,
    cols: Vec<(Index, String)>,
    val: Val,
    group: Option<Vec<Index>>,
    cover: Cover,
    /// `(key, dependent)` output columns of a one-hot source.
    one_hot: Option<(String, String)>,
}

impl Query {
    fn source(table: &str, sql_cols: &[String], names: &[String], val: Val, cover: Cover) -> Query {
        let mut columns = sql_cols.to_vec();
        if let Val::Col(r) = &val {
            columns.push(r.col.clone());
        }
        Query {
            items: vec![Item { source: table.into(), name: table.into(), columns, on: None }],
            conds: vec![],
            cols: sql_cols.iter().zip(names).map(|(s, n)| (Index::col(0, s), n.clone())).collect(),
            val,
            group: None,
            cover,
            one_hot: None,
        }
    }

    fn col(&self, name: &str) -> Result<&Index> {
        self.cols
            .iter()
            .find(|(_, n)| n == name)
            .map(|(e, _)| e)
            .ok_or_else(|| Error::UnknownColumn(name.into()))
    }

    fn has_left_join(&self) -> bool {
        self.items.iter().any(|i| i.on.is_some())
    }

    /// A single bare table with plain column references.
    fn is_table(&self) -> bool {
        self.items.len() == 1
            && self.conds.is_empty()
            && self.group.is_none()
            && self.cols.iter().all(|(e, _)| e.as_ref().is_some())
            && matches!(self.val, Val::Col(_) | Val::Num(_))
    }

    fn shift(&mut self, by: usize) {
        for (e, _) in &mut self.cols {
            e.shift(by);
        }
        for c in &mut self.conds {
            c.shift(by);
        }
        for it in &mut self.items {
            for c in it.on.iter_mut().flatten() {
                c.shift(by);
            }
        }
        self.val.shift(by);
        for g in self.group.iter_mut().flatten() {
            g.shift(by);
        }
    }
}

// ---------------------------------------------------------------------------
// Rendering

struct Render<'q> {
    q: &'q Query,
    dialect: Dialect,
}

impl Render<'_> {
    fn name(&self, r: &Ref) -> String {
        let shared = self.q.items.iter().filter(|i| i.columns.contains(&r.col)).count();
        if shared > 1 {
            format!("{}.{}", self.q.items[r.item].name, r.col)
        } else {
            r.col.clone()
        }
    }

    fn affine(&self, e: &Index) -> String {
        let mut terms: Vec<(String, i64)> = e.terms.iter().map(|(r, k)| (self.name(r), *k)).collect();
        terms.sort_by(|a, b| b.1.abs().cmp(&a.1.abs()));
        let horner = terms.len() > 1
            && terms.iter().all(|(_, k)| *k > 0)
            && terms.windows(2).all(|w| w[0].1 % w[1].1 == 0 && w[0].1 > w[1].1);
        let mut s = String::new();
        if horner {
            // ((t0 * k0/k1 + t1) * k1/k2 + t2) ... * k_last
            s = terms[0].0.clone();
            for w in terms.windows(2) {
                let f = w[0].1 / w[1].1;
                s = format!("{} * {f} + {}", paren_if(&s, s.contains(" + ")), w[1].0);
            }
            let last = terms.last().unwrap().1;
            if last != 1 {
                s = format!("({s}) * {last}");
            }
        } else {
            for (i, (t, k)) in terms.iter().enumerate() {
                let mag = if k.abs() == 1 { t.clone() } else { format!("{} * {t}", k.abs()) };
                match (i, *k < 0) {
                    (0, false) => s.push_str(&mag),
                    (0, true) => s.push_str(&format!("-{mag}")),
                    (_, false) => s.push_str(&format!(" + {mag}")),
                    (_, true) => s.push_str(&format!(" - {mag}")),
                }
            }
        }
        if e.offset != 0 || s.is_empty() {
            s = match (s.is_empty(), e.offset < 0) {
                (true, _) => e.offset.to_string(),
                (false, false) => format!("{s} + {}", e.offset),
                (false, true) => format!("{s} - {}", -e.offset),
            };
        }
        match e.div {
            Some(d) => format!("{} / {d}", paren_if(&s, s.contains(' '))),
            None => s,
        }
    }

    fn cond(&self, c: &Cond) -> String {
        match c {
            Cond::Eq(a, b) => format!("{} = {}", self.affine(a), self.affine(b)),
            Cond::Between(a, lo, hi) => format!("{} BETWEEN {lo} AND {hi}", self.affine(a)),
        }
    }

    /// Rendered value with its precedence: 3 atom, 2 product, 1 sum.
    fn val(&self, v: &Val) -> (String, u8) {
        let atom = |s: String| (s, 3);
        let arg = |v: &Val| self.val(v).0;
        let at = |v: &Val, p: u8| {
            let (s, q) = self.val(v);
            if q < p {
                format!("({s})")
            } else {
                s
            }
        };
        match v {
            Val::Col(r) => atom(self.name(r)),
            Val::Num(x) => atom(real(*x)),
            Val::Mul(a, b) => (format!("{} * {}", at(a, 2), at(b, 3)), 2),
            Val::Quot(a, b) => (format!("{} / {}", at(a, 2), at(b, 3)), 2),
            Val::Add(a, b) => (format!("{} + {}", at(a, 1), at(b, 2)), 1),
            Val::Sum(a) => atom(format!("SUM({})", arg(a))),
            Val::Max(a) => atom(format!("MAX({})", arg(a))),
            Val::Count(a) => atom(format!("COUNT({})", arg(a))),
            Val::Coalesce(a) => atom(format!("COALESCE({}, 0)", arg(a))),
            Val::Apply(f, a) => match f {
                ScalarFn::Relu => match self.dialect {
                    Dialect::EmbeddedDefault => atom(format!("MAX(0, {})", arg(a))),
                    Dialect::StrictSql92 => {
                        let x = at(a, 3);
                        atom(format!("CASE WHEN {x} > 0 THEN {x} ELSE 0 END"))
                    }
                },
                ScalarFn::Exp => atom(format!("EXP({})", arg(a))),
                ScalarFn::Log => atom(format!("LN({})", arg(a))),
                ScalarFn::Negate => (format!("-{}", at(a, 3)), 2),
                ScalarFn::AddConst(c) => (format!("{} + {}", at(a, 1), real(*c)), 1),
                ScalarFn::MulConst(c) => (format!("{} * {}", real(*c), at(a, 3)), 2),
                ScalarFn::Step => atom(format!("CASE WHEN {} > 0 THEN 1.0 ELSE 0.0 END", at(a, 3))),
                ScalarFn::Reciprocal => (format!("1.0 / {}", at(a, 3)), 2),
                ScalarFn::Const(c) => atom(real(*c)),
            },
        }
    }

    fn select(&self, value_column: &str) -> String {
        let q = self.q;
        let mut sel: Vec<String> = q
            .cols
            .iter()
            .map(|(e, n)| match e.as_ref() {
                Some(r) if &r.col == n => self.name(r),
                _ => format!("{} AS {n}", self.affine(e)),
            })
            .collect();
        let v = self.val(&q.val).0;
        sel.push(if v == value_column { v } else { format!("{v} AS {value_column}") });
        let mut s = format!("SELECT {}\nFROM ", sel.join(", "));
        let left = q.has_left_join();
        for (i, it) in q.items.iter().enumerate() {
            let src = if it.source == it.name { it.name.clone() } else { format!("{} AS {}", it.source, it.name) };
            match (&it.on, i) {
                (None, 0) => s.push_str(&src),
                (None, _) if left => s.push_str(&format!("\nCROSS JOIN {src}")),
                (None, _) => s.push_str(&format!(", {src}")),
                (Some(on), _) => {
                    let on: Vec<String> = on.iter().map(|c| self.cond(c)).collect();
                    s.push_str(&format!("\nLEFT JOIN {src} ON {}", on.join(" AND ")));
                }
            }
        }
        if !q.conds.is_empty() {
            let w: Vec<String> = q.conds.iter().map(|c| self.cond(c)).collect();
            s.push_str(&format!("\nWHERE {}", w.join("\n  AND ")));
        }
        if let Some(g) = &q.group {
            if !g.is_empty() {
                let g: Vec<String> = g.iter().map(|e| self.affine(e)).collect();
                s.push_str(&format!("\nGROUP BY {}", g.join(", ")));
            }
        }
        s
    }
}

fn paren_if(s: &str, cond: bool) -> String {
    if cond {
        format!("({s})")
    } else {
        s.to_string()
    }
}

// ---------------------------------------------------------------------------
// Emission

struct Emitter<'p> {
    plan: &'p Plan,
    dialect: Dialect,
    script: SqlScript,
    subqueries: usize,
    grids: BTreeSet<String>,
    numbers: usize,
}

impl Emitter<'_> {
    /// Turns `q` into a single derived-table item.
    fn wrap(&mut self, q: Query) -> Query {
        if q.is_table() {
            return q;
        }
        self.subqueries += 1;
        let alias = format!("q{}", self.subqueries);
        let body = Render { q: &q, dialect: self.dialect }.select("val");
        let names: Vec<String> = q.cols.iter().map(|(_, n)| n.clone()).collect();
        let mut out = Query::source(
            &alias,
            &names,
            &names,
            Val::Col(Ref { item: 0, col: "val".into() }),
            q.cover,
        );
        out.items[0].source = format!("({})", body.replace('\n', "\n  "));
        out
    }

    fn flat(&mut self, q: Query) -> Query {
        if q.group.is_some() {
            self.wrap(q)
        } else {
            q
        }
    }

    fn grid(&mut self, scope: &str, schema: &IndexSchema) -> String {
        let base = format!("{scope}_grid");
        let mut name = base.clone();
        let mut k = 2;
        while self.grids.contains(&name) || self.plan.node_by_table(&name).is_some() || self.plan.data_decl(&name).is_some() {
            name = format!("{base}_{k}");
            k += 1;
        }
        self.grids.insert(name.clone());
        let cols = schema.columns();
        let sql = match self.dialect {
            Dialect::EmbeddedDefault => {
                let ctes: Vec<String> = cols
                    .iter()
                    .map(|c| {
                        format!(
                            "{n}_range({n}) AS (SELECT {lo} UNION ALL SELECT {n} + 1 FROM {n}_range WHERE {n} < {hi})",
                            n = c.name,
                            lo = c.start,
                            hi = c.last()
                        )
                    })
                    .collect();
                let names: Vec<&str> = cols.iter().map(|c| c.name.as_str()).collect();
                let ranges: Vec<String> = names.iter().map(|n| format!("{n}_range")).collect();
                format!(
                    "CREATE TABLE {name} AS\nWITH RECURSIVE\n  {}\nSELECT {}\nFROM {}",
                    ctes.join(",\n  "),
                    names.join(", "),
                    ranges.join(", ")
                )
            }
            Dialect::StrictSql92 => {
                let mut sel = Vec::new();
                let mut from = Vec::new();
                let mut wh = Vec::new();
                for (i, c) in cols.iter().enumerate() {
                    self.numbers = self.numbers.max(c.domain_size);
                    let shift = match c.start {
                        0 => String::new(),
                        s if s < 0 => format!(" - {}", -s),
                        s => format!(" + {s}"),
                    };
                    sel.push(format!("n{i}.n{shift} AS {}", c.name));
                    from.push(format!("grid_numbers AS n{i}"));
                    wh.push(format!("n{i}.n < {}", c.domain_size));
                }
                let mut s = format!("CREATE TABLE {name} AS\nSELECT {}\nFROM {}", sel.join(", "), from.join(", "));
                if !wh.is_empty() {
                    s.push_str(&format!("\nWHERE {}", wh.join(" AND ")));
                }
                s
            }
        };
        self.script.push(
            vec![
                format!("every coordinate of {}, so that empty groups still receive a row", scope),
            ],
            sql,
            Some(&name),
        );
        name
    }

    fn source(&self, id: NodeId) -> Query {
        let node = self.plan.node(id);
        let names: Vec<String> = node.schema.names().map(str::to_string).collect();
        let table = node.table.as_deref().unwrap_or(&node.name);
        let val = Val::Col(Ref { item: 0, col: node.value_column.clone() });
        let role = match &node.op {
            Op::Data { name } => self.plan.data_decl(name).map(|d| d.role),
            _ => None,
        };
        match role {
            Some(InputRole::Labels) if names.len() == 2 => {
                let sql = vec![names[0].clone(), "label".to_string()];
                let mut q = Query::source(table, &sql, &names, Val::Num(1.0), Cover::Partial);
                q.one_hot = Some((names[0].clone(), names[1].clone()));
                q
            }
            Some(InputRole::Selection) if names.len() == 2 => {
                let mut q = Query::source(table, &names, &names, val, Cover::Partial);
                q.one_hot = Some((names[0].clone(), names[1].clone()));
                q
            }
            _ => Query::source(table, &names, &names, val, Cover::Partial),
        }
    }

    fn translate(&mut self, id: NodeId, qs: &[Query]) -> Result<Query> {
        let node = self.plan.node(id);
        let out_names: Vec<String> = node.schema.names().map(str::to_string).collect();
        let inputs: Vec<&IndexSchema> = node.inputs.iter().map(|i| &self.plan.node(*i).schema).collect();
        let nm = node.name.as_str();
        Ok(match &node.op {
            Op::Data { .. } | Op::Param { .. } => unreachable!("sources are not translated"),
            Op::Join { equalities, output } => {
                let a = self.flat(qs[0].clone());
                let mut b = self.flat(qs[1].clone());
                b.shift(a.items.len());
                let cover = join_cover(&a, &b, equalities, output);
                let mut q = a.clone();
                q.items.extend(b.items.iter().cloned());
                q.conds.extend(b.conds.iter().cloned());
                for (ca, cb) in equalities {
                    q.conds.push(Cond::Eq(a.col(ca)?.clone(), b.col(cb)?.clone()));
                }
                q.cols = output
                    .iter()
                    .map(|o| {
                        let src = if o.side == Side::Left { &a } else { &b };
                        Ok((src.col(&o.column)?.clone(), o.alias.clone()))
                    })
                    .collect::<Result<_>>()?;
                q.val = Val::mul(a.val, b.val);
                q.cover = cover;
                q.one_hot = None;
                q
            }
            Op::JoinAdd { equalities, .. } => {
                let coordinatewise = equalities.len() == inputs[0].len() && equalities.len() == inputs[1].len();
                let (drive_left, mut d, other) = if qs[0].cover == Cover::Full {
                    (true, qs[0].clone(), qs[1].clone())
                } else if qs[1].cover == Cover::Full && coordinatewise {
                    (false, qs[1].clone(), qs[0].clone())
                } else {
                    return Err(unsupported(nm, "broadcast addition needs a full left operand"));
                };
                d = self.flat(d);
                let mut o = self.wrap(other);
                o.shift(d.items.len());
                // Columns of the driving side that each column of the other side is equated with.
                let pairs: Vec<(Index, Index)> = equalities
                    .iter()
                    .map(|(ca, cb)| {
                        let (cd, co) = if drive_left { (ca, cb) } else { (cb, ca) };
                        Ok((d.col(cd)?.clone(), o.col(co)?.clone()))
                    })
                    .collect::<Result<_>>()?;
                let other_val = if o.cover == Cover::Full { o.val.clone() } else { Val::Coalesce(Box::new(o.val.clone())) };
                let mut item = o.items[0].clone();
                let inner = o.cover == Cover::Full && !d.has_left_join();
                if inner {
                    d.conds.extend(pairs.into_iter().map(|(x, y)| Cond::Eq(x, y)));
                } else {
                    item.on = Some(pairs.into_iter().map(|(x, y)| Cond::Eq(x, y)).collect());
                }
                d.items.push(item);
                let a_names: Vec<String> = inputs[0].names().map(str::to_string).collect();
                let cols: Vec<(Index, String)> = if drive_left {
                    d.cols.iter().map(|(e, _)| e.clone()).zip(out_names.iter().cloned()).collect()
                } else {
                    // The left operand's columns, read from the right side they are equated with.
                    a_names
                        .iter()
                        .zip(&out_names)
                        .map(|(an, on)| {
                            let (_, cb) = equalities.iter().find(|(ca, _)| ca == an).expect("coordinatewise");
                            Ok((d.col(cb)?.clone(), on.clone()))
                        })
                        .collect::<Result<_>>()?
                };
                d.val = if drive_left {
                    Val::Add(Box::new(d.val), Box::new(other_val))
                } else {
                    Val::Add(Box::new(other_val), Box::new(d.val))
                };
                d.cols = cols;
                d.cover = Cover::Full;
                d.one_hot = None;
                d
            }
            Op::Reindex { exprs, keep } => {
                let mut q = self.flat(qs[0].clone());
                let touches_div = exprs
                    .iter()
                    .flat_map(|e| e.terms.iter().map(|(c, _)| c))
                    .any(|c| q.col(c).map(|e| e.div.is_some()).unwrap_or(false));
                if touches_div {
                    q = self.wrap(q);
                }
                let mut cols = Vec::new();
                for k in keep {
                    cols.push((q.col(k)?.clone(), k.clone()));
                }
                for e in exprs {
                    let mut acc = Index { terms: vec![], offset: e.offset, div: None };
                    for (c, k) in &e.terms {
                        let src = q.col(c)?;
                        acc.offset += k * src.offset;
                        for (r, kk) in &src.terms {
                            match acc.terms.iter_mut().find(|(r2, _)| r2 == r) {
                                Some((_, w)) => *w += k * kk,
                                None => acc.terms.push((r.clone(), k * kk)),
                            }
                        }
                    }
                    acc.terms.retain(|(_, k)| *k != 0);
                    cols.push((acc, e.target.clone()));
                }
                q.cols = cols;
                q.cover = Cover::Partial;
                q.one_hot = None;
                q
            }
            Op::Filter { column, lo, hi } => {
                let mut q = self.flat(qs[0].clone());
                let pos = q.cols.iter().position(|(_, n)| n == column).ok_or_else(|| Error::UnknownColumn(column.clone()))?;
                if q.cols[pos].0.div.is_some() {
                    q = self.wrap(q);
                }
                q.conds.push(Cond::Between(q.cols[pos].0.clone(), *lo, *hi));
                q.cols[pos].0.offset -= lo;
                if q.cover == Cover::OnePer(column.clone()) {
                    q.cover = Cover::Partial;
                }
                q.one_hot = None;
                q
            }
            Op::Aggregate { keys, agg } => {
                let mut q = self.flat(qs[0].clone());
                if keys.iter().any(|k| k.divisor.is_some() && q.col(&k.column).map(|e| e.div.is_some()).unwrap_or(false)) {
                    q = self.wrap(q);
                }
                let x = inputs[0];
                let mut group = Vec::new();
                let mut cols = Vec::new();
                for k in keys {
                    let mut e = q.col(&k.column)?.clone();
                    if let Some(d) = k.divisor {
                        if x.column(&k.column)?.start < 0 {
                            return Err(unsupported(nm, format!("division of `{}`, which can be negative", k.column)));
                        }
                        e.div = Some(d);
                    }
                    group.push(e.clone());
                    cols.push((e, k.output_name().to_string()));
                }
                let cover = agg_cover(&q.cover, keys, *agg);
                let dense_count = group_count(x, keys);
                let v = Box::new(q.val.clone());
                q.val = match agg {
                    Agg::Sum if q.cover != Cover::Full && keys.is_empty() => Val::Coalesce(Box::new(Val::Sum(v))),
                    Agg::Sum => Val::Sum(v),
                    Agg::Max if q.cover == Cover::Full => Val::Max(v),
                    Agg::Avg if q.cover == Cover::Full => Val::Quot(Box::new(Val::Sum(v.clone())), Box::new(Val::Count(v))),
                    Agg::Avg => match dense_count {
                        Some(n) => Val::Quot(Box::new(Val::Coalesce(Box::new(Val::Sum(v)))), Box::new(Val::Num(n as f64))),
                        None => return Err(unsupported(nm, "average over groups of unequal size")),
                    },
                    Agg::Count => match dense_count {
                        Some(n) => Val::Num(n as f64),
                        None => return Err(unsupported(nm, "count over groups of unequal size")),
                    },
                    Agg::Max => return Err(unsupported(nm, "MAX over a table with missing rows")),
                };
                q.cols = cols;
                q.group = Some(group);
                q.cover = cover;
                q.one_hot = None;
                q
            }
            Op::Map { f } => {
                let mut q = qs[0].clone();
                if f.apply(0.0).ok() != Some(0.0) && q.cover != Cover::Full {
                    return Err(unsupported(nm, format!("{f:?} of a table with missing rows")));
                }
                q.val = Val::Apply(*f, Box::new(q.val));
                if q.cover != Cover::Full {
                    q.cover = Cover::Partial;
                }
                q.one_hot = None;
                q
            }
            Op::Densify => {
                let scope = nm.split('/').next().unwrap_or(nm).to_string();
                let grid = self.grid(&scope, &node.schema);
                let mut x = self.wrap(qs[0].clone());
                x.shift(1);
                let on: Vec<Cond> = out_names
                    .iter()
                    .zip(&x.cols)
                    .map(|(n, (e, _))| Cond::Eq(Index::col(0, n), e.clone()))
                    .collect();
                let mut item = x.items[0].clone();
                item.on = Some(on);
                Query {
                    items: vec![
                        Item { source: grid.clone(), name: grid, columns: out_names.clone(), on: None },
                        item,
                    ],
                    conds: vec![],
                    cols: out_names.iter().map(|n| (Index::col(0, n), n.clone())).collect(),
                    val: Val::Coalesce(Box::new(x.val)),
                    group: None,
                    cover: Cover::Full,
                    one_hot: None,
                }
            }
        })
    }
}

/// Coverage of a join: full inputs stay full; a full input contracted with a
/// one-hot input has one row per assignment of the other columns.
fn join_cover(a: &Query, b: &Query, equalities: &[(String, String)], output: &[OutputColumn]) -> Cover {
    if a.cover == Cover::Full && b.cover == Cover::Full {
        return Cover::Full;
    }
    let pick = |full: &Query, hot: &Query, full_side: Side| -> Option<Cover> {
        let (_, dep) = hot.one_hot.as_ref()?;
        if full.cover != Cover::Full {
            return None;
        }
        let (fa, hb) = equalities.iter().find(|(x, y)| if full_side == Side::Left { y == dep } else { x == dep })?;
        let (full_col, hot_col) = if full_side == Side::Left { (fa, hb) } else { (hb, fa) };
        let out = output.iter().find(|o| {
            (o.side == full_side && &o.column == full_col) || (o.side != full_side && &o.column == hot_col)
        })?;
        Some(Cover::OnePer(out.alias.clone()))
    };
    pick(a, b, Side::Left).or_else(|| pick(b, a, Side::Right)).unwrap_or(Cover::Partial)
}

fn agg_cover(input: &Cover, keys: &[GroupKey], agg: Agg) -> Cover {
    match input {
        Cover::Full => Cover::Full,
        Cover::OnePer(c) if agg == Agg::Sum && keys.iter().all(|k| &k.column != c && k.divisor.is_none()) => Cover::Full,
        _ => Cover::Partial,
    }
}

/// Dense group cardinality when every group has the same size.
fn group_count(x: &IndexSchema, keys: &[GroupKey]) -> Option<usize> {
    let mut n = 1usize;
    for c in x.columns() {
        match keys.iter().find(|k| k.column == c.name) {
            None => n = n.checked_mul(c.domain_size)?,
            Some(k) => {
                if let Some(d) = k.divisor {
                    if c.domain_size % d as usize != 0 || c.start != 0 {
                        return None;
                    }
                    n = n.checked_mul(d as usize)?;
                }
            }
        }
    }
    Some(n)
}

/// Forward script: one `CREATE TABLE ... AS SELECT` per materialized node,
/// then a final `SELECT` of the output.
pub fn emit_forward_sql(plan: &Plan, dialect: Dialect) -> Result<SqlScript> {
    let mut e = Emitter { plan, dialect, script: SqlScript::new(dialect), subqueries: 0, grids: BTreeSet::new(), numbers: 0 };
    let mut queries: Vec<Query> = Vec::with_capacity(plan.nodes.len());
    for (id, node) in plan.nodes.iter().enumerate() {
        if node.op.kind().is_none() {
            queries.push(e.source(id));
            continue;
        }
        if node.schema.names().any(|n| n == node.value_column) {
            return Err(unsupported(&node.name, format!("index column named like the value column `{}`", node.value_column)));
        }
        let ins: Vec<Query> = node.inputs.iter().map(|i| queries[*i].clone()).collect();
        let q = e.translate(id, &ins)?;
        let q = match &node.table {
            Some(t) => {
                let body = Render { q: &q, dialect }.select(&node.value_column);
                let mut comment = Vec::new();
                if matches!(q.items.first(), Some(it) if e.grids.contains(&it.name)) {
                    comment.push("rows come from the coordinate grid, so groups with no input rows still get their bias".into());
                }
                e.script.push(comment, format!("CREATE TABLE {t} AS\n{body}"), Some(t));
                e.script.node_tables.push((t.clone(), id));
                let names: Vec<String> = node.schema.names().map(str::to_string).collect();
                Query::source(t, &names, &names, Val::Col(Ref { item: 0, col: node.value_column.clone() }), q.cover)
            }
            None => q,
        };
        queries.push(q);
    }
    let out = plan.node(plan.output);
    let out_table = match (&out.table, out.op.kind()) {
        (Some(t), Some(_)) => t.clone(),
        _ => {
            let name = (1..)
                .map(|i| if i == 1 { "output".to_string() } else { format!("output_{i}") })
                .find(|n| plan.node_by_table(n).is_none() && !e.grids.contains(n))
                .unwrap();
            let q = queries[plan.output].clone();
            let body = Render { q: &q, dialect }.select(&out.value_column);
            e.script.push(vec![], format!("CREATE TABLE {name} AS\n{body}"), Some(&name));
            e.script.node_tables.push((name.clone(), plan.output));
            name
        }
    };
    e.script.push(vec![], format!("SELECT * FROM {out_table}"), None);
    if e.numbers > 0 {
        let mut pre = SqlScript::new(dialect);
        pre.push(vec!["0 .. n-1, used to build coordinate grids".into()], "CREATE TABLE grid_numbers (n INTEGER)".into(), Some("grid_numbers"));
        for i in 0..e.numbers {
            pre.push(vec![], format!("INSERT INTO grid_numbers VALUES ({i})"), None);
        }
        pre.statements.append(&mut e.script.statements);
        e.script.statements = pre.statements;
    }
    Ok(e.script)
}

// ---------------------------------------------------------------------------
// Data

/// How one relation is laid out as a table.
#[derive(Clone, Copy, Debug)]
struct Layout<'a> {
    value_column: &'a str,
    /// `(row, label)` integers instead of a one-hot matrix.
    labels: bool,
}

fn create_table(name: &str, rel: &TensorRelation, lay: Layout) -> String {
    let mut cols: Vec<String> = rel.schema().names().map(|n| format!("{n} INTEGER")).collect();
    if lay.labels {
        cols[1] = "label INTEGER".into();
    } else {
        cols.push(format!("{} REAL", lay.value_column));
    }
    format!("CREATE TABLE {name} ({})", cols.join(", "))
}

fn rows(name: &str, rel: &TensorRelation, lay: Layout) -> Result<Vec<String>> {
    let fmt_row = |c: &[i64], v: f64| {
        let mut parts: Vec<String> = c.iter().map(i64::to_string).collect();
        if !lay.labels {
            parts.push(real(v));
        }
        format!("({})", parts.join(", "))
    };
    if lay.labels {
        let ok = rel.default_value() == 0.0 && rel.entries().iter().all(|(_, v)| *v == 1.0);
        let mut seen = BTreeSet::new();
        if !ok || !rel.entries().iter().all(|(c, _)| seen.insert(c[0])) {
            return Err(Error::UnsupportedNode(format!("labels `{name}` are not one-hot")));
        }
        return Ok(rel.entries().iter().map(|(c, v)| fmt_row(c, *v)).collect());
    }
    if rel.default_value() == 0.0 {
        return Ok(rel.entries().iter().map(|(c, v)| fmt_row(c, *v)).collect());
    }
    let mut out = Vec::new();
    rel.schema().for_each_coord(|c| out.push(fmt_row(c, rel.get(c))));
    Ok(out)
}

fn table_statements(s: &mut SqlScript, name: &str, rel: &TensorRelation, lay: Layout) -> Result<()> {
    let domains: Vec<String> = rel
        .schema()
        .columns()
        .iter()
        .map(|c| if c.start == 0 { format!("{}={}", c.name, c.domain_size) } else { format!("{}={}..{}", c.name, c.start, c.last()) })
        .collect();
    let mut comment = vec![format!("{name}: default {}, domains {}", real(rel.default_value()), domains.join(", "))];
    if rel.default_value() != 0.0 && !lay.labels {
        comment.push("nonzero default: every coordinate is written".into());
    }
    if lay.labels {
        comment.push("one-hot labels stored as (row, label) pairs".into());
    }
    s.push(comment, create_table(name, rel, lay), Some(name));
    let rows = rows(name, rel, lay)?;
    match s.dialect {
        Dialect::EmbeddedDefault => {
            for chunk in rows.chunks(500) {
                s.push(vec![], format!("INSERT INTO {name} VALUES\n  {}", chunk.join(",\n  ")), None);
            }
        }
        Dialect::StrictSql92 => {
            for r in rows {
                s.push(vec![], format!("INSERT INTO {name} VALUES {r}"), None);
            }
        }
    }
    Ok(())
}

/// `CREATE TABLE` plus `INSERT`s for stored entries, value column `val`.
pub fn emit_data_sql(relations: &Relations, dialect: Dialect) -> Result<SqlScript> {
    let mut s = SqlScript::new(dialect);
    for (name, rel) in relations {
        table_statements(&mut s, name, rel, Layout { value_column: "val", labels: false })?;
    }
    Ok(s)
}

/// Loader for everything a plan reads, with each table laid out the way the
/// forward script expects.
pub fn emit_inputs_sql(plan: &Plan, data: &Relations, params: &Relations, dialect: Dialect) -> Result<SqlScript> {
    let mut s = SqlScript::new(dialect);
    for (id, node) in plan.nodes.iter().enumerate() {
        let (name, rel, labels) = match &node.op {
            Op::Data { name } => {
                let r = data.get(name).ok_or_else(|| Error::MissingInput(format!("data relation `{name}` is not bound")))?;
                (name, r, plan.data_decl(name).map(|d| d.role) == Some(InputRole::Labels))
            }
            Op::Param { name } => {
                let r = params.get(name).ok_or_else(|| Error::MissingInput(format!("parameter relation `{name}` is not bound")))?;
                (name, r, false)
            }
            _ => continue,
        };
        let table = node.table.as_deref().unwrap_or(name);
        table_statements(&mut s, table, rel, Layout { value_column: &node.value_column, labels })?;
        s.node_tables.push((table.to_string(), id));
    }
    Ok(s)
}

/// Just the `CREATE TABLE` statements of [`emit_inputs_sql`].
pub fn emit_schema_sql(plan: &Plan, dialect: Dialect) -> SqlScript {
    let mut s = SqlScript::new(dialect);
    for node in &plan.nodes {
        let name = match &node.op {
            Op::Data { name } | Op::Param { name } => name,
            _ => continue,
        };
        let labels = matches!(&node.op, Op::Data { .. }) && plan.data_decl(name).map(|d| d.role) == Some(InputRole::Labels);
        let rel = TensorRelation::empty(node.schema.clone(), 0.0);
        let table = node.table.as_deref().unwrap_or(name);
        s.push(vec![], create_table(table, &rel, Layout { value_column: &node.value_column, labels }), Some(table));
    }
    s
}

/// The three scripts for one model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelScripts {
    pub schema: SqlScript,
    pub data: SqlScript,
    pub forward: SqlScript,
}

impl ModelScripts {
    pub fn emit(plan: &Plan, data: &Relations, params: &Relations, dialect: Dialect) -> Result<Self> {
        Ok(ModelScripts {
            schema: emit_schema_sql(plan, dialect),
            data: emit_inputs_sql(plan, data, params, dialect)?,
            forward: emit_forward_sql(plan, dialect)?,
        })
    }

    /// Writes `<model>_schema.sql`, `<model>_data.sql` and `<model>_forward.sql`.
    pub fn write(&self, dir: &Path, model: &str) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for (suffix, s) in [("schema", &self.schema), ("data", &self.data), ("forward", &self.forward)] {
            let p = dir.join(format!("{model}_{suffix}.sql"));
            fs::write(&p, s.render())?;
            paths.push(p);
        }
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{build_model, ModelSpec};
    use crate::plan::PlanBuilder;

    fn squash(s: &str) -> String {
        s.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn full_cnn_conv_statement() {
        let plan = build_model(&ModelSpec::full_cnn(2)).unwrap();
        let s = emit_forward_sql(&plan, Dialect::EmbeddedDefault).unwrap();
        let conv = squash(&s.creating("conv1_unbiased").unwrap().sql);
        assert_eq!(
            conv,
            "CREATE TABLE conv1_unbiased AS SELECT image, out_channel AS channel, samples.r - conv1_weight.r AS r1, \
             samples.c - conv1_weight.c AS c1, SUM(val * weight) AS val FROM samples, conv1_weight \
             WHERE channel = in_channel AND samples.r - conv1_weight.r BETWEEN 0 AND 27 \
             AND samples.c - conv1_weight.c BETWEEN 0 AND 27 \
             GROUP BY image, out_channel, samples.r - conv1_weight.r, samples.c - conv1_weight.c"
        );
        let pool = squash(&s.creating("pool1_out").unwrap().sql);
        assert_eq!(
            pool,
            "CREATE TABLE pool1_out AS SELECT image, channel, r / 2 AS r, c / 2 AS c, MAX(val) AS val \
             FROM relu1_out GROUP BY image, channel, r / 2, c / 2"
        );
        let flat = squash(&s.creating("flatten_out").unwrap().sql);
        assert_eq!(flat, "CREATE TABLE flatten_out AS SELECT image, (channel * 5 + r) * 5 + c AS i, val FROM pool2_out");
        let relu = squash(&s.creating("relu1_out").unwrap().sql);
        assert_eq!(relu, "CREATE TABLE relu1_out AS SELECT image, channel, r, c, MAX(0, val) AS val FROM conv1_out");
        let r = squash(&s.creating("x_ent_losses_r").unwrap().sql);
        assert_eq!(r, "CREATE TABLE x_ent_losses_r AS SELECT image, LN(SUM(EXP(val))) AS r FROM fc3_out GROUP BY image");
        let l = squash(&s.creating("x_ent_losses_l").unwrap().sql);
        assert_eq!(
            l,
            "CREATE TABLE x_ent_losses_l AS SELECT fc3_out.image, -SUM(val) AS l FROM fc3_out, labels \
             WHERE fc3_out.image = labels.image AND i = label GROUP BY fc3_out.image"
        );
        let both = squash(&s.creating("x_ent_losses").unwrap().sql);
        assert_eq!(
            both,
            "CREATE TABLE x_ent_losses AS SELECT x_ent_losses_l.image, l + r AS val FROM x_ent_losses_l, x_ent_losses_r \
             WHERE x_ent_losses_l.image = x_ent_losses_r.image"
        );
        let mean = squash(&s.creating("x_ent_loss").unwrap().sql);
        assert_eq!(mean, "CREATE TABLE x_ent_loss AS SELECT SUM(val) / COUNT(val) AS val FROM x_ent_losses");
    }

    #[test]
    fn gcn_statements() {
        let plan = build_model(&ModelSpec::gcn(6, 4, 3, 2, 3)).unwrap();
        let s = emit_forward_sql(&plan, Dialect::EmbeddedDefault).unwrap();
        let mid = squash(&s.creating("gc1_mid").unwrap().sql);
        assert_eq!(
            mid,
            "CREATE TABLE gc1_mid AS SELECT samples.i, gc1_w.j, SUM(val * weight) AS val FROM samples, gc1_w \
             WHERE samples.j = gc1_w.i GROUP BY samples.i, gc1_w.j"
        );
        let agg = squash(&s.creating("gc1_agg").unwrap().sql);
        assert_eq!(
            agg,
            "CREATE TABLE gc1_agg AS SELECT adj.i, gc1_mid.j, SUM(adj.val * gc1_mid.val) AS val FROM adj, gc1_mid \
             WHERE adj.j = gc1_mid.i GROUP BY adj.i, gc1_mid.j"
        );
        let out = squash(&s.creating("gc1_out").unwrap().sql);
        assert!(out.contains("FROM gc1_grid LEFT JOIN gc1_agg ON"), "{out}");
        assert!(out.contains("COALESCE(val, 0) + COALESCE(bias, 0) AS val"), "{out}");
    }

    #[test]
    fn strict_dialect_avoids_two_argument_max() {
        let plan = build_model(&ModelSpec::small_cnn(2, 1, 8, 2)).unwrap();
        let s = emit_forward_sql(&plan, Dialect::StrictSql92).unwrap().render();
        assert!(s.contains("CASE WHEN val > 0 THEN val ELSE 0 END"));
        assert!(!s.contains("MAX(0,"));
        assert!(!s.contains("RECURSIVE"));
        assert!(s.contains("CREATE TABLE grid_numbers (n INTEGER)"));
    }

    #[test]
    fn identity_plan_is_a_single_pass_through() {
        let spec = ModelSpec { layers: vec![], ..ModelSpec::small_cnn(2, 1, 8, 2) };
        let plan = build_model(&spec).unwrap();
        let s = emit_forward_sql(&plan, Dialect::EmbeddedDefault).unwrap();
        let creates: Vec<_> = s.statements.iter().filter(|s| s.creates.is_some()).collect();
        assert_eq!(creates.len(), 1);
        assert_eq!(squash(&creates[0].sql), "CREATE TABLE output AS SELECT image, channel, r, c, val FROM samples");
    }

    #[test]
    fn data_script_is_sparse() {
        let s = IndexSchema::of(&[("i", 4)]).unwrap();
        let three = TensorRelation::new(s.clone(), 0.0, vec![([0i64], 1.5), ([1], -2.0), ([3], 1e-7)]).unwrap();
        let rels = Relations::from([("x".to_string(), three), ("e".to_string(), TensorRelation::empty(s, 0.0))]);
        let strict = emit_data_sql(&rels, Dialect::StrictSql92).unwrap();
        let inserts = |t: &str| strict.statements.iter().filter(|s| s.sql.starts_with(&format!("INSERT INTO {t} "))).count();
        assert_eq!(inserts("x"), 3);
        assert_eq!(inserts("e"), 0);
        assert!(strict.creating("e").is_some());
        assert!(strict.render().contains("(3, 1e-7)"));
    }

    #[test]
    fn exp_of_sparse_input_is_unsupported() {
        let mut b = PlanBuilder::new();
        let x = b.data("x", IndexSchema::of(&[("i", 3)]).unwrap(), InputRole::Features).unwrap();
        let e = b.map(x, ScalarFn::Exp).unwrap();
        b.materialize(e, "ex", "val");
        let plan = b.finish(e, None, false);
        assert_eq!(emit_forward_sql(&plan, Dialect::EmbeddedDefault).unwrap_err().kind(), "UnsupportedNode");
    }

    #[test]
    fn emission_is_deterministic() {
        let plan = build_model(&ModelSpec::full_cnn(2)).unwrap();
        let a = emit_forward_sql(&plan, Dialect::EmbeddedDefault).unwrap().render();
        let b = emit_forward_sql(&plan, Dialect::EmbeddedDefault).unwrap().render();
        assert_eq!(a, b);
    }

    #[test]
    fn dialect_names_round_trip() {
        for d in Dialect::ALL {
            assert_eq!(d.as_str().parse::<Dialect>().unwrap(), d);
        }
        assert!("mysql".parse::<Dialect>().is_err());
    }
}
