//! The relational primitives. Every function is pure and defined by dense
//! semantics: applying it to a sparse relation and then expanding to a dense
//! array gives the same numbers as expanding first and applying the textbook
//! tensor operation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::affine::AffineIndexExpr;
use super::relation::{dense_size_capped, Coord, TensorRelation, DEFAULT_DENSE_CAP};
use super::scalar::ScalarFn;
use super::schema::{for_each_in_box, Column, IndexSchema};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

/// One column of a join result: which operand it comes from and its name there.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputColumn {
    pub side: Side,
    pub column: String,
    pub alias: String,
}

impl OutputColumn {
    pub fn left(column: &str, alias: &str) -> Self {
        OutputColumn { side: Side::Left, column: column.into(), alias: alias.into() }
    }

    pub fn right(column: &str, alias: &str) -> Self {
        OutputColumn { side: Side::Right, column: column.into(), alias: alias.into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Agg {
    Sum,
    Max,
    Avg,
    Count,
}

/// A grouping column, optionally collapsed by floor division (`r / 2 AS r`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupKey {
    pub column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divisor: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alias: Option<String>,
}

impl GroupKey {
    pub fn col(column: &str) -> Self {
        GroupKey { column: column.into(), divisor: None, alias: None }
    }

    pub fn alias(column: &str, alias: &str) -> Self {
        GroupKey { column: column.into(), divisor: None, alias: Some(alias.into()) }
    }

    pub fn div(column: &str, divisor: i64) -> Self {
        GroupKey { column: column.into(), divisor: Some(divisor), alias: None }
    }

    pub fn output_name(&self) -> &str {
        self.alias.as_deref().unwrap_or(&self.column)
    }
}

pub(crate) type Equalities = [(String, String)];

/// Builds `(String, String)` equality pairs from string slices.
pub fn eqs(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
}

// ---------------------------------------------------------------------------
// equi_join_product

pub(crate) struct JoinLayout {
    pub schema: IndexSchema,
    /// Output position of each left column.
    pub a_pos: Vec<usize>,
    /// Output position of each right column.
    pub b_pos: Vec<usize>,
    /// Paired equated column positions.
    pub a_key: Vec<usize>,
    pub b_key: Vec<usize>,
    /// Left columns not equated to anything, and likewise on the right.
    pub a_free: Vec<usize>,
    pub b_free: Vec<usize>,
}

impl JoinLayout {
    fn coordinatewise(&self, a: &IndexSchema, b: &IndexSchema) -> bool {
        self.a_free.is_empty() && self.b_free.is_empty() && a.len() == b.len()
    }

    fn project(&self, t: &[i64], pos: &[usize]) -> Coord {
        pos.iter().map(|p| t[*p]).collect()
    }
}

pub(crate) fn join_layout(
    a: &IndexSchema,
    b: &IndexSchema,
    equalities: &Equalities,
    output: &[OutputColumn],
) -> Result<JoinLayout> {
    let na = a.len();
    // Class of each column: left columns are 0..na, unmatched right columns follow.
    let mut b_class = vec![usize::MAX; b.len()];
    let mut a_key = Vec::new();
    let mut b_key = Vec::new();
    for (ca, cb) in equalities {
        let (pa, pb) = (a.position(ca)?, b.position(cb)?);
        if a_key.contains(&pa) || b_key.contains(&pb) {
            return Err(Error::SchemaMismatch(format!("column equated twice in `{ca} = {cb}`")));
        }
        let (da, db) = (&a.columns()[pa], &b.columns()[pb]);
        if !da.same_domain(db) {
            return Err(Error::SchemaMismatch(format!(
                "`{ca}` has domain {}..={} but `{cb}` has {}..={}",
                da.start,
                da.last(),
                db.start,
                db.last()
            )));
        }
        a_key.push(pa);
        b_key.push(pb);
        b_class[pb] = pa;
    }
    let mut next = na;
    for c in b_class.iter_mut().filter(|c| **c == usize::MAX) {
        *c = next;
        next += 1;
    }
    let mut class_pos = vec![usize::MAX; next];
    let mut cols = Vec::with_capacity(output.len());
    for (p, oc) in output.iter().enumerate() {
        let (class, src) = match oc.side {
            Side::Left => {
                let i = a.position(&oc.column)?;
                (i, &a.columns()[i])
            }
            Side::Right => {
                let j = b.position(&oc.column)?;
                (b_class[j], &b.columns()[j])
            }
        };
        if class_pos[class] != usize::MAX {
            return Err(Error::SchemaMismatch(format!("join output lists `{}` twice", oc.column)));
        }
        class_pos[class] = p;
        cols.push(src.renamed(oc.alias.clone()));
    }
    if let Some(missing) = class_pos.iter().position(|p| *p == usize::MAX) {
        let name = if missing < na {
            a.columns()[missing].name.clone()
        } else {
            let j = b_class.iter().position(|c| *c == missing).unwrap();
            b.columns()[j].name.clone()
        };
        return Err(Error::SchemaMismatch(format!(
            "join output must keep every column (sum columns out with aggregate); `{name}` is missing"
        )));
    }
    let a_pos = (0..na).map(|i| class_pos[i]).collect();
    let b_pos = b_class.iter().map(|c| class_pos[*c]).collect();
    let a_free = (0..na).filter(|i| !a_key.contains(i)).collect();
    let b_free = (0..b.len()).filter(|j| !b_key.contains(j)).collect();
    Ok(JoinLayout { schema: IndexSchema::new(cols)?, a_pos, b_pos, a_key, b_key, a_free, b_free })
}

pub fn join_schema(
    a: &IndexSchema,
    b: &IndexSchema,
    equalities: &Equalities,
    output: &[OutputColumn],
) -> Result<IndexSchema> {
    Ok(join_layout(a, b, equalities, output)?.schema)
}

/// Equi-join with multiplied values: `out(t) = a(πa t) · b(πb t)` over every
/// combination agreeing on `equalities`.
///
/// The output lists every column of both operands once (equated pairs share a
/// column), so output tuples are unique; contraction is this followed by an
/// aggregate-SUM over the columns to eliminate.
pub fn equi_join_product(
    a: &TensorRelation,
    b: &TensorRelation,
    equalities: &Equalities,
    output: &[OutputColumn],
) -> Result<TensorRelation> {
    join_product_capped(a, b, equalities, output, DEFAULT_DENSE_CAP)
}

pub fn join_product_capped(
    a: &TensorRelation,
    b: &TensorRelation,
    equalities: &Equalities,
    output: &[OutputColumn],
    cap: usize,
) -> Result<TensorRelation> {
    let lay = join_layout(a.schema(), b.schema(), equalities, output)?;
    let (ad, bd) = (a.default_value(), b.default_value());
    let width = lay.schema.len();

    if ad == 0.0 && bd == 0.0 {
        let mut index: HashMap<Coord, Vec<usize>> = HashMap::new();
        for (j, (c, _)) in b.entries().iter().enumerate() {
            index.entry(lay.project(c, &lay.b_key)).or_default().push(j);
        }
        let mut out = Vec::new();
        for (ca, va) in a.entries() {
            let Some(matches) = index.get(&lay.project(ca, &lay.a_key)) else { continue };
            for &j in matches {
                let (cb, vb) = &b.entries()[j];
                let mut t: Coord = smallvec::smallvec![0; width];
                for (i, p) in lay.a_pos.iter().enumerate() {
                    t[*p] = ca[i];
                }
                for (i, p) in lay.b_pos.iter().enumerate() {
                    t[*p] = cb[i];
                }
                out.push((t, va * vb));
            }
            if out.len() > cap {
                return Err(Error::TooLarge { size: out.len(), cap });
            }
        }
        return Ok(TensorRelation::from_unsorted(lay.schema, 0.0, out));
    }

    if ad != 0.0 && bd != 0.0 && !lay.coordinatewise(a.schema(), b.schema()) {
        return Err(Error::NonzeroDefaults(ad, bd));
    }

    // Coordinates that can differ from the default: those where either operand is stored.
    let mut cands: Vec<Coord> = Vec::new();
    let a_free_cols: Vec<Column> = lay.a_free.iter().map(|i| a.schema().columns()[*i].clone()).collect();
    let b_free_cols: Vec<Column> = lay.b_free.iter().map(|i| b.schema().columns()[*i].clone()).collect();
    // Equated columns of the other side share output positions with the fixed side.
    let mut push_completions = |fixed: &[i64], fixed_pos: &[usize], free_cols: &[Column], free_pos: &[usize]| -> Result<()> {
        let mut t: Coord = smallvec::smallvec![0; width];
        for (i, p) in fixed_pos.iter().enumerate() {
            t[*p] = fixed[i];
        }
        let mut err = None;
        for_each_in_box(free_cols, &mut |free: &[i64]| {
            if err.is_some() {
                return;
            }
            let mut t2 = t.clone();
            for (k, p) in free_pos.iter().enumerate() {
                t2[*p] = free[k];
            }
            cands.push(t2);
            if cands.len() > cap {
                err = Some(Error::TooLarge { size: cands.len(), cap });
            }
        });
        err.map_or(Ok(()), Err)
    };
    let b_free_pos: Vec<usize> = lay.b_free.iter().map(|j| lay.b_pos[*j]).collect();
    let a_free_pos: Vec<usize> = lay.a_free.iter().map(|i| lay.a_pos[*i]).collect();
    if bd != 0.0 {
        for (ca, _) in a.entries() {
            push_completions(ca, &lay.a_pos, &b_free_cols, &b_free_pos)?;
        }
    }
    if ad != 0.0 {
        for (cb, _) in b.entries() {
            push_completions(cb, &lay.b_pos, &a_free_cols, &a_free_pos)?;
        }
    }
    cands.sort_unstable();
    cands.dedup();
    let default = ad * bd;
    let out = cands
        .into_iter()
        .map(|t| {
            let v = a.get(&lay.project(&t, &lay.a_pos)) * b.get(&lay.project(&t, &lay.b_pos));
            (t, v)
        })
        .collect();
    Ok(TensorRelation::from_sorted(lay.schema, default, out))
}

// ---------------------------------------------------------------------------
// join_add

pub(crate) struct AddLayout {
    pub schema: IndexSchema,
    /// For each right column, the left position it is equated with.
    pub b_from_a: Vec<usize>,
    pub a_free: Vec<usize>,
}

pub(crate) fn add_layout(
    a: &IndexSchema,
    b: &IndexSchema,
    equalities: &Equalities,
    aliases: &[String],
) -> Result<AddLayout> {
    let mut b_from_a = vec![usize::MAX; b.len()];
    for (ca, cb) in equalities {
        let (pa, pb) = (a.position(ca)?, b.position(cb)?);
        if b_from_a[pb] != usize::MAX {
            return Err(Error::SchemaMismatch(format!("`{cb}` equated twice")));
        }
        if !a.columns()[pa].same_domain(&b.columns()[pb]) {
            return Err(Error::SchemaMismatch(format!("`{ca}` and `{cb}` have different domains")));
        }
        b_from_a[pb] = pa;
    }
    if let Some(j) = b_from_a.iter().position(|p| *p == usize::MAX) {
        return Err(Error::SchemaMismatch(format!(
            "broadcast addition needs every right column equated; `{}` is not",
            b.columns()[j].name
        )));
    }
    let schema = if aliases.is_empty() {
        a.clone()
    } else {
        if aliases.len() != a.len() {
            return Err(Error::SchemaMismatch(format!("expected {} aliases, got {}", a.len(), aliases.len())));
        }
        IndexSchema::new(a.columns().iter().zip(aliases).map(|(c, n)| c.renamed(n.clone())).collect())?
    };
    let a_free = (0..a.len()).filter(|i| !b_from_a.contains(i)).collect();
    Ok(AddLayout { schema, b_from_a, a_free })
}

pub fn join_add_schema(
    a: &IndexSchema,
    b: &IndexSchema,
    equalities: &Equalities,
    aliases: &[String],
) -> Result<IndexSchema> {
    Ok(add_layout(a, b, equalities, aliases)?.schema)
}

/// Broadcast addition: `out(x) = a(x) + b(key(x))`, where every column of `b`
/// is equated with a column of `a`. This is the "add" half of a bias layer and
/// the coordinate-wise sum used to combine loss terms and accumulate gradients.
pub fn join_add(a: &TensorRelation, b: &TensorRelation, equalities: &Equalities, aliases: &[String]) -> Result<TensorRelation> {
    let lay = add_layout(a.schema(), b.schema(), equalities, aliases)?;
    let key = |x: &[i64]| -> Coord { lay.b_from_a.iter().map(|p| x[*p]).collect() };
    let default = a.default_value() + b.default_value();
    let mut out: Vec<(Coord, f64)> = a.entries().iter().map(|(c, v)| (c.clone(), v + b.get(&key(c)))).collect();

    let full = a.schema().dense_size() == Some(a.len());
    if !full && !b.is_empty() {
        let free_cols: Vec<Column> = lay.a_free.iter().map(|i| a.schema().columns()[*i].clone()).collect();
        let mut extra = Vec::new();
        for (cb, vb) in b.entries() {
            let mut x: Coord = smallvec::smallvec![0; a.schema().len()];
            for (j, p) in lay.b_from_a.iter().enumerate() {
                x[*p] = cb[j];
            }
            for_each_in_box(&free_cols, &mut |free: &[i64]| {
                let mut x2 = x.clone();
                for (k, p) in lay.a_free.iter().enumerate() {
                    x2[*p] = free[k];
                }
                if a.lookup(&x2).is_none() {
                    extra.push((x2, a.default_value() + vb));
                }
            });
            if extra.len() > DEFAULT_DENSE_CAP {
                return Err(Error::TooLarge { size: extra.len(), cap: DEFAULT_DENSE_CAP });
            }
        }
        out.extend(extra);
        out.sort_unstable_by(|p, q| p.0.cmp(&q.0));
    }
    Ok(TensorRelation::from_sorted(lay.schema, default, out))
}

// ---------------------------------------------------------------------------
// reindex

pub fn reindex_schema(schema: &IndexSchema, exprs: &[AffineIndexExpr], keep: &[String]) -> Result<IndexSchema> {
    let mut cols = Vec::with_capacity(keep.len() + exprs.len());
    for k in keep {
        cols.push(schema.column(k)?.clone());
    }
    for e in exprs {
        e.bind(schema)?;
        cols.push(e.target_column(schema)?);
    }
    IndexSchema::new(cols)
}

/// Rewrites index tuples through affine expressions; `keep` columns are
/// copied through first, expression targets follow. Values are untouched.
pub fn reindex(rel: &TensorRelation, exprs: &[AffineIndexExpr], keep: &[String]) -> Result<TensorRelation> {
    let schema = reindex_schema(rel.schema(), exprs, keep)?;
    let keep_pos = keep.iter().map(|k| rel.schema().position(k)).collect::<Result<Vec<_>>>()?;
    let bound = exprs.iter().map(|e| e.bind(rel.schema())).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(rel.len());
    for (c, v) in rel.entries() {
        let mut t: Coord = keep_pos.iter().map(|p| c[*p]).collect();
        for (e, b) in exprs.iter().zip(&bound) {
            let y = b.eval(c);
            if let Some(n) = e.domain {
                if y < 0 || y >= n as i64 {
                    return Err(Error::OutOfDomain(format!("`{}` = {y} outside 0..{n}", e.target)));
                }
            }
            t.push(y);
        }
        out.push((t, *v));
    }
    out.sort_unstable_by(|p, q| p.0.cmp(&q.0));
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Collision(w[0].0.to_vec()));
    }
    Ok(TensorRelation::from_sorted(schema, rel.default_value(), out))
}

// ---------------------------------------------------------------------------
// filter_range

pub fn filter_schema(schema: &IndexSchema, column: &str, lo: i64, hi: i64) -> Result<IndexSchema> {
    if lo > hi {
        return Err(Error::EmptyRange { lo, hi });
    }
    let p = schema.position(column)?;
    let mut cols = schema.columns().to_vec();
    cols[p] = Column::new(column, (hi - lo + 1) as usize);
    IndexSchema::new(cols)
}

/// Keeps entries with `lo <= column <= hi` (inclusive, like `BETWEEN`) and
/// re-bases the column so that `lo` becomes 0.
pub fn filter_range(rel: &TensorRelation, column: &str, lo: i64, hi: i64) -> Result<TensorRelation> {
    let schema = filter_schema(rel.schema(), column, lo, hi)?;
    let p = rel.schema().position(column)?;
    let out = rel
        .entries()
        .iter()
        .filter(|(c, _)| c[p] >= lo && c[p] <= hi)
        .map(|(c, v)| {
            let mut t = c.clone();
            t[p] -= lo;
            (t, *v)
        })
        .collect();
    Ok(TensorRelation::from_sorted(schema, rel.default_value(), out))
}

// ---------------------------------------------------------------------------
// aggregate

pub(crate) struct AggLayout {
    pub schema: IndexSchema,
    pub key_pos: Vec<usize>,
    pub divisors: Vec<Option<i64>>,
    /// Input columns that are summed out entirely.
    pub dropped: Vec<usize>,
}

impl AggLayout {
    pub(crate) fn group_of(&self, c: &[i64]) -> Coord {
        self.key_pos
            .iter()
            .zip(&self.divisors)
            .map(|(p, d)| match d {
                Some(d) => c[*p].div_euclid(*d),
                None => c[*p],
            })
            .collect()
    }

    /// Number of input coordinates in the dense domain that fall in `group`.
    pub(crate) fn cardinality(&self, input: &IndexSchema, group: &[i64]) -> usize {
        let mut k: usize = self.dropped.iter().map(|p| input.columns()[*p].domain_size).product();
        for (i, d) in self.divisors.iter().enumerate() {
            if let Some(d) = d {
                k *= bucket_count(&input.columns()[self.key_pos[i]], *d, group[i]);
            }
        }
        k
    }

    /// Input columns (with restricted ranges) that make up `group`, in input order.
    pub(crate) fn group_box(&self, input: &IndexSchema, group: &[i64]) -> Vec<Column> {
        let mut cols = input.columns().to_vec();
        for (i, p) in self.key_pos.iter().enumerate() {
            let c = &input.columns()[*p];
            cols[*p] = match self.divisors[i] {
                None => Column::with_start(c.name.clone(), group[i], 1),
                Some(d) => {
                    let lo = c.start.max(group[i] * d);
                    let hi = c.last().min(group[i] * d + d - 1);
                    Column::with_start(c.name.clone(), lo, (hi - lo + 1) as usize)
                }
            };
        }
        cols
    }
}

fn bucket_count(col: &Column, d: i64, g: i64) -> usize {
    let lo = col.start.max(g * d);
    let hi = col.last().min(g * d + d - 1);
    if hi < lo {
        0
    } else {
        (hi - lo + 1) as usize
    }
}

pub(crate) fn agg_layout(schema: &IndexSchema, keys: &[GroupKey]) -> Result<AggLayout> {
    let mut cols = Vec::with_capacity(keys.len());
    let mut key_pos = Vec::with_capacity(keys.len());
    let mut divisors = Vec::with_capacity(keys.len());
    for k in keys {
        let p = schema.position(&k.column)?;
        if key_pos.contains(&p) {
            return Err(Error::SchemaMismatch(format!("`{}` grouped twice", k.column)));
        }
        let c = &schema.columns()[p];
        let col = match k.divisor {
            None => c.renamed(k.output_name()),
            Some(d) if d < 1 => return Err(Error::DivisorInvalid(d)),
            Some(d) => {
                let (lo, hi) = (c.start.div_euclid(d), c.last().div_euclid(d));
                Column::with_start(k.output_name(), lo, (hi - lo + 1) as usize)
            }
        };
        cols.push(col);
        key_pos.push(p);
        divisors.push(k.divisor);
    }
    let dropped = (0..schema.len()).filter(|p| !key_pos.contains(p)).collect();
    Ok(AggLayout { schema: IndexSchema::new(cols)?, key_pos, divisors, dropped })
}

pub fn aggregate_schema(schema: &IndexSchema, keys: &[GroupKey]) -> Result<IndexSchema> {
    Ok(agg_layout(schema, keys)?.schema)
}

fn empty_group_value(agg: Agg, d: f64, k: usize) -> f64 {
    match agg {
        Agg::Sum => d * k as f64,
        Agg::Max | Agg::Avg => d,
        Agg::Count => k as f64,
    }
}

/// Group-by aggregation with dense semantics: coordinates that are not stored
/// still count as members of their group, carrying the default.
pub fn aggregate(rel: &TensorRelation, keys: &[GroupKey], agg: Agg) -> Result<TensorRelation> {
    let lay = agg_layout(rel.schema(), keys)?;
    let d = rel.default_value();

    struct Acc {
        sum: f64,
        max: f64,
        n: usize,
    }
    let mut groups: HashMap<Coord, Acc> = HashMap::new();
    let mut order: Vec<Coord> = Vec::new();
    for (c, v) in rel.entries() {
        let g = lay.group_of(c);
        match groups.get_mut(&g) {
            Some(acc) => {
                acc.sum += v;
                acc.max = acc.max.max(*v);
                acc.n += 1;
            }
            None => {
                order.push(g.clone());
                groups.insert(g, Acc { sum: *v, max: *v, n: 1 });
            }
        }
    }

    let mut stored_per_card: HashMap<usize, usize> = HashMap::new();
    let mut out = Vec::with_capacity(order.len());
    for g in order {
        let acc = &groups[&g];
        let k = lay.cardinality(rel.schema(), &g);
        *stored_per_card.entry(k).or_default() += 1;
        let missing = k - acc.n;
        let sum = if missing > 0 && d != 0.0 { acc.sum + d * missing as f64 } else { acc.sum };
        let v = match agg {
            Agg::Sum => sum,
            Agg::Max => {
                if missing > 0 {
                    acc.max.max(d)
                } else {
                    acc.max
                }
            }
            Agg::Avg => sum / k as f64,
            Agg::Count => k as f64,
        };
        out.push((g, v));
    }

    // Default for groups with nothing stored; may depend on group cardinality.
    let totals = cardinality_histogram(&lay, rel.schema());
    let mut default: Option<f64> = None;
    let mut cards: Vec<_> = totals.into_iter().collect();
    cards.sort_unstable();
    for (k, total) in &cards {
        if stored_per_card.get(k).copied().unwrap_or(0) < *total {
            let v = empty_group_value(agg, d, *k);
            match default {
                Some(prev) if prev != v => return Err(Error::DefaultConflict(prev, v)),
                _ => default = Some(v),
            }
        }
    }
    let default = default.unwrap_or_else(|| {
        let k = cards.last().map(|(k, _)| *k).unwrap_or(1);
        empty_group_value(agg, d, k)
    });
    Ok(TensorRelation::from_unsorted(lay.schema, default, out))
}

/// Map from group cardinality to the number of output groups having it.
fn cardinality_histogram(lay: &AggLayout, input: &IndexSchema) -> HashMap<usize, usize> {
    let dropped: usize = lay.dropped.iter().map(|p| input.columns()[*p].domain_size).product();
    let mut hist: HashMap<usize, usize> = HashMap::new();
    hist.insert(dropped, 1);
    for (i, div) in lay.divisors.iter().enumerate() {
        let out_col = &lay.schema.columns()[i];
        let mut per: HashMap<usize, usize> = HashMap::new();
        match div {
            None => {
                per.insert(1, out_col.domain_size);
            }
            Some(d) => {
                let in_col = &input.columns()[lay.key_pos[i]];
                for g in out_col.start..=out_col.last() {
                    *per.entry(bucket_count(in_col, *d, g)).or_default() += 1;
                }
            }
        }
        let mut next: HashMap<usize, usize> = HashMap::new();
        for (k1, n1) in &hist {
            for (k2, n2) in &per {
                *next.entry(k1 * k2).or_default() += n1 * n2;
            }
        }
        hist = next;
    }
    hist
}

// ---------------------------------------------------------------------------
// scalar_map

/// Applies `f` to every stored value and to the default.
pub fn scalar_map(rel: &TensorRelation, f: ScalarFn) -> Result<TensorRelation> {
    let default = f.apply(rel.default_value())?;
    let out = rel.entries().iter().map(|(c, v)| Ok((c.clone(), f.apply(*v)?))).collect::<Result<Vec<_>>>()?;
    Ok(TensorRelation::from_sorted(rel.schema().clone(), default, out))
}

// ---------------------------------------------------------------------------
// densify

pub fn densify(rel: &TensorRelation) -> Result<TensorRelation> {
    densify_capped(rel, DEFAULT_DENSE_CAP)
}

/// Stores every coordinate explicitly, default 0. The result is exempt from
/// canonical form until the next operation consumes it.
pub fn densify_capped(rel: &TensorRelation, cap: usize) -> Result<TensorRelation> {
    let size = dense_size_capped(rel.schema(), cap)?;
    let mut out = Vec::with_capacity(size);
    let mut stored = rel.entries().iter().peekable();
    rel.schema().for_each_coord(|c| {
        let v = match stored.peek() {
            Some((sc, sv)) if sc.as_slice() == c => {
                let v = *sv;
                stored.next();
                v
            }
            _ => rel.default_value(),
        };
        out.push((Coord::from_slice(c), v));
    });
    Ok(TensorRelation::materialized(rel.schema().clone(), out))
}
