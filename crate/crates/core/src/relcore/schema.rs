use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One integer index column. Values range over `start..start + domain_size`.
///
/// Relations loaded from disk or built by layers always start at zero; a
/// nonzero start only appears on intermediates produced by `reindex` (for
/// example the difference `r - kr` of a convolution) and disappears again
/// after `filter_range` re-bases the column.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub domain_size: usize,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub start: i64,
}

fn is_zero(v: &i64) -> bool {
    *v == 0
}

impl Column {
    pub fn new(name: impl Into<String>, domain_size: usize) -> Self {
        Column { name: name.into(), domain_size, start: 0 }
    }

    pub fn with_start(name: impl Into<String>, start: i64, domain_size: usize) -> Self {
        Column { name: name.into(), domain_size, start }
    }

    /// Largest admissible value (inclusive).
    pub fn last(&self) -> i64 {
        self.start + self.domain_size as i64 - 1
    }

    pub fn contains(&self, v: i64) -> bool {
        v >= self.start && v <= self.last()
    }

    pub fn renamed(&self, name: impl Into<String>) -> Self {
        Column { name: name.into(), ..self.clone() }
    }

    /// Same value range, ignoring the name.
    pub fn same_domain(&self, other: &Column) -> bool {
        self.start == other.start && self.domain_size == other.domain_size
    }
}

/// Ordered list of index columns with unique names.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Column>", into = "Vec<Column>")]
pub struct IndexSchema {
    columns: Vec<Column>,
}

impl TryFrom<Vec<Column>> for IndexSchema {
    type Error = Error;

    fn try_from(columns: Vec<Column>) -> Result<Self> {
        IndexSchema::new(columns)
    }
}

impl From<IndexSchema> for Vec<Column> {
    fn from(s: IndexSchema) -> Self {
        s.columns
    }
}

impl IndexSchema {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        for (i, c) in columns.iter().enumerate() {
            if c.domain_size == 0 {
                return Err(Error::SchemaMismatch(format!("column `{}` has an empty domain", c.name)));
            }
            if columns[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::SchemaMismatch(format!("duplicate column `{}`", c.name)));
            }
        }
        Ok(IndexSchema { columns })
    }

    /// Shorthand for zero-based columns: `IndexSchema::of(&[("i", 3), ("j", 4)])`.
    pub fn of(cols: &[(&str, usize)]) -> Result<Self> {
        IndexSchema::new(cols.iter().map(|(n, s)| Column::new(*n, *s)).collect())
    }

    /// The schema of a scalar: no columns, exactly one coordinate.
    pub fn scalar() -> Self {
        IndexSchema { columns: Vec::new() }
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    /// Number of coordinates in the full dense domain, `None` on overflow.
    pub fn dense_size(&self) -> Option<usize> {
        self.columns.iter().try_fold(1usize, |acc, c| acc.checked_mul(c.domain_size))
    }

    pub fn contains(&self, coord: &[i64]) -> bool {
        coord.len() == self.columns.len() && self.columns.iter().zip(coord).all(|(c, v)| c.contains(*v))
    }

    /// True when both schemas have the same column count and identical
    /// domains position by position (names may differ).
    pub fn same_shape(&self, other: &IndexSchema) -> bool {
        self.len() == other.len() && self.columns.iter().zip(&other.columns).all(|(a, b)| a.same_domain(b))
    }

    /// Calls `f` for every coordinate of the dense domain, in lexicographic order.
    pub fn for_each_coord(&self, mut f: impl FnMut(&[i64])) {
        for_each_in_box(&self.columns, &mut f);
    }
}

/// Lexicographic enumeration of the box spanned by `cols`.
pub(crate) fn for_each_in_box(cols: &[Column], f: &mut impl FnMut(&[i64])) {
    if cols.iter().any(|c| c.domain_size == 0) {
        return;
    }
    let mut cur: Vec<i64> = cols.iter().map(|c| c.start).collect();
    loop {
        f(&cur);
        let mut k = cols.len();
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            if cur[k] < cols[k].last() {
                cur[k] += 1;
                break;
            }
            cur[k] = cols[k].start;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicates_and_empty_domains() {
        assert!(IndexSchema::of(&[("i", 2), ("i", 3)]).is_err());
        assert!(IndexSchema::of(&[("i", 0)]).is_err());
    }

    #[test]
    fn enumerates_in_lex_order() {
        let s = IndexSchema::new(vec![Column::new("a", 2), Column::with_start("b", -1, 2)]).unwrap();
        let mut seen = Vec::new();
        s.for_each_coord(|c| seen.push(c.to_vec()));
        assert_eq!(seen, vec![vec![0, -1], vec![0, 0], vec![1, -1], vec![1, 0]]);
        let mut n = 0;
        IndexSchema::scalar().for_each_coord(|c| {
            assert!(c.is_empty());
            n += 1
        });
        assert_eq!(n, 1);
    }

    #[test]
    fn json_shape() {
        let s = IndexSchema::of(&[("image", 2)]).unwrap();
        assert_eq!(serde_json::to_string(&s).unwrap(), r#"[{"name":"image","domain_size":2}]"#);
    }
}
