use std::fmt;

use smallvec::SmallVec;

use super::schema::IndexSchema;
use crate::error::{Error, Result};

/// An index tuple. Eight columns fit inline, which covers every layer here.
pub type Coord = SmallVec<[i64; 8]>;

/// Default cap on the number of coordinates any operation may materialize.
pub const DEFAULT_DENSE_CAP: usize = 10_000_000;

/// A sparse tensor stored as a relation: integer index columns, a value per
/// stored coordinate, and one uniform default for every coordinate that is not
/// stored.
///
/// Entries are kept sorted by index tuple, which fixes the iteration (and thus
/// summation) order. Outside of [`densify`](super::densify) output, no stored
/// value equals the default.
#[derive(Clone, PartialEq)]
pub struct TensorRelation {
    schema: IndexSchema,
    entries: Vec<(Coord, f64)>,
    default: f64,
    materialized: bool,
}

impl fmt::Debug for TensorRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cols: Vec<&str> = self.schema.names().collect();
        write!(f, "TensorRelation({cols:?}, default={}, {{", self.default)?;
        for (i, (c, v)) in self.entries.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            if i == 16 {
                write!(f, "... {} more", self.entries.len() - 16)?;
                break;
            }
            write!(f, "{:?}→{}", c.as_slice(), v)?;
        }
        write!(f, "}})")
    }
}

impl TensorRelation {
    /// Builds a canonical relation. Entries equal to `default` are dropped.
    pub fn new<I, C>(schema: IndexSchema, default: f64, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (C, f64)>,
        C: AsRef<[i64]>,
    {
        check_finite(default, "default")?;
        let mut out = Vec::new();
        for (c, v) in entries {
            let c = c.as_ref();
            if !schema.contains(c) {
                return Err(Error::OutOfDomain(format!("{c:?} outside schema {:?}", schema.names().collect::<Vec<_>>())));
            }
            check_finite(v, "value")?;
            out.push((Coord::from_slice(c), v));
        }
        out.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::DuplicateIndex(w[0].0.to_vec()));
        }
        out.retain(|(_, v)| *v != default);
        Ok(TensorRelation { schema, entries: out, default, materialized: false })
    }

    /// A relation with nothing stored: every coordinate equals `default`.
    pub fn empty(schema: IndexSchema, default: f64) -> Self {
        TensorRelation { schema, entries: Vec::new(), default, materialized: false }
    }

    /// A zero-column relation holding a single number.
    pub fn scalar(value: f64) -> Self {
        TensorRelation::empty(IndexSchema::scalar(), value)
    }

    /// Internal constructor: entries already sorted, unique, in-domain and finite.
    pub(crate) fn from_sorted(schema: IndexSchema, default: f64, mut entries: Vec<(Coord, f64)>) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0].0 < w[1].0));
        entries.retain(|(_, v)| *v != default);
        TensorRelation { schema, entries, default, materialized: false }
    }

    /// Internal constructor for unsorted entries with unique coordinates.
    pub(crate) fn from_unsorted(schema: IndexSchema, default: f64, mut entries: Vec<(Coord, f64)>) -> Self {
        entries.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        Self::from_sorted(schema, default, entries)
    }

    pub(crate) fn materialized(schema: IndexSchema, entries: Vec<(Coord, f64)>) -> Self {
        TensorRelation { schema, entries, default: 0.0, materialized: true }
    }

    pub fn schema(&self) -> &IndexSchema {
        &self.schema
    }

    pub fn default_value(&self) -> f64 {
        self.default
    }

    /// Stored entries in ascending index order.
    pub fn entries(&self) -> &[(Coord, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True for the output of `densify`, which may store default-valued entries.
    pub fn is_materialized(&self) -> bool {
        self.materialized
    }

    /// Value at `coord`, falling back to the default.
    pub fn get(&self, coord: &[i64]) -> f64 {
        self.lookup(coord).unwrap_or(self.default)
    }

    /// Stored value at `coord`, if any.
    pub fn lookup(&self, coord: &[i64]) -> Option<f64> {
        self.entries
            .binary_search_by(|(c, _)| c.as_slice().cmp(coord))
            .ok()
            .map(|i| self.entries[i].1)
    }

    /// The value of a zero-column relation.
    pub fn scalar_value(&self) -> Result<f64> {
        if !self.schema.is_empty() {
            return Err(Error::SchemaMismatch(format!(
                "expected a scalar relation, found columns {:?}",
                self.schema.names().collect::<Vec<_>>()
            )));
        }
        Ok(self.get(&[]))
    }

    /// Same data under different column names (domains unchanged).
    pub fn with_column_names(&self, names: &[&str]) -> Result<Self> {
        if names.len() != self.schema.len() {
            return Err(Error::SchemaMismatch(format!("expected {} names, got {}", self.schema.len(), names.len())));
        }
        let cols = self.schema.columns().iter().zip(names).map(|(c, n)| c.renamed(*n)).collect();
        Ok(TensorRelation { schema: IndexSchema::new(cols)?, ..self.clone() })
    }

    /// Drops stored entries equal to the default and clears the densify flag.
    pub fn canonicalize(mut self) -> Self {
        let d = self.default;
        self.entries.retain(|(_, v)| *v != d);
        self.materialized = false;
        self
    }

    /// Re-expresses the relation with default 0, materializing every
    /// coordinate when the current default is nonzero.
    pub fn with_zero_default(&self, cap: usize) -> Result<Self> {
        if self.default == 0.0 {
            return Ok(self.clone().canonicalize());
        }
        let size = dense_size_capped(&self.schema, cap)?;
        let mut out = Vec::with_capacity(size);
        let mut stored = self.entries.iter().peekable();
        self.schema.for_each_coord(|c| {
            let v = match stored.peek() {
                Some((sc, sv)) if sc.as_slice() == c => {
                    let v = *sv;
                    stored.next();
                    v
                }
                _ => self.default,
            };
            if v != 0.0 {
                out.push((Coord::from_slice(c), v));
            }
        });
        Ok(TensorRelation::from_sorted(self.schema.clone(), 0.0, out))
    }

    /// Validity checker: domains, ordering, uniqueness, finiteness, and
    /// canonical form (skipped for densify output).
    pub fn check_valid(&self) -> Result<()> {
        check_finite(self.default, "default")?;
        for w in self.entries.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(Error::DuplicateIndex(w[1].0.to_vec()));
            }
        }
        for (c, v) in &self.entries {
            if !self.schema.contains(c) {
                return Err(Error::OutOfDomain(format!("{:?}", c.as_slice())));
            }
            check_finite(*v, "value")?;
            if !self.materialized && *v == self.default {
                return Err(Error::SchemaMismatch(format!("stored entry {:?} equals the default", c.as_slice())));
            }
        }
        Ok(())
    }

    /// Dense-semantics equality within `tol` (absolute), comparing every
    /// coordinate that is stored on either side and the defaults.
    pub fn approx_eq(&self, other: &TensorRelation, tol: f64) -> bool {
        if !self.schema.same_shape(&other.schema) {
            return false;
        }
        // the defaults only matter if some coordinate is stored on neither side
        let full = self.schema.dense_size().unwrap_or(usize::MAX);
        let shared = self.entries.iter().filter(|(c, _)| other.lookup(c).is_some()).count();
        let union = self.len() + other.len() - shared;
        if union < full && (self.default - other.default).abs() > tol {
            return false;
        }
        self.entries.iter().all(|(c, v)| (v - other.get(c)).abs() <= tol)
            && other.entries.iter().all(|(c, v)| (v - self.get(c)).abs() <= tol)
    }
}

pub(crate) fn check_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} {v}")))
    }
}

pub(crate) fn dense_size_capped(schema: &IndexSchema, cap: usize) -> Result<usize> {
    match schema.dense_size() {
        Some(n) if n <= cap => Ok(n),
        Some(n) => Err(Error::TooLarge { size: n, cap }),
        None => Err(Error::TooLarge { size: usize::MAX, cap }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s2() -> IndexSchema {
        IndexSchema::of(&[("i", 2), ("j", 2)]).unwrap()
    }

    #[test]
    fn construction_canonicalizes_and_sorts() {
        let r = TensorRelation::new(s2(), 1.0, [([1, 1], 5.0), ([0, 1], 1.0), ([0, 0], 2.0)]).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r.entries()[0].0.as_slice(), &[0, 0]);
        assert_eq!(r.get(&[0, 1]), 1.0);
        assert_eq!(r.get(&[1, 1]), 5.0);
        r.check_valid().unwrap();
    }

    #[test]
    fn rejects_bad_entries() {
        assert!(matches!(TensorRelation::new(s2(), 0.0, [([2, 0], 1.0)]), Err(Error::OutOfDomain(_))));
        assert!(matches!(
            TensorRelation::new(s2(), 0.0, [([0, 0], 1.0), ([0, 0], 2.0)]),
            Err(Error::DuplicateIndex(_))
        ));
        assert!(matches!(TensorRelation::new(s2(), 0.0, [([0, 0], f64::NAN)]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_default_materializes() {
        let r = TensorRelation::new(s2(), 2.0, [([0, 0], 0.0)]).unwrap();
        let z = r.with_zero_default(100).unwrap();
        assert_eq!(z.default_value(), 0.0);
        assert_eq!(z.len(), 3);
        assert!(r.approx_eq(&z, 0.0));
    }
}
