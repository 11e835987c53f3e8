use serde::{Deserialize, Serialize};

use super::schema::{Column, IndexSchema};
use crate::error::{Error, Result};

/// `target = offset + Σ coefficient · source`, over integer index columns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffineIndexExpr {
    pub target: String,
    pub terms: Vec<(String, i64)>,
    #[serde(default)]
    pub offset: i64,
    /// Explicit target domain `0..n`; values outside it are an error.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<usize>,
}

impl AffineIndexExpr {
    pub fn new(target: impl Into<String>, terms: &[(&str, i64)], offset: i64) -> Self {
        AffineIndexExpr {
            target: target.into(),
            terms: terms.iter().map(|(c, k)| (c.to_string(), *k)).collect(),
            offset,
            domain: None,
        }
    }

    pub fn with_domain(mut self, n: usize) -> Self {
        self.domain = Some(n);
        self
    }

    /// Resolves column names to positions in `schema`.
    pub(crate) fn bind(&self, schema: &IndexSchema) -> Result<BoundExpr> {
        let terms = self
            .terms
            .iter()
            .map(|(c, k)| Ok((schema.position(c)?, *k)))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundExpr { terms, offset: self.offset })
    }

    /// The target column: either the explicit domain or the tight bounds of
    /// the expression over the input box.
    pub(crate) fn target_column(&self, schema: &IndexSchema) -> Result<Column> {
        if let Some(n) = self.domain {
            if n == 0 {
                return Err(Error::SchemaMismatch(format!("empty domain for `{}`", self.target)));
            }
            return Ok(Column::new(self.target.clone(), n));
        }
        let (mut lo, mut hi) = (self.offset, self.offset);
        for (c, k) in &self.terms {
            let col = schema.column(c)?;
            let (a, b) = (k * col.start, k * col.last());
            lo += a.min(b);
            hi += a.max(b);
        }
        Ok(Column::with_start(self.target.clone(), lo, (hi - lo + 1) as usize))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BoundExpr {
    terms: Vec<(usize, i64)>,
    offset: i64,
}

impl BoundExpr {
    pub(crate) fn eval(&self, coord: &[i64]) -> i64 {
        self.terms.iter().fold(self.offset, |acc, (p, k)| acc + k * coord[*p])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_of_difference() {
        let s = IndexSchema::of(&[("r", 32), ("kr", 5)]).unwrap();
        let e = AffineIndexExpr::new("r1", &[("r", 1), ("kr", -1)], 0);
        let c = e.target_column(&s).unwrap();
        assert_eq!((c.start, c.last()), (-4, 31));
        assert_eq!(e.bind(&s).unwrap().eval(&[3, 4]), -1);
    }

    #[test]
    fn flatten_formula() {
        let s = IndexSchema::of(&[("channel", 16), ("r", 5), ("c", 5)]).unwrap();
        let e = AffineIndexExpr::new("i", &[("channel", 25), ("r", 5), ("c", 1)], 0);
        assert_eq!(e.bind(&s).unwrap().eval(&[1, 2, 3]), 38);
        let col = e.target_column(&s).unwrap();
        assert_eq!((col.start, col.domain_size), (0, 400));
    }
}
