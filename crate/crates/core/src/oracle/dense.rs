use crate::error::{Error, Result};
use crate::relcore::{Column, Coord, IndexSchema, TensorRelation, DEFAULT_DENSE_CAP};

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl DenseTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        DenseTensor { shape: shape.to_vec(), values: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::SchemaMismatch(format!("{} values for shape {shape:?}", values.len())));
        }
        Ok(DenseTensor { shape: shape.to_vec(), values })
    }

    pub fn scalar(v: f64) -> Self {
        DenseTensor { shape: vec![], values: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter().zip(&self.shape).fold(0, |acc, (i, n)| {
            debug_assert!(i < n);
            acc * n + i
        })
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.values[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.values[o] = v;
    }

    pub fn max_abs_diff(&self, other: &DenseTensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Largest violation of `|a - b| <= rel * max(|a|, |b|) + abs`, as a ratio
    /// (<= 1 means within tolerance).
    pub fn tolerance_ratio(&self, other: &DenseTensor, rel: f64, abs: f64) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs() / (rel * a.abs().max(b.abs()) + abs))
            .fold(0.0, f64::max)
    }
}

/// Expands a relation to a dense array; non-stored coordinates take the default.
/// Column starts are shifted to zero.
pub fn to_dense(rel: &TensorRelation) -> Result<DenseTensor> {
    let shape: Vec<usize> = rel.schema().columns().iter().map(|c| c.domain_size).collect();
    let n = rel.schema().dense_size().unwrap_or(usize::MAX);
    if n > DEFAULT_DENSE_CAP {
        return Err(Error::TooLarge { size: n, cap: DEFAULT_DENSE_CAP });
    }
    let mut t = DenseTensor { shape, values: vec![rel.default_value(); n] };
    let starts: Vec<i64> = rel.schema().columns().iter().map(|c| c.start).collect();
    for (c, v) in rel.entries() {
        let idx: Vec<usize> = c.iter().zip(&starts).map(|(x, s)| (x - s) as usize).collect();
        t.set(&idx, *v);
    }
    Ok(t)
}

/// Builds a canonical default-0 relation from a dense array.
pub fn from_dense(t: &DenseTensor, names: &[&str]) -> Result<TensorRelation> {
    if names.len() != t.shape.len() {
        return Err(Error::SchemaMismatch(format!("{} names for rank {}", names.len(), t.shape.len())));
    }
    let schema = IndexSchema::new(names.iter().zip(&t.shape).map(|(n, s)| Column::new(*n, *s)).collect())?;
    let mut entries = Vec::new();
    let mut k = 0;
    schema.for_each_coord(|c| {
        if t.values[k] != 0.0 {
            entries.push((Coord::from_slice(c), t.values[k]));
        }
        k += 1;
    });
    TensorRelation::new(schema, 0.0, entries)
}

/// Central finite differences of `f` at `point`, one coordinate at a time.
pub fn finite_diff_grad(f: impl Fn(&DenseTensor) -> f64, point: &DenseTensor, h: f64) -> Result<DenseTensor> {
    if h <= 0.0 {
        return Err(Error::InvalidParams(format!("step h = {h} must be positive")));
    }
    let mut grad = DenseTensor::zeros(&point.shape);
    let mut x = point.clone();
    for i in 0..point.values.len() {
        let orig = x.values[i];
        x.values[i] = orig + h;
        let up = f(&x);
        x.values[i] = orig - h;
        let down = f(&x);
        x.values[i] = orig;
        let g = (up - down) / (2.0 * h);
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("finite difference at coordinate {i}")));
        }
        grad.values[i] = g;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_relation_is_zero_matrix() {
        let r = TensorRelation::empty(IndexSchema::of(&[("i", 2), ("j", 2)]).unwrap(), 0.0);
        assert_eq!(to_dense(&r).unwrap().values, vec![0.0; 4]);
    }

    #[test]
    fn round_trip_canonicalizes() {
        let s = IndexSchema::of(&[("i", 2), ("j", 3)]).unwrap();
        let r = TensorRelation::new(s, 0.0, [([0, 1], 2.0), ([1, 2], -1.0)]).unwrap();
        let back = from_dense(&to_dense(&r).unwrap(), &["i", "j"]).unwrap();
        assert_eq!(back, r);
        let d = TensorRelation::new(IndexSchema::of(&[("i", 2)]).unwrap(), 3.0, [([1], 0.0)]).unwrap();
        let back = from_dense(&to_dense(&d).unwrap(), &["i"]).unwrap();
        assert_eq!(back.default_value(), 0.0);
        assert_eq!(back.entries()[0].1, 3.0);
    }

    #[test]
    fn finite_differences_of_sum_of_squares() {
        let x = DenseTensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.values.iter().map(|v| v * v).sum(), &x, 1e-5).unwrap();
        assert!((g.values[0] - 2.0).abs() < 1e-8);
        assert!((g.values[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn finite_differences_of_linear_function() {
        let x = DenseTensor::from_vec(&[3], vec![0.3, -1.0, 7.0]).unwrap();
        let g = finite_diff_grad(|t| 2.0 * t.values[0] - 0.5 * t.values[1] + 3.0 * t.values[2], &x, 1e-5).unwrap();
        for (a, b) in g.values.iter().zip([2.0, -0.5, 3.0]) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}
