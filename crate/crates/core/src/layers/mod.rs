//! Neural-network layers expressed as relational sub-plans.

mod compile;
mod spec;

pub use compile::{
    build_model, compile_conv2d, compile_cross_entropy, compile_flatten, compile_fully_connected, compile_graph_conv,
    compile_maxpool2x2, compile_relu,
};
pub use spec::{InputSpec, LayerSpec, ModelKind, ModelSpec};

use crate::error::{Error, Result};
use crate::relcore::{Coord, IndexSchema, TensorRelation};

/// Row-normalizes a binary `(i, j)` adjacency relation, optionally adding
/// self-loops first. Rows without edges stay zero.
pub fn normalize_adjacency(edges: &TensorRelation, self_loops: bool) -> Result<TensorRelation> {
    let s = edges.schema();
    if s.len() != 2 || s.columns()[0].domain_size != s.columns()[1].domain_size || s.columns()[0].start != s.columns()[1].start {
        return Err(Error::NotSquare(format!("{:?}", s.columns())));
    }
    if edges.default_value() != 0.0 {
        return Err(Error::NotBinary(vec![], edges.default_value()));
    }
    if let Some((c, v)) = edges.entries().iter().find(|(_, v)| *v != 1.0) {
        return Err(Error::NotBinary(c.to_vec(), *v));
    }
    let mut rows: Vec<Vec<i64>> = vec![Vec::new(); s.columns()[0].domain_size];
    let start = s.columns()[0].start;
    for (c, _) in edges.entries() {
        rows[(c[0] - start) as usize].push(c[1]);
    }
    let mut entries = Vec::with_capacity(edges.len() + rows.len());
    for (k, targets) in rows.iter_mut().enumerate() {
        let i = start + k as i64;
        if self_loops && !targets.contains(&i) {
            targets.push(i);
            targets.sort_unstable();
        }
        let w = 1.0 / targets.len() as f64;
        entries.extend(targets.iter().map(|j| (Coord::from_slice(&[i, *j]), w)));
    }
    TensorRelation::new(s.clone(), 0.0, entries)
}

/// Class with the largest logit per row; ties go to the smallest class index.
/// Non-stored logits count with the default value.
pub fn argmax_predict(logits: &TensorRelation) -> Result<Vec<(i64, i64)>> {
    let s = logits.schema();
    if s.len() != 2 {
        return Err(Error::SchemaMismatch(format!("argmax needs (row, class), found {:?}", s.columns())));
    }
    let (rows, classes) = (&s.columns()[0], &s.columns()[1]);
    let mut out = Vec::with_capacity(rows.domain_size);
    for r in rows.start..=rows.last() {
        let mut best = (classes.start, logits.get(&[r, classes.start]));
        for c in classes.start + 1..=classes.last() {
            let v = logits.get(&[r, c]);
            if v > best.1 {
                best = (c, v);
            }
        }
        out.push((r, best.0));
    }
    Ok(out)
}

/// One-hot `(row, class) → 1` relation from integer labels.
pub fn one_hot(row_name: &str, class_name: &str, labels: &[usize], classes: usize) -> Result<TensorRelation> {
    if let Some(l) = labels.iter().find(|l| **l >= classes) {
        return Err(Error::OutOfDomain(format!("label {l} with {classes} classes")));
    }
    let schema = IndexSchema::of(&[(row_name, labels.len()), (class_name, classes)])?;
    TensorRelation::new(schema, 0.0, labels.iter().enumerate().map(|(i, l)| ([i as i64, *l as i64], 1.0)))
}

/// One-hot `(k, row) → 1` picking `rows` in order.
pub fn selection(k_name: &str, row_name: &str, rows: &[usize], total: usize) -> Result<TensorRelation> {
    if let Some(r) = rows.iter().find(|r| **r >= total) {
        return Err(Error::OutOfDomain(format!("row {r} of {total}")));
    }
    let schema = IndexSchema::of(&[(k_name, rows.len()), (row_name, total)])?;
    TensorRelation::new(schema, 0.0, rows.iter().enumerate().map(|(k, r)| ([k as i64, *r as i64], 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{layers as dense_layers, to_dense};

    fn adj(n: usize, edges: &[(i64, i64)]) -> TensorRelation {
        TensorRelation::new(IndexSchema::of(&[("i", n), ("j", n)]).unwrap(), 0.0, edges.iter().map(|(a, b)| ([*a, *b], 1.0))).unwrap()
    }

    #[test]
    fn normalization_matches_dense() {
        let a = adj(4, &[(0, 1), (1, 0), (1, 2), (2, 1)]);
        for loops in [false, true] {
            let n = normalize_adjacency(&a, loops).unwrap();
            let want = dense_layers::row_normalize(&to_dense(&a).unwrap(), loops).unwrap();
            assert!(to_dense(&n).unwrap().max_abs_diff(&want) < 1e-15);
        }
        // isolated vertex 3 keeps a zero row without self-loops
        let n = normalize_adjacency(&a, false).unwrap();
        assert!(n.entries().iter().all(|(c, _)| c[0] != 3));
    }

    #[test]
    fn normalization_rejects_bad_input() {
        let rect = TensorRelation::empty(IndexSchema::of(&[("i", 2), ("j", 3)]).unwrap(), 0.0);
        assert_eq!(normalize_adjacency(&rect, true).unwrap_err().kind(), "NotSquare");
        let weighted = TensorRelation::new(IndexSchema::of(&[("i", 2), ("j", 2)]).unwrap(), 0.0, [([0, 1], 0.5)]).unwrap();
        assert_eq!(normalize_adjacency(&weighted, true).unwrap_err().kind(), "NotBinary");
    }

    #[test]
    fn argmax_ties_and_defaults() {
        let s = IndexSchema::of(&[("row", 3), ("cls", 3)]).unwrap();
        let l = TensorRelation::new(s, 0.0, [([0, 1], 2.0), ([0, 2], 2.0), ([1, 0], -1.0), ([2, 2], -0.5)]).unwrap();
        // row 1: classes 1 and 2 hold the default 0 and beat -1
        // row 2: classes 0 and 1 tie at 0
        assert_eq!(argmax_predict(&l).unwrap(), vec![(0, 1), (1, 1), (2, 0)]);
    }
}
