//! Naive loop implementations of every layer, written against plain arrays.

use super::dense::DenseTensor;
use crate::error::{Error, Result};

fn expect_rank(t: &DenseTensor, rank: usize, what: &str) -> Result<()> {
    if t.shape.len() != rank {
        return Err(Error::SchemaMismatch(format!("{what}: expected rank {rank}, got shape {:?}", t.shape)));
    }
    Ok(())
}

/// Valid convolution, stride 1. `x`: N×C×H×W, `w`: O×C×K×K, `b`: O.
pub fn conv2d(x: &DenseTensor, w: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    expect_rank(x, 4, "conv input")?;
    expect_rank(w, 4, "conv weight")?;
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, c2, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    if c != c2 || b.shape != [o] || kh > h || kw > wd {
        return Err(Error::SchemaMismatch(format!("conv shapes {:?} {:?} {:?}", x.shape, w.shape, b.shape)));
    }
    let (oh, ow) = (h - kh + 1, wd - kw + 1);
    let mut y = DenseTensor::zeros(&[n, o, oh, ow]);
    for img in 0..n {
        for oc in 0..o {
            for r in 0..oh {
                for col in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                acc += x.at(&[img, ic, r + i, col + j]) * w.at(&[oc, ic, i, j]);
                            }
                        }
                    }
                    y.set(&[img, oc, r, col], acc + b.values[oc]);
                }
            }
        }
    }
    Ok(y)
}

pub fn relu(x: &DenseTensor) -> DenseTensor {
    DenseTensor { shape: x.shape.clone(), values: x.values.iter().map(|v| if *v > 0.0 { *v } else { 0.0 }).collect() }
}

/// 2×2 max pooling with stride 2 over the last two axes of an N×C×H×W array.
pub fn maxpool2x2(x: &DenseTensor) -> Result<DenseTensor> {
    expect_rank(x, 4, "pool input")?;
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddExtent(format!("{h}×{w}")));
    }
    let mut y = DenseTensor::zeros(&[n, c, h / 2, w / 2]);
    for img in 0..n {
        for ch in 0..c {
            for r in 0..h / 2 {
                for col in 0..w / 2 {
                    let mut m = f64::NEG_INFINITY;
                    for i in 0..2 {
                        for j in 0..2 {
                            m = m.max(x.at(&[img, ch, 2 * r + i, 2 * col + j]));
                        }
                    }
                    y.set(&[img, ch, r, col], m);
                }
            }
        }
    }
    Ok(y)
}

/// N×C×H×W → N×(C·H·W), row-major.
pub fn flatten(x: &DenseTensor) -> Result<DenseTensor> {
    expect_rank(x, 4, "flatten input")?;
    let n = x.shape[0];
    let per = x.shape[1] * x.shape[2] * x.shape[3];
    DenseTensor::from_vec(&[n, per], x.values.clone())
}

/// `x`: N×I, `w`: O×I, `b`: O → N×O.
pub fn fully_connected(x: &DenseTensor, w: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    expect_rank(x, 2, "fc input")?;
    expect_rank(w, 2, "fc weight")?;
    let (n, i_dim) = (x.shape[0], x.shape[1]);
    let o = w.shape[0];
    if w.shape[1] != i_dim || b.shape != [o] {
        return Err(Error::SchemaMismatch(format!("fc shapes {:?} {:?} {:?}", x.shape, w.shape, b.shape)));
    }
    let mut y = DenseTensor::zeros(&[n, o]);
    for img in 0..n {
        for out in 0..o {
            let mut acc = 0.0;
            for k in 0..i_dim {
                acc += w.at(&[out, k]) * x.at(&[img, k]);
            }
            y.set(&[img, out], acc + b.values[out]);
        }
    }
    Ok(y)
}

fn matmul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    expect_rank(a, 2, "matmul lhs")?;
    expect_rank(b, 2, "matmul rhs")?;
    let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
    if b.shape[0] != k {
        return Err(Error::SchemaMismatch(format!("matmul {:?} × {:?}", a.shape, b.shape)));
    }
    let mut y = DenseTensor::zeros(&[n, m]);
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a.at(&[i, t]) * b.at(&[t, j]);
            }
            y.set(&[i, j], acc);
        }
    }
    Ok(y)
}

/// `A X W + B` with `B` broadcast over rows.
pub fn graph_conv(adj: &DenseTensor, x: &DenseTensor, w: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    let mut y = matmul(adj, &matmul(x, w)?)?;
    let h = y.shape[1];
    if b.shape != [h] {
        return Err(Error::SchemaMismatch(format!("gc bias {:?} for width {h}", b.shape)));
    }
    for i in 0..y.shape[0] {
        for j in 0..h {
            let v = y.at(&[i, j]) + b.values[j];
            y.set(&[i, j], v);
        }
    }
    Ok(y)
}

/// Mean over rows of `-x[l] + ln Σ_j exp(x[j])`.
pub fn cross_entropy(logits: &DenseTensor, labels: &[usize]) -> Result<f64> {
    expect_rank(logits, 2, "logits")?;
    let (n, k) = (logits.shape[0], logits.shape[1]);
    if labels.len() != n || labels.iter().any(|l| *l >= k) {
        return Err(Error::SchemaMismatch(format!("{} labels for {n}×{k} logits", labels.len())));
    }
    let mut total = 0.0;
    for (i, l) in labels.iter().enumerate() {
        let mut s = 0.0;
        for j in 0..k {
            s += logits.at(&[i, j]).exp();
        }
        total += -logits.at(&[i, *l]) + s.ln();
    }
    Ok(total / n as f64)
}

/// Softmax minus one-hot, divided by the row count: the gradient of
/// [`cross_entropy`] with respect to the logits.
pub fn cross_entropy_grad(logits: &DenseTensor, labels: &[usize]) -> DenseTensor {
    let (n, k) = (logits.shape[0], logits.shape[1]);
    let mut g = DenseTensor::zeros(&[n, k]);
    for i in 0..n {
        let s: f64 = (0..k).map(|j| logits.at(&[i, j]).exp()).sum();
        for j in 0..k {
            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
            g.set(&[i, j], (logits.at(&[i, j]).exp() / s - onehot) / n as f64);
        }
    }
    g
}

/// Optional self-loops, then each nonzero row divided by its sum.
pub fn row_normalize(adj: &DenseTensor, self_loops: bool) -> Result<DenseTensor> {
    expect_rank(adj, 2, "adjacency")?;
    let n = adj.shape[0];
    if adj.shape[1] != n {
        return Err(Error::NotSquare(format!("{:?}", adj.shape)));
    }
    let mut a = adj.clone();
    if self_loops {
        for i in 0..n {
            a.set(&[i, i], 1.0);
        }
    }
    for i in 0..n {
        let s: f64 = (0..n).map(|j| a.at(&[i, j])).sum();
        if s != 0.0 {
            for j in 0..n {
                let v = a.at(&[i, j]) / s;
                a.set(&[i, j], v);
            }
        }
    }
    Ok(a)
}

/// Index of the first maximal entry in each row.
pub fn argmax_rows(x: &DenseTensor) -> Vec<usize> {
    let (n, k) = (x.shape[0], x.shape[1]);
    (0..n)
        .map(|i| {
            let mut best = 0;
            for j in 1..k {
                if x.at(&[i, j]) > x.at(&[i, best]) {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Rows of `x` picked by `rows`, in that order.
pub fn select_rows(x: &DenseTensor, rows: &[usize]) -> DenseTensor {
    let k = x.shape[1];
    let mut y = DenseTensor::zeros(&[rows.len(), k]);
    for (out, r) in rows.iter().enumerate() {
        for j in 0..k {
            y.set(&[out, j], x.at(&[*r, j]));
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_of_ones() {
        let x = DenseTensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let w = DenseTensor::from_vec(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let y = conv2d(&x, &w, &DenseTensor::zeros(&[1])).unwrap();
        assert_eq!(y.shape, vec![1, 1, 2, 2]);
        assert_eq!(y.values, vec![4.0; 4]);
    }

    #[test]
    fn zero_logits_give_ln_classes() {
        let x = DenseTensor::zeros(&[3, 10]);
        let l = cross_entropy(&x, &[0, 4, 9]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn isolated_vertex_row_stays_zero() {
        let a = DenseTensor::from_vec(&[3, 3], vec![0., 1., 0., 1., 0., 0., 0., 0., 0.]).unwrap();
        let n = row_normalize(&a, false).unwrap();
        assert_eq!(&n.values[6..9], &[0.0, 0.0, 0.0]);
        assert_eq!(n.at(&[0, 1]), 1.0);
    }
}
