//! Dense reference implementations: plain arrays and naive loops.
//!
//! Nothing here calls into the relational engine except the conversions in
//! [`dense`], so agreement between the two is evidence rather than tautology.

pub mod dense;
pub mod layers;

use std::collections::BTreeMap;

pub use dense::{finite_diff_grad, from_dense, to_dense, DenseTensor};

use crate::error::{Error, Result};
use crate::layers::{LayerSpec, ModelSpec};

pub type DenseMap = BTreeMap<String, DenseTensor>;

/// Everything a dense forward pass produced.
#[derive(Clone, Debug, Default)]
pub struct DenseTrace {
    /// Output of each layer, by layer name.
    pub outputs: Vec<(String, DenseTensor)>,
    /// Scalar loss, when the model ends in a loss layer.
    pub loss: Option<f64>,
    /// Logits actually scored by the loss (after any row selection).
    pub scored: Option<DenseTensor>,
    pub labels: Vec<usize>,
    pub relu_inputs: Vec<DenseTensor>,
    pub pool_inputs: Vec<DenseTensor>,
}

impl DenseTrace {
    pub fn last(&self) -> Option<&DenseTensor> {
        self.outputs.last().map(|(_, t)| t)
    }

    /// Distance to the nearest non-differentiable point: the smallest relu
    /// input magnitude and the smallest gap between a positive pool maximum
    /// and its runner-up.
    pub fn kink_distance(&self) -> f64 {
        let mut d = f64::INFINITY;
        for t in &self.relu_inputs {
            for v in &t.values {
                d = d.min(v.abs());
            }
        }
        for t in &self.pool_inputs {
            let (n, c, h, w) = (t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
            for img in 0..n {
                for ch in 0..c {
                    for r in 0..h / 2 {
                        for col in 0..w / 2 {
                            let mut v = [
                                t.at(&[img, ch, 2 * r, 2 * col]),
                                t.at(&[img, ch, 2 * r, 2 * col + 1]),
                                t.at(&[img, ch, 2 * r + 1, 2 * col]),
                                t.at(&[img, ch, 2 * r + 1, 2 * col + 1]),
                            ];
                            v.sort_by(|a, b| b.total_cmp(a));
                            if v[0] > 0.0 {
                                d = d.min(v[0] - v[1]);
                            }
                        }
                    }
                }
            }
        }
        d
    }
}

/// Index of the single 1 in each row of a one-hot matrix.
pub fn one_hot_rows(t: &DenseTensor) -> Result<Vec<usize>> {
    if t.shape.len() != 2 {
        return Err(Error::SchemaMismatch(format!("one-hot matrix expected, got shape {:?}", t.shape)));
    }
    (0..t.shape[0])
        .map(|i| {
            let hot: Vec<usize> = (0..t.shape[1]).filter(|j| t.at(&[i, *j]) != 0.0).collect();
            match hot.as_slice() {
                [j] if t.at(&[i, *j]) == 1.0 => Ok(*j),
                _ => Err(Error::SchemaMismatch(format!("row {i} is not one-hot"))),
            }
        })
        .collect()
}

fn get<'a>(m: &'a DenseMap, name: &str) -> Result<&'a DenseTensor> {
    m.get(name).ok_or_else(|| Error::MissingInput(format!("`{name}` not supplied to the dense oracle")))
}

/// Runs a model layer by layer with the naive implementations.
pub fn dense_model_forward(spec: &ModelSpec, inputs: &DenseMap, params: &DenseMap) -> Result<DenseTrace> {
    let feats = spec.features()?;
    let mut x = get(inputs, &feats.name)?.clone();
    let mut trace = DenseTrace::default();
    for layer in &spec.layers {
        let names = layer.param_names();
        let wb = || -> Result<(&DenseTensor, &DenseTensor)> {
            let (w, b) = names.as_ref().expect("layer has parameters");
            Ok((get(params, w)?, get(params, b)?))
        };
        x = match layer {
            LayerSpec::Conv2d { .. } => {
                let (w, b) = wb()?;
                layers::conv2d(&x, w, b)?
            }
            LayerSpec::Relu { .. } => {
                trace.relu_inputs.push(x.clone());
                layers::relu(&x)
            }
            LayerSpec::Maxpool2x2 { .. } => {
                trace.pool_inputs.push(x.clone());
                layers::maxpool2x2(&x)?
            }
            LayerSpec::Flatten { .. } => layers::flatten(&x)?,
            LayerSpec::FullyConnected { .. } => {
                let (w, b) = wb()?;
                layers::fully_connected(&x, w, b)?
            }
            LayerSpec::GraphConv { adjacency, .. } => {
                let (w, b) = wb()?;
                layers::graph_conv(get(inputs, adjacency)?, &x, w, b)?
            }
            LayerSpec::CrossEntropyLoss { labels, selection, .. } => {
                let scored = match selection {
                    Some(s) => layers::select_rows(&x, &one_hot_rows(get(inputs, s)?)?),
                    None => x.clone(),
                };
                let l = one_hot_rows(get(inputs, labels)?)?;
                let loss = layers::cross_entropy(&scored, &l)?;
                trace.loss = Some(loss);
                trace.scored = Some(scored);
                trace.labels = l;
                DenseTensor::scalar(loss)
            }
            LayerSpec::ArgmaxPredict { .. } => x.clone(),
        };
        trace.outputs.push((layer.name().to_string(), x.clone()));
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_rows_rejects_ambiguous_rows() {
        let ok = DenseTensor::from_vec(&[2, 3], vec![0., 1., 0., 1., 0., 0.]).unwrap();
        assert_eq!(one_hot_rows(&ok).unwrap(), vec![1, 0]);
        let bad = DenseTensor::from_vec(&[1, 2], vec![1., 1.]).unwrap();
        assert!(one_hot_rows(&bad).is_err());
    }

    #[test]
    fn kink_distance_sees_relu_and_pool_ties() {
        let mut t = DenseTrace::default();
        t.relu_inputs.push(DenseTensor::from_vec(&[2], vec![0.5, -0.25]).unwrap());
        assert_eq!(t.kink_distance(), 0.25);
        t.pool_inputs.push(DenseTensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.99, 0.0, 0.0]).unwrap());
        assert!((t.kink_distance() - 0.01).abs() < 1e-12);
    }
}
