use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plan::InputRole;
use crate::relcore::{Column, IndexSchema};
use crate::train::TrainConfig;

/// One step of a network, as declared in a model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weight: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    Relu {
        name: String,
    },
    Maxpool2x2 {
        name: String,
    },
    Flatten {
        name: String,
    },
    FullyConnected {
        name: String,
        in_dim: usize,
        out_dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weight: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    GraphConv {
        name: String,
        in_dim: usize,
        out_dim: usize,
        #[serde(default = "default_adjacency")]
        adjacency: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weight: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    CrossEntropyLoss {
        name: String,
        #[serde(default = "default_labels")]
        labels: String,
        /// One-hot `(k, row)` relation restricting the loss to some rows.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        selection: Option<String>,
    },
    ArgmaxPredict {
        name: String,
    },
}

fn default_adjacency() -> String {
    "adj".into()
}

fn default_labels() -> String {
    "labels".into()
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Conv2d { name, .. }
            | LayerSpec::Relu { name }
            | LayerSpec::Maxpool2x2 { name }
            | LayerSpec::Flatten { name }
            | LayerSpec::FullyConnected { name, .. }
            | LayerSpec::GraphConv { name, .. }
            | LayerSpec::CrossEntropyLoss { name, .. }
            | LayerSpec::ArgmaxPredict { name } => name,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu { .. } => "relu",
            LayerSpec::Maxpool2x2 { .. } => "maxpool2x2",
            LayerSpec::Flatten { .. } => "flatten",
            LayerSpec::FullyConnected { .. } => "fully_connected",
            LayerSpec::GraphConv { .. } => "graph_conv",
            LayerSpec::CrossEntropyLoss { .. } => "cross_entropy_loss",
            LayerSpec::ArgmaxPredict { .. } => "argmax_predict",
        }
    }

    /// Weight and bias relation names for layers that have parameters.
    pub fn param_names(&self) -> Option<(String, String)> {
        let pick = |name: &str, given: &Option<String>, suffix: &str| given.clone().unwrap_or_else(|| format!("{name}_{suffix}"));
        match self {
            LayerSpec::Conv2d { name, weight, bias, .. } | LayerSpec::FullyConnected { name, weight, bias, .. } => {
                Some((pick(name, weight, "weight"), pick(name, bias, "bias")))
            }
            LayerSpec::GraphConv { name, weight, bias, .. } => Some((pick(name, weight, "w"), pick(name, bias, "b"))),
            _ => None,
        }
    }

    pub fn conv2d(name: &str, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv2d { name: name.into(), in_channels, out_channels, kernel, weight: None, bias: None }
    }

    pub fn relu(name: &str) -> Self {
        LayerSpec::Relu { name: name.into() }
    }

    pub fn maxpool(name: &str) -> Self {
        LayerSpec::Maxpool2x2 { name: name.into() }
    }

    pub fn flatten(name: &str) -> Self {
        LayerSpec::Flatten { name: name.into() }
    }

    pub fn fc(name: &str, in_dim: usize, out_dim: usize) -> Self {
        LayerSpec::FullyConnected { name: name.into(), in_dim, out_dim, weight: None, bias: None }
    }

    pub fn graph_conv(name: &str, in_dim: usize, out_dim: usize) -> Self {
        LayerSpec::GraphConv {
            name: name.into(),
            in_dim,
            out_dim,
            adjacency: default_adjacency(),
            weight: Some(format!("{name}_w")),
            bias: Some(format!("{name}_b")),
        }
    }

    pub fn cross_entropy(name: &str) -> Self {
        LayerSpec::CrossEntropyLoss { name: name.into(), labels: default_labels(), selection: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Cnn,
    Gcn,
    Custom,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Cnn => "cnn",
            ModelKind::Gcn => "gcn",
            ModelKind::Custom => "custom",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub name: String,
    pub schema: IndexSchema,
    pub role: InputRole,
}

/// Declarative model: inputs, layer chain, class count and optional training block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub model: ModelKind,
    pub class_count: usize,
    pub inputs: Vec<InputSpec>,
    pub layers: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

fn input(name: &str, cols: &[(&str, usize)], role: InputRole) -> InputSpec {
    InputSpec { name: name.into(), schema: IndexSchema::of(cols).expect("static schema"), role }
}

impl ModelSpec {
    /// The image classifier with the channel, kernel and width choices of the
    /// classic 32×32 RGB, 10-class setup: conv(6,5) → relu → pool → conv(16,5)
    /// → relu → pool → flatten(400) → fc(120) → relu → fc(84) → relu → fc(10)
    /// → cross-entropy.
    pub fn full_cnn(images: usize) -> Self {
        ModelSpec {
            model: ModelKind::Cnn,
            class_count: 10,
            inputs: vec![
                input("samples", &[("image", images), ("channel", 3), ("r", 32), ("c", 32)], InputRole::Features),
                input("labels", &[("image", images), ("i", 10)], InputRole::Labels),
            ],
            layers: vec![
                LayerSpec::conv2d("conv1", 3, 6, 5),
                LayerSpec::relu("relu1"),
                LayerSpec::maxpool("pool1"),
                LayerSpec::conv2d("conv2", 6, 16, 5),
                LayerSpec::relu("relu2"),
                LayerSpec::maxpool("pool2"),
                LayerSpec::flatten("flatten"),
                LayerSpec::fc("fc1", 400, 120),
                LayerSpec::relu("relu3"),
                LayerSpec::fc("fc2", 120, 84),
                LayerSpec::relu("relu4"),
                LayerSpec::fc("fc3", 84, 10),
                LayerSpec::cross_entropy("x_ent"),
            ],
            train: None,
        }
    }

    /// Desk-scale classifier: conv(k) → relu → pool → flatten → fc → relu → fc → cross-entropy.
    pub fn small_cnn(images: usize, channels: usize, extent: usize, classes: usize) -> Self {
        let (conv_out, kernel, hidden) = (4, 3, 16);
        let pooled = (extent - kernel + 1) / 2;
        ModelSpec {
            model: ModelKind::Cnn,
            class_count: classes,
            inputs: vec![
                input("samples", &[("image", images), ("channel", channels), ("r", extent), ("c", extent)], InputRole::Features),
                input("labels", &[("image", images), ("i", classes)], InputRole::Labels),
            ],
            layers: vec![
                LayerSpec::conv2d("conv1", channels, conv_out, kernel),
                LayerSpec::relu("relu1"),
                LayerSpec::maxpool("pool1"),
                LayerSpec::flatten("flatten"),
                LayerSpec::fc("fc1", conv_out * pooled * pooled, hidden),
                LayerSpec::relu("relu2"),
                LayerSpec::fc("fc2", hidden, classes),
                LayerSpec::cross_entropy("x_ent"),
            ],
            train: None,
        }
    }

    /// Two graph-convolution layers, loss restricted to `labelled` selected nodes:
    /// M → gc(H) → relu → gc(C) → cross-entropy.
    pub fn gcn(nodes: usize, features: usize, hidden: usize, classes: usize, labelled: usize) -> Self {
        ModelSpec {
            model: ModelKind::Gcn,
            class_count: classes,
            inputs: vec![
                input("samples", &[("i", nodes), ("j", features)], InputRole::Features),
                input("adj", &[("i", nodes), ("j", nodes)], InputRole::Adjacency),
                input("train_select", &[("k", labelled), ("i", nodes)], InputRole::Selection),
                input("labels", &[("i", labelled), ("j", classes)], InputRole::Labels),
            ],
            layers: vec![
                LayerSpec::graph_conv("gc1", features, hidden),
                LayerSpec::relu("relu1"),
                LayerSpec::graph_conv("gc2", hidden, classes),
                LayerSpec::CrossEntropyLoss {
                    name: "x_ent".into(),
                    labels: "labels".into(),
                    selection: Some("train_select".into()),
                },
            ],
            train: None,
        }
    }

    pub fn input(&self, name: &str) -> Result<&InputSpec> {
        self.inputs
            .iter()
            .find(|i| i.name == name)
            .ok_or_else(|| Error::MissingInput(format!("model declares no input `{name}`")))
    }

    /// The network input: the first input with the `features` role.
    pub fn features(&self) -> Result<&InputSpec> {
        self.inputs
            .iter()
            .find(|i| i.role == InputRole::Features)
            .ok_or_else(|| Error::MissingInput("model declares no features input".into()))
    }

    /// Copy of this model with the sample axis (first column of the features
    /// and labels inputs) resized, e.g. for a minibatch.
    pub fn with_sample_count(&self, n: usize) -> Result<Self> {
        if self.model == ModelKind::Gcn {
            return Err(Error::InvalidParams("graph models are trained full-batch".into()));
        }
        let mut out = self.clone();
        for inp in &mut out.inputs {
            if matches!(inp.role, InputRole::Features | InputRole::Labels) {
                let mut cols = inp.schema.columns().to_vec();
                if let Some(c) = cols.first_mut() {
                    *c = Column::new(c.name.clone(), n);
                }
                inp.schema = IndexSchema::new(cols)?;
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        for spec in [ModelSpec::full_cnn(2), ModelSpec::gcn(8, 4, 3, 2, 5)] {
            let text = spec.to_json().unwrap();
            assert_eq!(ModelSpec::from_json(&text).unwrap(), spec);
        }
    }

    #[test]
    fn layer_json_shape() {
        let l: LayerSpec = serde_json::from_str(r#"{"kind":"conv2d","name":"conv1","in_channels":3,"out_channels":6,"kernel":5}"#).unwrap();
        assert_eq!(l, LayerSpec::conv2d("conv1", 3, 6, 5));
        assert!(serde_json::from_str::<LayerSpec>(r#"{"kind":"dropout","name":"d"}"#).is_err());
    }
}
