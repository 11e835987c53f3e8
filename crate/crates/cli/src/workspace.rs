use std::fs;
use std::path::{Path, PathBuf};

use reldl::datasets::{random_full_images, Dataset, SbmGraph, ToyImages};
use reldl::layers::ModelSpec;
use reldl::plan::{Plan, Relations};
use reldl::relcore::io::{read_relation, sidecar_path};
use reldl::train::{init_plan_params, ParamStore};
use reldl::{Error, Result};

/// Relations read alongside the declared inputs when present.
const OPTIONAL_DATA: [&str; 2] = ["test_select", "test_labels"];

pub const BUILTIN_MODELS: [&str; 3] = ["toy-cnn", "gcn", "full-cnn"];

/// Everything a command reads or writes lives under one root.
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: &Path) -> Self {
        Workspace { root: root.to_path_buf() }
    }

    pub fn model_path(&self) -> PathBuf {
        self.root.join("model.json")
    }
    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn params_dir(&self) -> PathBuf {
        self.root.join("params")
    }
    pub fn sql_dir(&self) -> PathBuf {
        self.root.join("sql")
    }
    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn history_path(&self) -> PathBuf {
        self.root.join("history.csv")
    }
    pub fn predictions_path(&self) -> PathBuf {
        self.root.join("predictions.csv")
    }

    pub fn has_model(&self) -> bool {
        self.model_path().is_file()
    }

    /// `model` is a built-in name or a path to a spec file; otherwise `model.json`.
    pub fn spec(&self, model: Option<&str>) -> Result<ModelSpec> {
        if let Some(m) = model {
            if let Some(spec) = builtin_spec(m) {
                return Ok(spec);
            }
            let p = Path::new(m);
            if !p.is_file() {
                return Err(Error::InvalidParams(format!(
                    "`{m}` is neither a built-in model ({}) nor a spec file",
                    BUILTIN_MODELS.join(", ")
                )));
            }
            return ModelSpec::from_json(&fs::read_to_string(p)?);
        }
        let p = self.model_path();
        if !p.is_file() {
            return Err(Error::MissingInput(format!("no model.json in {}; run `reldl generate` first", self.root.display())));
        }
        ModelSpec::from_json(&fs::read_to_string(p)?)
    }

    pub fn data(&self, spec: &ModelSpec) -> Result<Relations> {
        let dir = self.data_dir();
        let mut rels = Relations::new();
        for input in &spec.inputs {
            rels.insert(input.name.clone(), read_relation(&dir, &input.name)?);
        }
        for name in OPTIONAL_DATA {
            if !rels.contains_key(name) && sidecar_path(&dir, name).is_file() {
                rels.insert(name.to_string(), read_relation(&dir, name)?);
            }
        }
        Ok(rels)
    }

    /// Saved parameters, or a fresh initialization when `params/` does not exist.
    pub fn params(&self, plan: &Plan, seed: u64) -> Result<(ParamStore, bool)> {
        let dir = self.params_dir();
        if dir.is_dir() {
            Ok((ParamStore::load(&dir, plan)?, false))
        } else {
            Ok((init_plan_params(plan, seed)?, true))
        }
    }
}

pub fn builtin_spec(name: &str) -> Option<ModelSpec> {
    match name {
        "toy-cnn" => Some(ModelSpec::small_cnn(64, 1, 8, 2)),
        "gcn" => {
            let g = SbmGraph::default();
            Some(ModelSpec::gcn(g.nodes, g.features, g.hidden, g.blocks, g.train_count()))
        }
        "full-cnn" => Some(ModelSpec::full_cnn(2)),
        _ => None,
    }
}

/// Data for a built-in model. `images` overrides the toy image count.
pub fn builtin_dataset(name: &str, seed: u64, images: Option<usize>) -> Result<Dataset> {
    match name {
        "toy-cnn" => {
            let t = ToyImages::default();
            ToyImages { images: images.unwrap_or(t.images), ..t }.generate(seed)
        }
        "gcn" => SbmGraph::default().generate(seed),
        "full-cnn" => random_full_images(images.unwrap_or(2), 0.3, seed),
        other => Err(Error::InvalidParams(format!("`{other}` is not a built-in model ({})", BUILTIN_MODELS.join(", ")))),
    }
}
