//! Seeded synthetic datasets: toy images and stochastic-block-model graphs.

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{normalize_adjacency, one_hot, selection, ModelKind, ModelSpec};
use crate::plan::Relations;
use crate::relcore::{filter_range, Coord, IndexSchema, TensorRelation};
use crate::train::partitioned_inputs;

/// A model together with data bound to its inputs.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: ModelSpec,
    pub relations: Relations,
}

impl Dataset {
    /// The first `n` samples, or the whole dataset when it has no more than
    /// `n` or is a graph (whose nodes cannot be separated).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let samples = self.spec.features()?.schema.columns()[0].domain_size;
        if n == 0 || n >= samples || self.spec.model == ModelKind::Gcn {
            return Ok(self.clone());
        }
        let mut relations = self.relations.clone();
        for name in partitioned_inputs(&self.spec) {
            let rel = self.relations.get(name).ok_or_else(|| Error::MissingInput(format!("`{name}` is not bound")))?;
            let col = rel.schema().columns()[0].name.clone();
            relations.insert(name.to_string(), filter_range(rel, &col, 0, n as i64 - 1)?);
        }
        Ok(Dataset { spec: self.spec.with_sample_count(n)?, relations })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyImages {
    pub images: usize,
    pub classes: usize,
    pub channels: usize,
    pub extent: usize,
    /// Upper bound of the uniform background noise.
    pub noise: f64,
}

impl Default for ToyImages {
    fn default() -> Self {
        ToyImages { images: 64, classes: 2, channels: 1, extent: 8, noise: 0.3 }
    }
}

/// Side of the square bright patch.
fn patch_side(extent: usize) -> usize {
    (extent * 3 / 8).max(2).min(extent)
}

/// Top-left corner of class `k`'s patch: spread along the diagonal, then
/// alternately mirrored so neighbouring classes differ in both axes.
fn patch_origin(k: usize, classes: usize, extent: usize) -> (usize, usize) {
    let side = patch_side(extent);
    let span = extent - side;
    let along = if classes > 1 { k * span / (classes - 1) } else { span / 2 };
    if k % 2 == 0 {
        (along, along)
    } else {
        (along, span - along)
    }
}

impl ToyImages {
    pub fn validate(&self) -> Result<()> {
        if self.images == 0 || self.classes < 2 || self.channels == 0 || self.extent < 4 {
            return Err(Error::InvalidParams(format!(
                "need images ≥ 1, classes ≥ 2, channels ≥ 1, extent ≥ 4; got {self:?}"
            )));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::InvalidParams(format!("noise {} must be non-negative", self.noise)));
        }
        Ok(())
    }

    /// Class `label` has a bright patch at its own location; every pixel gets
    /// uniform noise in `[0, noise]`.
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..self.images).map(|_| rng.gen_range(0..self.classes)).collect();
        let noise = Uniform::new_inclusive(0.0, self.noise);
        let side = patch_side(self.extent) as i64;
        let mut entries: Vec<(Coord, f64)> = Vec::new();
        for (img, label) in labels.iter().enumerate() {
            let (pr, pc) = patch_origin(*label, self.classes, self.extent);
            let (pr, pc) = (pr as i64, pc as i64);
            for ch in 0..self.channels as i64 {
                for r in 0..self.extent as i64 {
                    for c in 0..self.extent as i64 {
                        let bright = (pr..pr + side).contains(&r) && (pc..pc + side).contains(&c);
                        let v = if bright { 1.0 } else { 0.0 } + if self.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        entries.push((Coord::from_slice(&[img as i64, ch, r, c]), v));
                    }
                }
            }
        }
        let schema = IndexSchema::of(&[("image", self.images), ("channel", self.channels), ("r", self.extent), ("c", self.extent)])?;
        let samples = TensorRelation::new(schema, 0.0, entries)?;
        let spec = ModelSpec::small_cnn(self.images, self.channels, self.extent, self.classes);
        let relations = Relations::from([
            ("samples".to_string(), samples),
            ("labels".to_string(), one_hot("image", "i", &labels, self.classes)?),
        ]);
        Ok(Dataset { spec, relations })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmGraph {
    pub nodes: usize,
    pub blocks: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    pub features: usize,
    pub hidden: usize,
    pub train_fraction: f64,
    /// Probability that each feature of a node's own block slice is set.
    pub feature_signal: f64,
    /// Probability that each other feature is set.
    pub feature_noise: f64,
    pub self_loops: bool,
}

impl Default for SbmGraph {
    fn default() -> Self {
        SbmGraph {
            nodes: 64,
            blocks: 2,
            p_intra: 0.2,
            p_inter: 0.02,
            features: 16,
            hidden: 8,
            train_fraction: 0.5,
            feature_signal: 0.5,
            feature_noise: 0.1,
            self_loops: true,
        }
    }
}

/// Raw graph pieces, before normalization.
#[derive(Clone, Debug)]
pub struct SbmParts {
    pub blocks: Vec<usize>,
    pub edges: TensorRelation,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SbmGraph {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.nodes < 2 || self.blocks < 2 || self.blocks > self.nodes || self.features < self.blocks || self.hidden == 0 {
            return Err(Error::InvalidParams(format!("inconsistent graph sizes: {self:?}")));
        }
        if !(prob(self.p_intra) && prob(self.p_inter) && prob(self.feature_signal) && prob(self.feature_noise)) {
            return Err(Error::InvalidParams("probabilities must lie in [0, 1]".into()));
        }
        let k = self.train_count();
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) || k == 0 {
            return Err(Error::InvalidParams(format!("train fraction {} selects no nodes", self.train_fraction)));
        }
        Ok(())
    }

    pub fn train_count(&self) -> usize {
        ((self.nodes as f64 * self.train_fraction).round() as usize).min(self.nodes)
    }

    /// Block of node `i`: contiguous, near-equal ranges.
    pub fn block_of(&self, i: usize) -> usize {
        i * self.blocks / self.nodes
    }

    /// Symmetric 0/1 adjacency with empty diagonal, and the train/test split.
    pub fn sample_parts(&self, seed: u64) -> Result<SbmParts> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks: Vec<usize> = (0..self.nodes).map(|i| self.block_of(i)).collect();
        let mut edges = Vec::new();
        for i in 0..self.nodes {
            for j in i + 1..self.nodes {
                let p = if blocks[i] == blocks[j] { self.p_intra } else { self.p_inter };
                if rng.gen_bool(p) {
                    edges.push(([i as i64, j as i64], 1.0));
                    edges.push(([j as i64, i as i64], 1.0));
                }
            }
        }
        let edges = TensorRelation::new(IndexSchema::of(&[("i", self.nodes), ("j", self.nodes)])?, 0.0, edges)?;
        let mut order: Vec<usize> = (0..self.nodes).collect();
        order.shuffle(&mut rng);
        let mut train = order[..self.train_count()].to_vec();
        let mut test = order[self.train_count()..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok(SbmParts { blocks, edges, train, test })
    }

    /// Graph, noisy features and masks, bound to the inputs of [`ModelSpec::gcn`].
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        let parts = self.sample_parts(seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
        let width = self.features / self.blocks;
        let mut feats = Vec::new();
        for (i, b) in parts.blocks.iter().enumerate() {
            let own = b * width..(b + 1) * width;
            let mut row: Vec<usize> = (0..self.features)
                .filter(|j| rng.gen_bool(if own.contains(j) { self.feature_signal } else { self.feature_noise }))
                .collect();
            if row.is_empty() {
                row.push(rng.gen_range(0..self.features));
            }
            feats.extend(row.into_iter().map(|j| ([i as i64, j as i64], 1.0)));
        }
        let samples = TensorRelation::new(IndexSchema::of(&[("i", self.nodes), ("j", self.features)])?, 0.0, feats)?;
        let adj = normalize_adjacency(&parts.edges, self.self_loops)?;
        let train_labels: Vec<usize> = parts.train.iter().map(|i| parts.blocks[*i]).collect();
        let test_labels: Vec<usize> = parts.test.iter().map(|i| parts.blocks[*i]).collect();
        let mut relations = Relations::from([
            ("samples".to_string(), samples),
            ("adj".to_string(), adj),
            ("edges".to_string(), parts.edges.clone()),
            ("train_select".to_string(), selection("k", "i", &parts.train, self.nodes)?),
            ("labels".to_string(), one_hot("i", "j", &train_labels, self.blocks)?),
        ]);
        if !parts.test.is_empty() {
            relations.insert("test_select".into(), selection("k", "i", &parts.test, self.nodes)?);
            relations.insert("test_labels".into(), one_hot("i", "j", &test_labels, self.blocks)?);
        }
        let spec = ModelSpec::gcn(self.nodes, self.features, self.hidden, self.blocks, parts.train.len());
        Ok(Dataset { spec, relations })
    }
}

/// Random inputs for the full-size image classifier: `images` sparse
/// 3×32×32 images with about `density` of the pixels stored.
pub fn random_full_images(images: usize, density: f64, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ModelSpec::full_cnn(images);
    let schema = spec.features()?.schema.clone();
    let mut entries = Vec::new();
    schema.for_each_coord(|c| {
        if rng.gen_bool(density) {
            entries.push((Coord::from_slice(c), rng.gen_range(-1.0..1.0)));
        }
    });
    let samples = TensorRelation::new(schema, 0.0, entries)?;
    let labels: Vec<usize> = (0..images).map(|_| rng.gen_range(0..10)).collect();
    let relations = Relations::from([
        ("samples".to_string(), samples),
        ("labels".to_string(), one_hot("image", "i", &labels, 10)?),
    ]);
    Ok(Dataset { spec, relations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_images_are_seeded() {
        let t = ToyImages::default();
        let a = t.generate(3).unwrap();
        let b = t.generate(3).unwrap();
        assert_eq!(a.relations, b.relations);
        assert_ne!(a.relations, t.generate(4).unwrap().relations);
        assert_eq!(a.relations["labels"].len(), 64);
    }

    #[test]
    fn patches_differ_between_classes() {
        for classes in [2, 3, 10] {
            let origins: Vec<_> = (0..classes).map(|k| patch_origin(k, classes, 32)).collect();
            for (i, a) in origins.iter().enumerate() {
                assert!(origins[i + 1..].iter().all(|b| a != b), "{origins:?}");
            }
        }
    }

    #[test]
    fn sbm_is_symmetric_without_self_edges() {
        let g = SbmGraph::default();
        let p = g.sample_parts(1).unwrap();
        for (c, _) in p.edges.entries() {
            assert_ne!(c[0], c[1]);
            assert_eq!(p.edges.get(&[c[1], c[0]]), 1.0);
        }
        assert_eq!(p.train.len() + p.test.len(), 64);
    }

    #[test]
    fn head_keeps_leading_samples() {
        let ds = ToyImages { images: 6, ..ToyImages::default() }.generate(2).unwrap();
        let h = ds.head(2).unwrap();
        assert_eq!(h.spec.features().unwrap().schema.columns()[0].domain_size, 2);
        assert_eq!(h.relations["labels"].len(), 2);
        assert_eq!(h.relations["samples"].get(&[1, 0, 3, 3]), ds.relations["samples"].get(&[1, 0, 3, 3]));
        let plan = crate::layers::build_model(&h.spec).unwrap();
        let params = crate::checks::random_point(&plan, 0).unwrap();
        plan.evaluate(&h.relations, params.relations()).unwrap();
    }

    #[test]
    fn sbm_has_more_intra_than_inter_block_edges() {
        let g = SbmGraph::default();
        for seed in 0..20 {
            let p = g.sample_parts(seed).unwrap();
            let intra = p.edges.entries().iter().filter(|(c, _)| p.blocks[c[0] as usize] == p.blocks[c[1] as usize]).count();
            assert!(2 * intra > p.edges.len(), "seed {seed}: {intra} of {}", p.edges.len());
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        let bad = SbmGraph { p_intra: 1.5, ..SbmGraph::default() };
        assert_eq!(bad.generate(0).unwrap_err().kind(), "InvalidParams");
        let bad = ToyImages { classes: 1, ..ToyImages::default() };
        assert_eq!(bad.generate(0).unwrap_err().kind(), "InvalidParams");
    }
}
