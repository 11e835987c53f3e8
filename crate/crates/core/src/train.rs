//! Training loops: seeded initialization, plain SGD, full-batch and minibatch epochs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, forward_with_tape, GradientSet, Tape};
use crate::error::{Error, Result};
use crate::layers::{argmax_predict, build_model, ModelKind, ModelSpec};
use crate::plan::{InputRole, Plan, Relations};
use crate::relcore::{filter_range, io, join_add, scalar_map, Coord, ScalarFn, TensorRelation};

/// Number of samples per step, or the whole dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "BatchRepr", into = "BatchRepr")]
pub enum BatchSize {
    #[default]
    All,
    Size(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BatchRepr {
    Word(String),
    Number(usize),
}

impl TryFrom<BatchRepr> for BatchSize {
    type Error = String;
    fn try_from(r: BatchRepr) -> std::result::Result<Self, String> {
        match r {
            BatchRepr::Word(w) => w.parse(),
            BatchRepr::Number(n) => BatchSize::try_from_usize(n),
        }
    }
}

impl From<BatchSize> for BatchRepr {
    fn from(b: BatchSize) -> Self {
        match b {
            BatchSize::All => BatchRepr::Word("all".into()),
            BatchSize::Size(n) => BatchRepr::Number(n),
        }
    }
}

impl BatchSize {
    fn try_from_usize(n: usize) -> std::result::Result<Self, String> {
        if n == 0 {
            Err("batch size must be positive".into())
        } else {
            Ok(BatchSize::Size(n))
        }
    }
}

impl std::str::FromStr for BatchSize {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(BatchSize::All);
        }
        let n: usize = s.parse().map_err(|_| format!("batch size must be a positive integer or `all`, got `{s}`"))?;
        BatchSize::try_from_usize(n)
    }
}

impl fmt::Display for BatchSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchSize::All => f.write_str("all"),
            BatchSize::Size(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    #[serde(default)]
    pub batch_size: BatchSize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_threshold: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.1, max_epochs: 200, batch_size: BatchSize::All, loss_threshold: None, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self, samples: usize) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidParams(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if let BatchSize::Size(n) = self.batch_size {
            if n > samples {
                return Err(Error::InvalidParams(format!("batch size {n} exceeds the {samples} samples")));
            }
        }
        Ok(())
    }
}

/// Named parameter relations. Schemas are fixed at initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    params: Relations,
}

impl ParamStore {
    pub fn new(params: Relations) -> Self {
        ParamStore { params }
    }

    pub fn relations(&self) -> &Relations {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&TensorRelation> {
        self.params.get(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.keys().map(String::as_str).collect()
    }

    pub fn into_relations(self) -> Relations {
        self.params
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for (name, rel) in &self.params {
            io::write_relation(dir, name, rel)?;
        }
        Ok(())
    }

    /// Reads every parameter the plan declares from `dir`.
    pub fn load(dir: &Path, plan: &Plan) -> Result<Self> {
        let mut params = Relations::new();
        for p in &plan.params {
            let rel = io::read_relation(dir, &p.name)?;
            if !rel.schema().same_shape(&p.schema) {
                return Err(Error::SchemaMismatch(format!("parameter `{}` on disk has the wrong shape", p.name)));
            }
            params.insert(p.name.clone(), rel);
        }
        Ok(ParamStore { params })
    }
}

/// Weights uniform in `±1/√fan_in`, biases zero. Parameters are drawn in
/// declaration order, coordinates in lexicographic order.
pub fn init_plan_params(plan: &Plan, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Relations::new();
    for p in &plan.params {
        let rel = match p.fan_in {
            None => TensorRelation::empty(p.schema.clone(), 0.0),
            Some(fan_in) => {
                let a = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-a, a);
                let mut entries = Vec::new();
                p.schema.for_each_coord(|c| entries.push((Coord::from_slice(c), dist.sample(&mut rng))));
                TensorRelation::new(p.schema.clone(), 0.0, entries)?
            }
        };
        params.insert(p.name.clone(), rel);
    }
    Ok(ParamStore { params })
}

pub fn init_params(model: &ModelSpec, seed: u64) -> Result<ParamStore> {
    init_plan_params(&build_model(model)?, seed)
}

/// `p ← p − lr·g` for every parameter with a gradient.
pub fn sgd_step(params: &ParamStore, grads: &GradientSet, lr: f64) -> Result<ParamStore> {
    let mut out = params.params.clone();
    for (name, g) in grads {
        let p = params.params.get(name).ok_or_else(|| Error::SchemaMismatch(format!("gradient for unknown parameter `{name}`")))?;
        if !p.schema().same_shape(g.schema()) || !p.schema().names().eq(g.schema().names()) {
            return Err(Error::SchemaMismatch(format!("gradient of `{name}` does not match its parameter")));
        }
        let step = scalar_map(g, ScalarFn::MulConst(-lr))?;
        let eqs: Vec<(String, String)> = p.schema().names().map(|n| (n.to_string(), n.to_string())).collect();
        let next = join_add(p, &step, &eqs, &[])?.canonicalize();
        next.check_valid()?;
        out.insert(name.clone(), next);
    }
    Ok(ParamStore { params: out })
}

/// One line of the training history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainResult {
    pub params: ParamStore,
    pub history: Vec<EpochRecord>,
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    if history.is_empty() {
        w.write_record(["epoch", "loss", "accuracy"])?;
    }
    w.flush()?;
    Ok(())
}

/// Correct predictions and scored rows for the loss head of `tape`, if any.
pub fn correct_predictions(tape: &Tape<'_>, data: &Relations) -> Result<Option<(usize, usize)>> {
    let Some(head) = &tape.plan().loss else { return Ok(None) };
    let labels = data
        .get(&head.labels)
        .ok_or_else(|| Error::MissingInput(format!("labels `{}` are not bound", head.labels)))?;
    let preds = argmax_predict(tape.value(head.logits))?;
    let correct = preds.iter().filter(|(r, c)| labels.get(&[*r, *c]) == 1.0).count();
    Ok(Some((correct, preds.len())))
}

fn param_names(plan: &Plan) -> Vec<&str> {
    plan.params.iter().map(|p| p.name.as_str()).collect()
}

/// Full-batch loop: forward, backward and one step over the whole dataset each epoch.
pub fn train_full(plan: &Plan, data: &Relations, config: &TrainConfig) -> Result<TrainResult> {
    train_full_from(plan, data, init_plan_params(plan, config.seed)?, config)
}

pub fn train_full_from(plan: &Plan, data: &Relations, mut params: ParamStore, config: &TrainConfig) -> Result<TrainResult> {
    config.validate(usize::MAX)?;
    let wrt = param_names(plan);
    let mut history = Vec::new();
    for epoch in 1..=config.max_epochs {
        let (loss, tape) = forward_with_tape(plan, data, &params.params)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        let accuracy = correct_predictions(&tape, data)?.map(|(c, n)| c as f64 / n as f64);
        history.push(EpochRecord { epoch, loss, accuracy });
        if config.loss_threshold.is_some_and(|t| loss <= t) {
            break;
        }
        let grads = backward(&tape, &wrt)?;
        params = sgd_step(&params, &grads, config.learning_rate)?;
    }
    Ok(TrainResult { params, history })
}

/// Names of the relations split along their first (sample) column.
pub fn partitioned_inputs(spec: &ModelSpec) -> Vec<&str> {
    spec.inputs
        .iter()
        .filter(|i| matches!(i.role, InputRole::Features | InputRole::Labels))
        .map(|i| i.name.as_str())
        .collect()
}

/// Renumbers the first column so that sample `order[k]` becomes sample `k`.
fn permute_samples(rel: &TensorRelation, order: &[usize]) -> Result<TensorRelation> {
    let mut pos = vec![0i64; order.len()];
    for (k, s) in order.iter().enumerate() {
        pos[*s] = k as i64;
    }
    let entries = rel.entries().iter().map(|(c, v)| {
        let mut c = c.clone();
        c[0] = pos[c[0] as usize];
        (c, *v)
    });
    TensorRelation::new(rel.schema().clone(), rel.default_value(), entries)
}

/// Epoch batches: a seeded shuffle cut into runs of `size`, each run sorted.
pub fn epoch_batches(samples: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(rng);
    order
        .chunks(size)
        .map(|c| {
            let mut c = c.to_vec();
            c.sort_unstable();
            c
        })
        .collect()
}

/// Minibatch loop: each epoch visits every sample once, in shuffled batches.
pub fn train_minibatch(spec: &ModelSpec, data: &Relations, config: &TrainConfig) -> Result<TrainResult> {
    let full_plan = build_model(spec)?;
    let params = init_plan_params(&full_plan, config.seed)?;
    train_minibatch_from(spec, data, params, config)
}

pub fn train_minibatch_from(spec: &ModelSpec, data: &Relations, mut params: ParamStore, config: &TrainConfig) -> Result<TrainResult> {
    let samples = spec.features()?.schema.columns()[0].domain_size;
    config.validate(samples)?;
    let size = match config.batch_size {
        BatchSize::All => samples,
        BatchSize::Size(n) => n,
    };
    let split = partitioned_inputs(spec);
    let mut plans: BTreeMap<usize, Plan> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut history = Vec::new();
    for epoch in 1..=config.max_epochs {
        let batches = epoch_batches(samples, size, &mut rng);
        let order: Vec<usize> = batches.concat();
        let mut permuted = data.clone();
        for name in &split {
            let rel = data.get(*name).ok_or_else(|| Error::MissingInput(format!("`{name}` is not bound")))?;
            permuted.insert(name.to_string(), permute_samples(rel, &order)?);
        }
        let (mut loss_sum, mut correct, mut scored, mut scored_any) = (0.0, 0, 0, false);
        let mut lo = 0usize;
        for batch in &batches {
            let n = batch.len();
            let hi = lo + n - 1;
            if !plans.contains_key(&n) {
                plans.insert(n, build_model(&spec.with_sample_count(n)?)?);
            }
            let plan = &plans[&n];
            let mut bdata = permuted.clone();
            for name in &split {
                let rel = &permuted[*name];
                let col = rel.schema().columns()[0].name.clone();
                bdata.insert(name.to_string(), filter_range(rel, &col, lo as i64, hi as i64)?);
            }
            let (loss, tape) = forward_with_tape(plan, &bdata, &params.params)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            loss_sum += loss * (n as f64 / samples as f64);
            if let Some((c, m)) = correct_predictions(&tape, &bdata)? {
                correct += c;
                scored += m;
                scored_any = true;
            }
            let grads = backward(&tape, &param_names(plan))?;
            params = sgd_step(&params, &grads, config.learning_rate)?;
            lo = hi + 1;
        }
        let accuracy = scored_any.then(|| correct as f64 / scored as f64);
        history.push(EpochRecord { epoch, loss: loss_sum, accuracy });
        if config.loss_threshold.is_some_and(|t| loss_sum <= t) {
            break;
        }
    }
    Ok(TrainResult { params, history })
}

/// Full batch for graph models or `batch_size = all`, minibatches otherwise.
pub fn train(spec: &ModelSpec, data: &Relations, config: &TrainConfig) -> Result<TrainResult> {
    if spec.model == ModelKind::Gcn || config.batch_size == BatchSize::All {
        train_full(&build_model(spec)?, data, config)
    } else {
        train_minibatch(spec, data, config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::PlanBuilder;
    use crate::relcore::{eqs, Agg, IndexSchema, OutputColumn};

    #[test]
    fn batch_size_serde() {
        let c: TrainConfig = serde_json::from_str(r#"{"learning_rate":0.1,"max_epochs":3,"batch_size":"all"}"#).unwrap();
        assert_eq!(c.batch_size, BatchSize::All);
        let c: TrainConfig = serde_json::from_str(r#"{"learning_rate":0.1,"max_epochs":3,"batch_size":16}"#).unwrap();
        assert_eq!(c.batch_size, BatchSize::Size(16));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate":0.1,"max_epochs":3,"batch_size":0}"#).is_err());
        assert_eq!(serde_json::to_string(&BatchSize::All).unwrap(), "\"all\"");
    }

    #[test]
    fn sgd_arithmetic() {
        let s = IndexSchema::of(&[("x", 1)]).unwrap();
        let p = ParamStore::new(Relations::from([("p".into(), TensorRelation::new(s.clone(), 0.0, [([0], 2.0)]).unwrap())]));
        let g = GradientSet::from([("p".into(), TensorRelation::new(s.clone(), 0.0, [([0], 0.5)]).unwrap())]);
        assert_eq!(sgd_step(&p, &g, 1.0).unwrap().get("p").unwrap().get(&[0]), 1.5);
        let zero = GradientSet::from([("p".into(), TensorRelation::empty(s, 0.0))]);
        assert_eq!(sgd_step(&p, &zero, 1.0).unwrap(), p);
    }

    /// f(p) = (p - 3)² as a plan: d = p + (-3), f = Σ d·d.
    fn quadratic() -> (Plan, Relations) {
        let mut b = PlanBuilder::new();
        let s = IndexSchema::of(&[("x", 1)]).unwrap();
        let p = b.param("p", s.clone(), None, "val").unwrap();
        let d = b.map(p, ScalarFn::AddConst(-3.0)).unwrap();
        let sq = b.join(d, d, eqs(&[("x", "x")]), vec![OutputColumn::left("x", "x")]).unwrap();
        let f = b.aggregate(sq, vec![], Agg::Sum).unwrap();
        (b.finish(f, None, false), Relations::new())
    }

    #[test]
    fn quadratic_iterates_approach_three() {
        let (plan, data) = quadratic();
        let config = TrainConfig { learning_rate: 0.3, max_epochs: 25, ..TrainConfig::default() };
        let r = train_full(&plan, &data, &config).unwrap();
        let losses: Vec<f64> = r.history.iter().map(|h| h.loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
        assert!((r.params.get("p").unwrap().get(&[0]) - 3.0).abs() < 1e-4);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (plan, data) = quadratic();
        let config = TrainConfig { max_epochs: 0, ..TrainConfig::default() };
        let r = train_full(&plan, &data, &config).unwrap();
        assert!(r.history.is_empty());
        assert_eq!(r.params, init_plan_params(&plan, 0).unwrap());
    }

    #[test]
    fn batches_partition_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let b = epoch_batches(37, 8, &mut rng);
            assert_eq!(b.len(), 5);
            let mut all = b.concat();
            all.sort_unstable();
            assert_eq!(all, (0..37).collect::<Vec<_>>());
            assert!(b.iter().all(|c| c.windows(2).all(|w| w[0] < w[1])));
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = ModelSpec::small_cnn(2, 1, 8, 2);
        let a = init_params(&spec, 4).unwrap();
        assert_eq!(a, init_params(&spec, 4).unwrap());
        assert_ne!(a, init_params(&spec, 5).unwrap());
        assert!(a.get("conv1_bias").unwrap().is_empty());
        let w = a.get("fc1_weight").unwrap();
        let bound = 1.0 / (36f64).sqrt();
        assert!(w.entries().iter().all(|(_, v)| v.abs() <= bound));
        assert_eq!(w.len(), 36 * 16);
    }
}
