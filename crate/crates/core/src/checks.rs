//! Engine-versus-oracle comparisons shared by the CLI and the test suites.

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, forward_with_tape};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::layers::{
    argmax_predict, build_model, compile_conv2d, compile_cross_entropy, compile_flatten, compile_fully_connected,
    compile_graph_conv, compile_maxpool2x2, compile_relu, normalize_adjacency, one_hot, ModelSpec,
};
use crate::oracle::{self, dense_model_forward, finite_diff_grad, to_dense, DenseMap, DenseTensor};
use crate::plan::{InputRole, NodeId, Plan, PlanBuilder, Relations};
use crate::relcore::{Coord, IndexSchema, TensorRelation};
use crate::train::{init_plan_params, ParamStore};

/// Outcome of one comparison, as written to JSON reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub node: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl CheckReport {
    pub fn new(node: &str) -> Self {
        CheckReport { node: node.into(), max_abs_err: 0.0, max_rel_err: 0.0, pass: true }
    }

    pub fn merge(&mut self, other: &CheckReport) {
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.pass &= other.pass;
    }

    /// Folds in one pair of values; passes when `|got − want| ≤ tol(got, want)`.
    fn record(&mut self, got: f64, want: f64, tol: f64) {
        let abs = (got - want).abs();
        let scale = got.abs().max(want.abs());
        let rel = if scale > 0.0 { abs / scale } else { 0.0 };
        self.max_abs_err = self.max_abs_err.max(abs);
        self.max_rel_err = self.max_rel_err.max(rel);
        if !(abs <= tol) {
            self.pass = false;
        }
    }
}

/// Per-value comparison with `|a − b| ≤ max(rel·max(|a|, |b|), abs)`.
pub fn compare_dense(node: &str, got: &DenseTensor, want: &DenseTensor, rel: f64, abs: f64) -> CheckReport {
    let mut r = CheckReport::new(node);
    if got.shape != want.shape {
        r.pass = false;
        r.max_abs_err = f64::INFINITY;
        r.max_rel_err = f64::INFINITY;
        return r;
    }
    for (a, b) in got.values.iter().zip(&want.values) {
        r.record(*a, *b, (rel * a.abs().max(b.abs())).max(abs));
    }
    r
}

pub fn dense_map(rels: &Relations) -> Result<DenseMap> {
    rels.iter().map(|(k, v)| Ok((k.clone(), to_dense(v)?))).collect()
}

/// Random relation with about `density` of the coordinates stored, values
/// uniform in `[-1, 1]`.
pub fn random_relation(rng: &mut ChaCha8Rng, schema: IndexSchema, density: f64, default: f64) -> Result<TensorRelation> {
    let mut entries = Vec::new();
    let u = Uniform::new_inclusive(-1.0, 1.0);
    schema.for_each_coord(|c| {
        if rng.gen_bool(density) {
            entries.push((Coord::from_slice(c), u.sample(rng)));
        }
    });
    TensorRelation::new(schema, default, entries)
}

fn schema(cols: &[(&str, usize)]) -> Result<IndexSchema> {
    IndexSchema::of(cols)
}

/// Tolerances of the per-layer comparisons.
pub const LAYER_REL_TOL: f64 = 1e-9;
pub const LAYER_ABS_TOL: f64 = 1e-12;

/// One random trial of a single layer: evaluates the compiled fragment and
/// the naive loop on the same inputs.
fn layer_trial(kind: &str, rng: &mut ChaCha8Rng) -> Result<(DenseTensor, DenseTensor)> {
    let density = rng.gen_range(0.1..0.9);
    let default_for = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(-1.0..1.0) };
    let mut b = PlanBuilder::new();
    let mut data = Relations::new();
    let mut params = Relations::new();
    let bind = |b: &mut PlanBuilder, data: &mut Relations, name: &str, rel: TensorRelation| -> Result<NodeId> {
        let id = b.data(name, rel.schema().clone(), InputRole::Features)?;
        data.insert(name.into(), rel);
        Ok(id)
    };
    let n = rng.gen_range(1..=4);
    let out: NodeId;
    let want: DenseTensor;
    match kind {
        "conv2d" => {
            let (c, o, k) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3));
            let e = rng.gen_range(k.max(2)..=8);
            let x = random_relation(rng, schema(&[("image", n), ("channel", c), ("r", e), ("c", e)])?, density, 0.0)?;
            let w = random_relation(rng, schema(&[("out_channel", o), ("in_channel", c), ("r", k), ("c", k)])?, 0.8, 0.0)?;
            let bias = random_relation(rng, schema(&[("out_channel", o)])?, 0.8, 0.0)?;
            want = oracle::layers::conv2d(&to_dense(&x)?, &to_dense(&w)?, &to_dense(&bias)?)?;
            let xi = bind(&mut b, &mut data, "x", x)?;
            out = compile_conv2d(&mut b, "conv", xi, (c, o, k), "w", "b")?;
            params.insert("w".into(), w);
            params.insert("b".into(), bias);
        }
        "relu" => {
            let cols: Vec<(&str, usize)> = [("a", n), ("b", rng.gen_range(1..=5)), ("c", rng.gen_range(1..=5))]
                [..rng.gen_range(1..=3)]
                .to_vec();
            let d = default_for(rng);
            let x = random_relation(rng, schema(&cols)?, density, d)?;
            want = oracle::layers::relu(&to_dense(&x)?);
            let xi = bind(&mut b, &mut data, "x", x)?;
            out = compile_relu(&mut b, "relu", xi)?;
        }
        "maxpool2x2" => {
            let (c, h, w) = (rng.gen_range(1..=3), 2 * rng.gen_range(1..=4), 2 * rng.gen_range(1..=4));
            let d = default_for(rng);
            let x = random_relation(rng, schema(&[("image", n), ("channel", c), ("r", h), ("c", w)])?, density, d)?;
            want = oracle::layers::maxpool2x2(&to_dense(&x)?)?;
            let xi = bind(&mut b, &mut data, "x", x)?;
            out = compile_maxpool2x2(&mut b, "pool", xi)?;
        }
        "flatten" => {
            let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=8), rng.gen_range(1..=8));
            let d = default_for(rng);
            let x = random_relation(rng, schema(&[("image", n), ("channel", c), ("r", h), ("c", w)])?, density, d)?;
            want = oracle::layers::flatten(&to_dense(&x)?)?;
            let xi = bind(&mut b, &mut data, "x", x)?;
            out = compile_flatten(&mut b, "flatten", xi)?;
        }
        "fully_connected" => {
            let (i, o) = (rng.gen_range(1..=12), rng.gen_range(1..=8));
            let x = random_relation(rng, schema(&[("image", n), ("i", i)])?, density, 0.0)?;
            let w = random_relation(rng, schema(&[("out_dim", o), ("in_dim", i)])?, 0.8, 0.0)?;
            let bias = random_relation(rng, schema(&[("out_dim", o)])?, 0.8, 0.0)?;
            want = oracle::layers::fully_connected(&to_dense(&x)?, &to_dense(&w)?, &to_dense(&bias)?)?;
            let xi = bind(&mut b, &mut data, "x", x)?;
            out = compile_fully_connected(&mut b, "fc", xi, (i, o), "w", "b")?;
            params.insert("w".into(), w);
            params.insert("b".into(), bias);
        }
        "graph_conv" => {
            let nodes = rng.gen_range(2..=10);
            let (m, h) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
            let a = random_relation(rng, schema(&[("i", nodes), ("j", nodes)])?, 0.3, 0.0)?;
            let x = random_relation(rng, schema(&[("i", nodes), ("j", m)])?, density, 0.0)?;
            let w = random_relation(rng, schema(&[("i", m), ("j", h)])?, 0.8, 0.0)?;
            let bias = random_relation(rng, schema(&[("i", h)])?, 0.8, 0.0)?;
            want = oracle::layers::graph_conv(&to_dense(&a)?, &to_dense(&x)?, &to_dense(&w)?, &to_dense(&bias)?)?;
            let xi = bind(&mut b, &mut data, "x", x)?;
            let ai = b.data("adj", a.schema().clone(), InputRole::Adjacency)?;
            data.insert("adj".into(), a);
            out = compile_graph_conv(&mut b, "gc", xi, (m, h), ai, "w", "b")?;
            params.insert("w".into(), w);
            params.insert("b".into(), bias);
        }
        "cross_entropy_loss" => {
            let k = rng.gen_range(2..=10);
            let d = default_for(rng);
            let x = random_relation(rng, schema(&[("image", n), ("i", k)])?, density, d)?;
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            want = DenseTensor::scalar(oracle::layers::cross_entropy(&to_dense(&x)?, &labels)?);
            let xi = bind(&mut b, &mut data, "x", x)?;
            let l = one_hot("image", "i", &labels, k)?;
            let li = b.data("labels", l.schema().clone(), InputRole::Labels)?;
            data.insert("labels".into(), l);
            out = compile_cross_entropy(&mut b, "x_ent", xi, li, None)?.0;
        }
        "argmax_predict" => {
            let k = rng.gen_range(1..=6);
            let d = default_for(rng);
            let x = random_relation(rng, schema(&[("image", n), ("i", k)])?, density, d)?;
            let preds = argmax_predict(&x)?;
            let got = DenseTensor::from_vec(&[n], preds.iter().map(|(_, c)| *c as f64).collect())?;
            let want = oracle::layers::argmax_rows(&to_dense(&x)?);
            return Ok((got, DenseTensor::from_vec(&[n], want.iter().map(|c| *c as f64).collect())?));
        }
        "normalize_adjacency" => {
            let nodes = rng.gen_range(1..=10);
            let mut edges = Vec::new();
            for i in 0..nodes as i64 {
                for j in i + 1..nodes as i64 {
                    if rng.gen_bool(density) {
                        edges.extend([([i, j], 1.0), ([j, i], 1.0)]);
                    }
                }
            }
            let a = TensorRelation::new(schema(&[("i", nodes), ("j", nodes)])?, 0.0, edges)?;
            let loops = rng.gen_bool(0.5);
            let got = to_dense(&normalize_adjacency(&a, loops)?)?;
            return Ok((got, oracle::layers::row_normalize(&to_dense(&a)?, loops)?));
        }
        other => return Err(Error::InvalidParams(format!("unknown layer kind `{other}`"))),
    }
    let plan = b.finish(out, None, false);
    let got = to_dense(&plan.forward(&data, &params)?)?;
    Ok((got, want))
}

pub const LAYER_KINDS: [&str; 9] = [
    "conv2d",
    "relu",
    "maxpool2x2",
    "flatten",
    "fully_connected",
    "graph_conv",
    "cross_entropy_loss",
    "argmax_predict",
    "normalize_adjacency",
];

/// `trials` random sparse inputs per layer kind against the naive loops.
pub fn verify_layers(seed: u64, trials: usize) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for (k, kind) in LAYER_KINDS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(k as u64));
        let mut report = CheckReport::new(kind);
        for _ in 0..trials {
            let (got, want) = layer_trial(kind, &mut rng)?;
            report.merge(&compare_dense(kind, &got, &want, LAYER_REL_TOL, LAYER_ABS_TOL));
        }
        out.push(report);
    }
    Ok(out)
}

/// Loss from the relational plan and from the dense oracle, for `params`.
pub fn model_losses(dataset: &Dataset, params: &ParamStore) -> Result<(f64, f64)> {
    let plan = build_model(&dataset.spec)?;
    let engine = plan.loss(&dataset.relations, params.relations())?;
    let trace = dense_model_forward(&dataset.spec, &dense_map(&dataset.relations)?, &dense_map(params.relations())?)?;
    let dense = trace.loss.ok_or_else(|| Error::UnsupportedNode("model has no loss layer".into()))?;
    Ok((engine, dense))
}

/// End-to-end loss comparison within `rel` relative error.
pub fn verify_model(name: &str, dataset: &Dataset, params: &ParamStore, rel: f64) -> Result<CheckReport> {
    let (engine, dense) = model_losses(dataset, params)?;
    let mut r = CheckReport::new(name);
    r.record(engine, dense, rel * dense.abs().max(engine.abs()));
    Ok(r)
}

/// Initial weights plus small random biases, so that a gradient check is not
/// taken at the special all-zero-bias point.
pub fn random_point(plan: &Plan, seed: u64) -> Result<ParamStore> {
    let mut params = init_plan_params(plan, seed)?.into_relations();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for p in plan.params.iter().filter(|p| p.fan_in.is_none()) {
        let u = Uniform::new_inclusive(-0.1, 0.1);
        let mut entries = Vec::new();
        p.schema.for_each_coord(|c| entries.push((Coord::from_slice(c), u.sample(&mut rng))));
        params.insert(p.name.clone(), TensorRelation::new(p.schema.clone(), 0.0, entries)?);
    }
    Ok(ParamStore::new(params))
}

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;
pub const GRAD_ABS_TOL: f64 = 1e-6;

/// Autodiff against central differences of the dense oracle loss, one report
/// per parameter. `None` when the point lies within `10·h` of a relu kink or
/// a pooling tie, in which case the caller should draw another point.
pub fn gradcheck(spec: &ModelSpec, data: &Relations, params: &ParamStore, h: f64) -> Result<Option<Vec<CheckReport>>> {
    let plan = build_model(spec)?;
    let din: DenseMap = spec
        .inputs
        .iter()
        .map(|i| {
            let r = data.get(&i.name).ok_or_else(|| Error::MissingInput(format!("`{}` is not bound", i.name)))?;
            Ok((i.name.clone(), to_dense(r)?))
        })
        .collect::<Result<_>>()?;
    let dparams = dense_map(params.relations())?;
    let trace = dense_model_forward(spec, &din, &dparams)?;
    if trace.kink_distance() < 10.0 * h {
        return Ok(None);
    }
    let (_, tape) = forward_with_tape(&plan, data, params.relations())?;
    let names: Vec<&str> = plan.params.iter().map(|p| p.name.as_str()).collect();
    let grads = backward(&tape, &names)?;
    let mut reports = Vec::new();
    for name in names {
        let loss_at = |t: &DenseTensor| {
            let mut ps = dparams.clone();
            ps.insert(name.to_string(), t.clone());
            dense_model_forward(spec, &din, &ps).ok().and_then(|tr| tr.loss).unwrap_or(f64::NAN)
        };
        let fd = finite_diff_grad(loss_at, &dparams[name], h)?;
        let ad = to_dense(&grads[name])?;
        let mut r = CheckReport::new(name);
        for (a, f) in ad.values.iter().zip(&fd.values) {
            r.record(*a, *f, (GRAD_REL_TOL * a.abs()).max(GRAD_ABS_TOL));
        }
        reports.push(r);
    }
    Ok(Some(reports))
}

/// [`gradcheck`] at the first non-kink point among `attempts` random points
/// derived from `seed`.
pub fn gradcheck_seeded(spec: &ModelSpec, data: &Relations, seed: u64, attempts: usize) -> Result<Vec<CheckReport>> {
    let plan = build_model(spec)?;
    for k in 0..attempts as u64 {
        let params = random_point(&plan, seed.wrapping_mul(1000).wrapping_add(k))?;
        if let Some(r) = gradcheck(spec, data, &params, FD_STEP)? {
            return Ok(r);
        }
    }
    Err(Error::InvalidParams(format!("no kink-free point found in {attempts} attempts for seed {seed}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_kind_matches_its_oracle() {
        for r in verify_layers(7, 10).unwrap() {
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn report_tolerance_uses_max_of_rel_and_abs() {
        let a = DenseTensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let b = DenseTensor::from_vec(&[2], vec![1.0 + 1e-10, 1e-13]).unwrap();
        assert!(compare_dense("x", &a, &b, 1e-9, 1e-12).pass);
        let c = DenseTensor::from_vec(&[2], vec![1.0 + 1e-8, 0.0]).unwrap();
        assert!(!compare_dense("x", &a, &c, 1e-9, 1e-12).pass);
    }
}
