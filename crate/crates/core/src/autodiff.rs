//! Reverse-mode differentiation over plans.
//!
//! [`forward_with_tape`] evaluates a plan and keeps every node's value;
//! [`backward`] walks the nodes in reverse and accumulates vector-Jacobian
//! products, each expressed with the relational primitives where one fits:
//!
//! | forward            | backward                                                   |
//! |--------------------|------------------------------------------------------------|
//! | join (product)     | join with the other operand, then SUM onto the operand     |
//! | join_add           | rename for the left side, SUM onto the key for the right   |
//! | reindex            | pull back through the index map                            |
//! | filter_range       | shift back; zero outside the kept range                    |
//! | aggregate SUM/AVG  | broadcast over the dense group (AVG divides by its size)   |
//! | aggregate MAX      | route to the smallest index tuple among the argmax set     |
//! | scalar_map f       | multiply by `f'` of the forward input                      |
//! | densify            | identity                                                   |

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::plan::{NodeId, Op, Plan, PrimitiveKind, Relations};
use crate::relcore::{
    add_layout, agg_layout, aggregate, for_each_in_box, join_add, join_layout, reindex_schema, scalar_map,
    equi_join_product, Agg, AffineIndexExpr, Coord, GroupKey, OutputColumn, ScalarFn, TensorRelation, DEFAULT_DENSE_CAP,
};

/// Forward values of every plan node, in plan (topological) order.
#[derive(Clone, Debug)]
pub struct Tape<'p> {
    plan: &'p Plan,
    values: Vec<Arc<TensorRelation>>,
}

impl<'p> Tape<'p> {
    pub fn plan(&self) -> &'p Plan {
        self.plan
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &TensorRelation {
        &self.values[id]
    }

    pub fn values(&self) -> &[Arc<TensorRelation>] {
        &self.values
    }

    pub fn output(&self) -> &TensorRelation {
        &self.values[self.plan.output]
    }
}

/// Gradients keyed by parameter (or data) name; each has its target's schema
/// and default 0.
pub type GradientSet = BTreeMap<String, TensorRelation>;

/// Primitives applied while differentiating one forward node.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardStep {
    pub node: String,
    pub forward: PrimitiveKind,
    pub used: Vec<PrimitiveKind>,
}

pub fn forward_with_tape<'p>(plan: &'p Plan, data: &Relations, params: &Relations) -> Result<(f64, Tape<'p>)> {
    let values = plan.evaluate(data, params)?;
    let loss = values[plan.output].scalar_value()?;
    Ok((loss, Tape { plan, values }))
}

/// Gradients of the scalar output with respect to the named sources.
pub fn backward(tape: &Tape<'_>, wrt: &[&str]) -> Result<GradientSet> {
    Ok(backward_traced(tape, wrt)?.0)
}

/// [`backward`], also reporting which primitives each step used.
pub fn backward_traced(tape: &Tape<'_>, wrt: &[&str]) -> Result<(GradientSet, Vec<BackwardStep>)> {
    let plan = tape.plan;
    let mut targets = BTreeMap::new();
    for w in wrt {
        let id = plan
            .nodes
            .iter()
            .position(|n| matches!(&n.op, Op::Param { name } | Op::Data { name } if name == w))
            .ok_or_else(|| Error::UnboundTarget(w.to_string()))?;
        targets.insert(w.to_string(), id);
    }
    tape.output().scalar_value()?;

    // nodes whose gradient can reach a target
    let wanted: BTreeSet<NodeId> = targets.values().copied().collect();
    let mut needs = vec![false; plan.nodes.len()];
    for (i, n) in plan.nodes.iter().enumerate() {
        needs[i] = wanted.contains(&i) || n.inputs.iter().any(|j| needs[*j]);
    }

    let mut grads: Vec<Option<TensorRelation>> = vec![None; plan.nodes.len()];
    grads[plan.output] = Some(TensorRelation::scalar(1.0));
    let mut trace = Vec::new();
    for id in (0..plan.nodes.len()).rev() {
        let node = &plan.nodes[id];
        let Some(kind) = node.op.kind() else { continue };
        if !needs[id] {
            continue;
        }
        let Some(g) = grads[id].take() else { continue };
        let mut used = Vec::new();
        for (slot, &input) in node.inputs.iter().enumerate() {
            if !needs[input] {
                continue;
            }
            let contrib = vjp(tape, id, slot, &g, &mut used)?;
            accumulate(&mut grads[input], contrib, &mut used)?;
        }
        trace.push(BackwardStep { node: node.name.clone(), forward: kind, used });
    }

    let mut out = GradientSet::new();
    for (name, id) in targets {
        let schema = plan.nodes[id].schema.clone();
        let g = match grads[id].take() {
            Some(g) => g.with_zero_default(DEFAULT_DENSE_CAP)?,
            None => TensorRelation::empty(schema, 0.0),
        };
        if let Some((c, v)) = g.entries().iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}` at {:?}: {v}", c.as_slice())));
        }
        out.insert(name, g);
    }
    Ok((out, trace))
}

fn accumulate(slot: &mut Option<TensorRelation>, contrib: TensorRelation, used: &mut Vec<PrimitiveKind>) -> Result<()> {
    *slot = Some(match slot.take() {
        None => contrib,
        Some(prev) => {
            let names: Vec<String> = prev.schema().names().map(str::to_string).collect();
            let eqs: Vec<(String, String)> = names.iter().map(|n| (n.clone(), n.clone())).collect();
            used.push(PrimitiveKind::JoinAdd);
            join_add(&prev, &contrib, &eqs, &[])?
        }
    });
    Ok(())
}

fn names_of(r: &TensorRelation) -> Vec<String> {
    r.schema().names().map(str::to_string).collect()
}

/// Gradient contribution to input `slot` of node `id`, given the output gradient `g`.
fn vjp(tape: &Tape<'_>, id: NodeId, slot: usize, g: &TensorRelation, used: &mut Vec<PrimitiveKind>) -> Result<TensorRelation> {
    let node = &tape.plan.nodes[id];
    let x = tape.value(node.inputs[slot]);
    match &node.op {
        Op::Data { .. } | Op::Param { .. } => unreachable!("sources have no inputs"),
        Op::Densify => Ok(g.clone()),
        Op::Map { f } => {
            let fx = scalar_map(x, f.derivative())?;
            let cols = names_of(x);
            let eqs: Vec<(String, String)> = cols.iter().map(|c| (c.clone(), c.clone())).collect();
            let out: Vec<OutputColumn> = cols.iter().map(|c| OutputColumn::left(c, c)).collect();
            used.extend([PrimitiveKind::Map, PrimitiveKind::Join]);
            equi_join_product(g, &fx, &eqs, &out)
        }
        Op::Join { equalities, output } => {
            let (a, b) = (tape.value(node.inputs[0]), tape.value(node.inputs[1]));
            let lay = join_layout(a.schema(), b.schema(), equalities, output)?;
            let out_name = |p: usize| lay.schema.columns()[p].name.clone();
            // the operand being differentiated, and the other one
            let (me, my_pos, other, other_pos) =
                if slot == 0 { (a, &lay.a_pos, b, &lay.b_pos) } else { (b, &lay.b_pos, a, &lay.a_pos) };
            let other = if g.default_value() != 0.0 && other.default_value() != 0.0 {
                other.with_zero_default(DEFAULT_DENSE_CAP)?
            } else {
                other.clone()
            };
            let eqs: Vec<(String, String)> = other
                .schema()
                .names()
                .zip(other_pos)
                .map(|(n, p)| (out_name(*p), n.to_string()))
                .collect();
            let keep: Vec<OutputColumn> = g.schema().names().map(|n| OutputColumn::left(n, n)).collect();
            let prod = equi_join_product(g, &other, &eqs, &keep)?;
            let keys: Vec<GroupKey> =
                me.schema().names().zip(my_pos).map(|(n, p)| GroupKey::alias(&out_name(*p), n)).collect();
            used.extend([PrimitiveKind::Join, PrimitiveKind::Aggregate]);
            aggregate(&prod, &keys, Agg::Sum)
        }
        Op::JoinAdd { equalities, aliases } => {
            let (a, b) = (tape.value(node.inputs[0]), tape.value(node.inputs[1]));
            let lay = add_layout(a.schema(), b.schema(), equalities, aliases)?;
            let g_names = names_of(g);
            if slot == 0 {
                let a_names: Vec<&str> = a.schema().names().collect();
                return g.with_column_names(&a_names);
            }
            let keys: Vec<GroupKey> =
                b.schema().names().zip(&lay.b_from_a).map(|(n, p)| GroupKey::alias(&g_names[*p], n)).collect();
            used.push(PrimitiveKind::Aggregate);
            aggregate(g, &keys, Agg::Sum)
        }
        Op::Reindex { exprs, keep } => {
            used.push(PrimitiveKind::Reindex);
            reindex_pullback(x, g, exprs, keep)
        }
        Op::Filter { column, lo, hi } => {
            used.push(PrimitiveKind::Filter);
            filter_pullback(x, g, column, *lo, *hi)
        }
        Op::Aggregate { keys, agg } => aggregate_vjp(x, g, keys, *agg, used),
    }
}

/// `dx(u) = g(m(u))` over the dense domain of `x`.
fn reindex_pullback(x: &TensorRelation, g: &TensorRelation, exprs: &[AffineIndexExpr], keep: &[String]) -> Result<TensorRelation> {
    let xs = x.schema();
    reindex_schema(xs, exprs, keep)?;
    let keep_pos: Vec<usize> = keep.iter().map(|k| xs.position(k)).collect::<Result<_>>()?;
    let bound: Vec<_> = exprs.iter().map(|e| e.bind(xs)).collect::<Result<_>>()?;
    let size = xs.dense_size().unwrap_or(usize::MAX);
    if size > DEFAULT_DENSE_CAP {
        return Err(Error::TooLarge { size, cap: DEFAULT_DENSE_CAP });
    }
    // dx's default is g's default; store only where g differs from it.
    let default = g.default_value();
    let mut out = Vec::new();
    let mut y: Coord = Coord::new();
    xs.for_each_coord(|u| {
        y.clear();
        y.extend(keep_pos.iter().map(|p| u[*p]));
        y.extend(bound.iter().map(|b| b.eval(u)));
        if let Some(v) = g.lookup(&y) {
            out.push((Coord::from_slice(u), v));
        }
    });
    Ok(TensorRelation::from_sorted(xs.clone(), default, out))
}

/// Inverse of the range filter: shift `column` back by `lo`, zero outside `[lo, hi]`.
fn filter_pullback(x: &TensorRelation, g: &TensorRelation, column: &str, lo: i64, hi: i64) -> Result<TensorRelation> {
    let p = x.schema().position(column)?;
    let g = g.with_zero_default(DEFAULT_DENSE_CAP)?;
    let out = g
        .entries()
        .iter()
        .map(|(c, v)| {
            let mut c = c.clone();
            c[p] += lo;
            debug_assert!(c[p] <= hi);
            (c, *v)
        })
        .collect();
    Ok(TensorRelation::from_sorted(x.schema().clone(), 0.0, out))
}

fn aggregate_vjp(
    x: &TensorRelation,
    g: &TensorRelation,
    keys: &[GroupKey],
    agg: Agg,
    used: &mut Vec<PrimitiveKind>,
) -> Result<TensorRelation> {
    let xs = x.schema();
    let lay = agg_layout(xs, keys)?;
    match agg {
        Agg::Count => Ok(TensorRelation::empty(xs.clone(), 0.0)),
        Agg::Max => Ok(max_route(x, g, &lay)),
        Agg::Sum | Agg::Avg => {
            let plain = lay.divisors.iter().all(Option::is_none);
            if plain {
                let g = if agg == Agg::Avg {
                    // every group has the same size when no key is divided
                    let k = lay.dropped.iter().map(|p| xs.columns()[*p].domain_size).product::<usize>();
                    used.push(PrimitiveKind::Map);
                    scalar_map(g, ScalarFn::MulConst(1.0 / k as f64))?
                } else {
                    g.clone()
                };
                let eqs: Vec<(String, String)> = lay
                    .key_pos
                    .iter()
                    .zip(g.schema().names())
                    .map(|(p, n)| (xs.columns()[*p].name.clone(), n.to_string()))
                    .collect();
                used.push(PrimitiveKind::JoinAdd);
                return join_add(&TensorRelation::empty(xs.clone(), 0.0), &g, &eqs, &[]);
            }
            // floor-divided keys: broadcast coordinate by coordinate
            used.push(PrimitiveKind::Aggregate);
            let size = xs.dense_size().unwrap_or(usize::MAX);
            if size > DEFAULT_DENSE_CAP {
                return Err(Error::TooLarge { size, cap: DEFAULT_DENSE_CAP });
            }
            let mut out = Vec::new();
            xs.for_each_coord(|u| {
                let grp = lay.group_of(u);
                let mut v = g.get(&grp);
                if agg == Agg::Avg {
                    v /= lay.cardinality(xs, &grp) as f64;
                }
                if v != 0.0 {
                    out.push((Coord::from_slice(u), v));
                }
            });
            Ok(TensorRelation::from_sorted(xs.clone(), 0.0, out))
        }
    }
}

/// MAX backward: each group's gradient goes to one coordinate, the
/// lexicographically smallest among those attaining the (dense) maximum.
fn max_route(x: &TensorRelation, g: &TensorRelation, lay: &crate::relcore::AggLayout) -> TensorRelation {
    let xs = x.schema();
    // per group: (smallest argmax among stored, stored max, stored count)
    let mut best: BTreeMap<Coord, (Coord, f64, usize)> = BTreeMap::new();
    for (c, v) in x.entries() {
        let e = best.entry(lay.group_of(c)).or_insert_with(|| (c.clone(), *v, 0));
        if *v > e.1 {
            e.0 = c.clone();
            e.1 = *v;
        }
        e.2 += 1;
    }
    let d = x.default_value();
    let mut out = Vec::new();
    g.schema().for_each_coord(|grp| {
        let gv = g.get(grp);
        if gv == 0.0 {
            return;
        }
        let stored = best.get(grp);
        let count = stored.map_or(0, |s| s.2);
        let has_default = count < lay.cardinality(xs, grp);
        let winner = match stored {
            Some((c, m, _)) if !has_default || *m > d => c.clone(),
            _ => {
                let mut first_free = None;
                for_each_in_box(&lay.group_box(xs, grp), &mut |u: &[i64]| {
                    if first_free.is_none() && x.lookup(u).is_none() {
                        first_free = Some(Coord::from_slice(u));
                    }
                });
                let free = first_free.expect("group has a non-stored coordinate");
                match stored {
                    Some((c, m, _)) if *m == d && *c < free => c.clone(),
                    _ => free,
                }
            }
        };
        out.push((winner, gv));
    });
    TensorRelation::from_unsorted(xs.clone(), 0.0, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{InputRole, PlanBuilder};
    use crate::relcore::{eqs, IndexSchema};

    fn rel(cols: &[(&str, usize)], default: f64, e: &[(&[i64], f64)]) -> TensorRelation {
        TensorRelation::new(IndexSchema::of(cols).unwrap(), default, e.iter().map(|(c, v)| (c.to_vec(), *v))).unwrap()
    }

    fn sum_plan(build: impl FnOnce(&mut PlanBuilder, NodeId) -> NodeId, schema: IndexSchema) -> Plan {
        let mut b = PlanBuilder::new();
        let x = b.data("x", schema, InputRole::Features).unwrap();
        let y = build(&mut b, x);
        let loss = b.aggregate(y, vec![], Agg::Sum).unwrap();
        b.finish(loss, None, false)
    }

    fn grad_of(plan: &Plan, x: TensorRelation) -> TensorRelation {
        let data = Relations::from([("x".to_string(), x)]);
        let (_, tape) = forward_with_tape(plan, &data, &Relations::new()).unwrap();
        backward(&tape, &["x"]).unwrap().remove("x").unwrap()
    }

    #[test]
    fn relu_backward_is_a_step() {
        let s = IndexSchema::of(&[("i", 3)]).unwrap();
        let plan = sum_plan(|b, x| b.map(x, ScalarFn::Relu).unwrap(), s);
        let g = grad_of(&plan, rel(&[("i", 3)], 0.0, &[(&[0], -1.0), (&[1], 2.0)]));
        assert_eq!(g.entries().len(), 1);
        assert_eq!(g.get(&[1]), 1.0);
        assert_eq!(g.get(&[0]), 0.0);
        assert_eq!(g.get(&[2]), 0.0);
    }

    #[test]
    fn max_routes_to_smallest_argmax_including_defaults() {
        let s = IndexSchema::of(&[("i", 4)]).unwrap();
        let plan = sum_plan(|b, x| b.aggregate(x, vec![GroupKey::div("i", 2)], Agg::Max).unwrap(), s);
        // group 0: stored 3 at i=1 beats default 0 at i=0; group 1: both stored, tie
        let g = grad_of(&plan, rel(&[("i", 4)], 0.0, &[(&[1], 3.0), (&[2], 5.0), (&[3], 5.0)]));
        assert_eq!(g.entries().iter().map(|(c, v)| (c[0], *v)).collect::<Vec<_>>(), vec![(1, 1.0), (2, 1.0)]);
        // negative stored value loses to the default at i=1
        let g = grad_of(&plan, rel(&[("i", 4)], 0.0, &[(&[0], -3.0)]));
        assert_eq!(g.entries().iter().map(|(c, v)| (c[0], *v)).collect::<Vec<_>>(), vec![(1, 1.0), (2, 1.0)]);
    }

    #[test]
    fn contraction_backward_uses_join_and_sum() {
        let mut b = PlanBuilder::new();
        let x = b.data("x", IndexSchema::of(&[("i", 2), ("k", 3)]).unwrap(), InputRole::Features).unwrap();
        let w = b.param("w", IndexSchema::of(&[("k", 3), ("j", 2)]).unwrap(), Some(3), "weight").unwrap();
        let j = b
            .join(x, w, eqs(&[("k", "k")]), vec![OutputColumn::left("i", "i"), OutputColumn::left("k", "k"), OutputColumn::right("j", "j")])
            .unwrap();
        let y = b.aggregate(j, vec![GroupKey::col("i"), GroupKey::col("j")], Agg::Sum).unwrap();
        let loss = b.aggregate(y, vec![], Agg::Sum).unwrap();
        let plan = b.finish(loss, None, false);
        let data = Relations::from([("x".into(), rel(&[("i", 2), ("k", 3)], 0.0, &[(&[0, 0], 1.0), (&[1, 2], 2.0)]))]);
        let params = Relations::from([("w".into(), rel(&[("k", 3), ("j", 2)], 0.0, &[(&[0, 1], 5.0), (&[2, 0], -1.0)]))]);
        let (loss, tape) = forward_with_tape(&plan, &data, &params).unwrap();
        assert_eq!(loss, 5.0 - 2.0);
        let (grads, trace) = backward_traced(&tape, &["w", "x"]).unwrap();
        // d/dw[k, j] = Σ_i x[i, k]
        let gw = &grads["w"];
        assert_eq!(gw.get(&[0, 0]), 1.0);
        assert_eq!(gw.get(&[2, 1]), 2.0);
        assert_eq!(gw.get(&[1, 0]), 0.0);
        // d/dx[i, k] = Σ_j w[k, j]
        assert_eq!(grads["x"].get(&[1, 0]), 5.0);
        assert_eq!(grads["x"].get(&[0, 2]), -1.0);
        let join_step = trace.iter().find(|s| s.forward == PrimitiveKind::Join).unwrap();
        assert_eq!(join_step.used, vec![PrimitiveKind::Join, PrimitiveKind::Aggregate, PrimitiveKind::Join, PrimitiveKind::Aggregate]);
    }

    #[test]
    fn unknown_target_is_rejected() {
        let plan = sum_plan(|_, x| x, IndexSchema::of(&[("i", 2)]).unwrap());
        let data = Relations::from([("x".to_string(), rel(&[("i", 2)], 0.0, &[]))]);
        let (_, tape) = forward_with_tape(&plan, &data, &Relations::new()).unwrap();
        assert_eq!(backward(&tape, &["nope"]).unwrap_err().kind(), "UnboundTarget");
    }

    #[test]
    fn sum_of_defaults_has_unit_gradient_everywhere() {
        let plan = sum_plan(|_, x| x, IndexSchema::of(&[("i", 3)]).unwrap());
        let g = grad_of(&plan, rel(&[("i", 3)], 7.0, &[(&[1], 2.0)]));
        assert_eq!(g.default_value(), 0.0);
        assert_eq!(g.entries().len(), 3);
        assert!(g.entries().iter().all(|(_, v)| *v == 1.0));
    }
}
