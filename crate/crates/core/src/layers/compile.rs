//! Lowering of layers to relational sub-plans.

use super::spec::{LayerSpec, ModelSpec};
use crate::error::{Error, Result};
use crate::plan::{InputRole, LossHead, NodeId, Plan, PlanBuilder};
use crate::relcore::{eqs, AffineIndexExpr, Agg, GroupKey, IndexSchema, OutputColumn, ScalarFn};

fn chain_err(layer: &str, message: impl Into<String>) -> Error {
    Error::ShapeChain { layer: layer.into(), message: message.into() }
}

fn names(s: &IndexSchema) -> Vec<String> {
    s.names().map(str::to_string).collect()
}

/// `base`, or `base_2`, `base_3`, ... avoiding `taken`.
fn fresh(taken: &[&str], base: &str) -> String {
    if !taken.contains(&base) {
        return base.to_string();
    }
    (2..).map(|i| format!("{base}_{i}")).find(|c| !taken.contains(&c.as_str())).unwrap()
}

fn expect_rank(layer: &str, s: &IndexSchema, rank: usize, what: &str) -> Result<()> {
    if s.len() != rank {
        return Err(chain_err(layer, format!("{what} needs {rank} index columns, found {:?}", names(s))));
    }
    Ok(())
}

/// Densify-then-add: every output coordinate receives its bias even when its
/// group had no stored entries.
fn add_bias(b: &mut PlanBuilder, unbiased: NodeId, bias: NodeId, on: (&str, &str), aliases: Vec<String>) -> Result<NodeId> {
    let dense = b.densify(unbiased)?;
    b.join_add(dense, bias, eqs(&[on]), aliases)
}

/// conv2d: join on the channel, shift by the kernel offset, keep valid
/// positions, sum, then add the bias.
pub fn compile_conv2d(
    b: &mut PlanBuilder,
    layer: &str,
    x: NodeId,
    (in_channels, out_channels, kernel): (usize, usize, usize),
    weight: &str,
    bias: &str,
) -> Result<NodeId> {
    let s = b.schema(x).clone();
    expect_rank(layer, &s, 4, "conv2d input")?;
    let n = names(&s);
    let (img, ch, r, c) = (&n[0], &n[1], &n[2], &n[3]);
    let cols = s.columns();
    if cols[1].domain_size != in_channels {
        return Err(chain_err(layer, format!("expects {in_channels} input channels, got {}", cols[1].domain_size)));
    }
    let (rows, width) = (cols[2].domain_size, cols[3].domain_size);
    if kernel == 0 || kernel > rows || kernel > width {
        return Err(chain_err(layer, format!("kernel {kernel} does not fit {rows}×{width}")));
    }
    let w = b.param(
        weight,
        IndexSchema::of(&[("out_channel", out_channels), ("in_channel", in_channels), ("r", kernel), ("c", kernel)])?,
        Some(in_channels * kernel * kernel),
        "weight",
    )?;
    let bias_node = b.param(bias, IndexSchema::of(&[("out_channel", out_channels)])?, None, "bias")?;

    let taken: Vec<&str> = n.iter().map(String::as_str).collect();
    let oc = fresh(&taken, "out_channel");
    let kr = fresh(&taken, "kr");
    let kc = fresh(&taken, "kc");
    let joined = b.join(
        x,
        w,
        eqs(&[(ch, "in_channel")]),
        vec![
            OutputColumn::left(img, img),
            OutputColumn::left(ch, ch),
            OutputColumn::left(r, r),
            OutputColumn::left(c, c),
            OutputColumn::right("out_channel", &oc),
            OutputColumn::right("r", &kr),
            OutputColumn::right("c", &kc),
        ],
    )?;
    let r1 = fresh(&[img, ch, &oc, &kr, &kc], &format!("{r}1"));
    let c1 = fresh(&[img, ch, &oc, &kr, &kc, &r1], &format!("{c}1"));
    let shifted = b.reindex(
        joined,
        vec![
            AffineIndexExpr::new(r1.clone(), &[(r, 1), (&kr, -1)], 0),
            AffineIndexExpr::new(c1.clone(), &[(c, 1), (&kc, -1)], 0),
        ],
        vec![img.clone(), ch.clone(), oc.clone(), kr.clone(), kc.clone()],
    )?;
    let valid_r = b.filter(shifted, &r1, 0, (rows - kernel) as i64)?;
    let valid = b.filter(valid_r, &c1, 0, (width - kernel) as i64)?;
    let unbiased = b.aggregate(
        valid,
        vec![GroupKey::col(img), GroupKey::alias(&oc, ch), GroupKey::col(&r1), GroupKey::col(&c1)],
        Agg::Sum,
    )?;
    b.materialize(unbiased, &format!("{layer}_unbiased"), "val");
    let out = add_bias(b, unbiased, bias_node, (ch, "out_channel"), vec![img.clone(), ch.clone(), r.clone(), c.clone()])?;
    b.materialize(out, &format!("{layer}_out"), "val");
    Ok(out)
}

pub fn compile_relu(b: &mut PlanBuilder, layer: &str, x: NodeId) -> Result<NodeId> {
    let out = b.map(x, ScalarFn::Relu)?;
    b.materialize(out, &format!("{layer}_out"), "val");
    Ok(out)
}

/// 2×2 max pooling: group on `(r / 2, c / 2)`.
pub fn compile_maxpool2x2(b: &mut PlanBuilder, layer: &str, x: NodeId) -> Result<NodeId> {
    let s = b.schema(x).clone();
    expect_rank(layer, &s, 4, "maxpool2x2 input")?;
    let cols = s.columns();
    if cols[2].domain_size % 2 != 0 || cols[3].domain_size % 2 != 0 {
        return Err(Error::OddExtent(format!(
            "layer `{layer}`: spatial extent {}×{} is not even",
            cols[2].domain_size, cols[3].domain_size
        )));
    }
    let n = names(&s);
    let out = b.aggregate(
        x,
        vec![GroupKey::col(&n[0]), GroupKey::col(&n[1]), GroupKey::div(&n[2], 2), GroupKey::div(&n[3], 2)],
        Agg::Max,
    )?;
    b.materialize(out, &format!("{layer}_out"), "val");
    Ok(out)
}

/// `(image, channel, r, c)` → `(image, i)` with `i = (channel · R + r) · C + c`.
pub fn compile_flatten(b: &mut PlanBuilder, layer: &str, x: NodeId) -> Result<NodeId> {
    let s = b.schema(x).clone();
    expect_rank(layer, &s, 4, "flatten input")?;
    let n = names(&s);
    let (rows, width) = (s.columns()[2].domain_size as i64, s.columns()[3].domain_size as i64);
    let i = fresh(&[&n[0]], "i");
    let out = b.reindex(
        x,
        vec![AffineIndexExpr::new(i, &[(&n[1], rows * width), (&n[2], width), (&n[3], 1)], 0)],
        vec![n[0].clone()],
    )?;
    b.materialize(out, &format!("{layer}_out"), "val");
    Ok(out)
}

pub fn compile_fully_connected(
    b: &mut PlanBuilder,
    layer: &str,
    x: NodeId,
    (in_dim, out_dim): (usize, usize),
    weight: &str,
    bias: &str,
) -> Result<NodeId> {
    let s = b.schema(x).clone();
    expect_rank(layer, &s, 2, "fully_connected input")?;
    let n = names(&s);
    let (row, i) = (&n[0], &n[1]);
    if s.columns()[1].domain_size != in_dim {
        return Err(chain_err(layer, format!("expects {in_dim} inputs, got {}", s.columns()[1].domain_size)));
    }
    let w = b.param(weight, IndexSchema::of(&[("out_dim", out_dim), ("in_dim", in_dim)])?, Some(in_dim), "weight")?;
    let bias_node = b.param(bias, IndexSchema::of(&[("out_dim", out_dim)])?, None, "bias")?;
    let od = fresh(&[row, i], "out_dim");
    let joined = b.join(
        x,
        w,
        eqs(&[(i, "in_dim")]),
        vec![OutputColumn::left(row, row), OutputColumn::left(i, i), OutputColumn::right("out_dim", &od)],
    )?;
    let unbiased = b.aggregate(joined, vec![GroupKey::col(row), GroupKey::alias(&od, i)], Agg::Sum)?;
    b.materialize(unbiased, &format!("{layer}_unbiased"), "val");
    let out = add_bias(b, unbiased, bias_node, (i, "out_dim"), vec![])?;
    b.materialize(out, &format!("{layer}_out"), "val");
    Ok(out)
}

/// `A X W + B`: two chained contractions, then the bias over the feature axis.
pub fn compile_graph_conv(
    b: &mut PlanBuilder,
    layer: &str,
    x: NodeId,
    (in_dim, out_dim): (usize, usize),
    adjacency: NodeId,
    weight: &str,
    bias: &str,
) -> Result<NodeId> {
    let s = b.schema(x).clone();
    expect_rank(layer, &s, 2, "graph_conv input")?;
    let n = names(&s);
    let (row, feat) = (&n[0], &n[1]);
    let nodes = s.columns()[0].domain_size;
    if s.columns()[1].domain_size != in_dim {
        return Err(chain_err(layer, format!("expects {in_dim} features, got {}", s.columns()[1].domain_size)));
    }
    let a = b.schema(adjacency).clone();
    if a.len() != 2 || a.columns().iter().any(|c| c.domain_size != nodes) {
        return Err(chain_err(layer, format!("adjacency must be {nodes}×{nodes}, found {:?}", a.columns())));
    }
    let w = b.param(weight, IndexSchema::of(&[("i", in_dim), ("j", out_dim)])?, Some(in_dim), "weight")?;
    let bias_node = b.param(bias, IndexSchema::of(&[("i", out_dim)])?, None, "bias")?;
    let k = fresh(&[row, feat], "k");
    let j_out = fresh(&[row, feat, &k], "j_out");

    // X W
    let xw = b.join(
        x,
        w,
        eqs(&[(feat, "i")]),
        vec![OutputColumn::left(row, row), OutputColumn::left(feat, &k), OutputColumn::right("j", &j_out)],
    )?;
    let mid = b.aggregate(xw, vec![GroupKey::col(row), GroupKey::alias(&j_out, feat)], Agg::Sum)?;
    b.materialize(mid, &format!("{layer}_mid"), "val");

    // A (X W)
    let an = names(&a);
    let prop = b.join(
        adjacency,
        mid,
        eqs(&[(&an[1], row)]),
        vec![OutputColumn::left(&an[0], row), OutputColumn::left(&an[1], &k), OutputColumn::right(feat, feat)],
    )?;
    let agg = b.aggregate(prop, vec![GroupKey::col(row), GroupKey::col(feat)], Agg::Sum)?;
    b.materialize(agg, &format!("{layer}_agg"), "val");
    let out = add_bias(b, agg, bias_node, (feat, "i"), vec![])?;
    b.materialize(out, &format!("{layer}_out"), "val");
    Ok(out)
}

/// Mean over rows of `-x[label] + ln Σ exp(x)`. Returns the scalar loss node
/// and the logits node that is scored.
pub fn compile_cross_entropy(
    b: &mut PlanBuilder,
    layer: &str,
    logits: NodeId,
    labels: NodeId,
    selection: Option<NodeId>,
) -> Result<(NodeId, NodeId)> {
    let s = b.schema(logits).clone();
    expect_rank(layer, &s, 2, "cross_entropy logits")?;
    let n = names(&s);
    let (row, cls) = (&n[0], &n[1]);

    let scored = match selection {
        None => logits,
        Some(sel) => {
            let ss = b.schema(sel).clone();
            if ss.len() != 2 || ss.columns()[1].domain_size != s.columns()[0].domain_size {
                return Err(chain_err(layer, format!("selection must be (k, {row}) over {} rows", s.columns()[0].domain_size)));
            }
            let sn = names(&ss);
            let k = fresh(&[row, cls], "k");
            let joined = b.join(
                logits,
                sel,
                eqs(&[(row, &sn[1])]),
                vec![OutputColumn::left(row, row), OutputColumn::left(cls, cls), OutputColumn::right(&sn[0], &k)],
            )?;
            let picked = b.aggregate(joined, vec![GroupKey::alias(&k, row), GroupKey::col(cls)], Agg::Sum)?;
            b.materialize(picked, &format!("{layer}_selected"), "val");
            picked
        }
    };
    let ls = b.schema(labels).clone();
    if !ls.same_shape(b.schema(scored)) {
        return Err(chain_err(
            layer,
            format!("labels {:?} do not match scored logits {:?}", ls.columns(), b.schema(scored).columns()),
        ));
    }
    let ln = names(&ls);

    let e = b.map(scored, ScalarFn::Exp)?;
    let sum = b.aggregate(e, vec![GroupKey::col(row)], Agg::Sum)?;
    let right = b.map(sum, ScalarFn::Log)?;
    b.materialize(right, &format!("{layer}_losses_r"), "r");

    let picked = b.join(
        scored,
        labels,
        eqs(&[(row, &ln[0]), (cls, &ln[1])]),
        vec![OutputColumn::left(row, row), OutputColumn::left(cls, cls)],
    )?;
    let chosen = b.aggregate(picked, vec![GroupKey::col(row)], Agg::Sum)?;
    let left = b.map(chosen, ScalarFn::Negate)?;
    b.materialize(left, &format!("{layer}_losses_l"), "l");

    let losses = b.join_add(left, right, eqs(&[(row, row)]), vec![])?;
    b.materialize(losses, &format!("{layer}_losses"), "val");
    let loss = b.aggregate(losses, vec![], Agg::Avg)?;
    b.materialize(loss, &format!("{layer}_loss"), "val");
    Ok((loss, scored))
}

/// Compiles a whole model into a plan whose output is the scalar loss (or,
/// for an argmax head, the logits).
pub fn build_model(spec: &ModelSpec) -> Result<Plan> {
    let mut b = PlanBuilder::new();
    let feats = spec.features()?;
    let mut cur = b.data(&feats.name, feats.schema.clone(), InputRole::Features)?;
    let mut loss_head = None;
    let mut predicts = false;
    let last = spec.layers.len();
    for (idx, layer) in spec.layers.iter().enumerate() {
        let name = layer.name();
        if loss_head.is_some() || predicts {
            return Err(chain_err(name, "no layer may follow the loss or prediction head"));
        }
        b.set_scope(name);
        let (w_name, b_name) = layer.param_names().unwrap_or_default();
        cur = match layer {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                compile_conv2d(&mut b, name, cur, (*in_channels, *out_channels, *kernel), &w_name, &b_name)?
            }
            LayerSpec::Relu { .. } => compile_relu(&mut b, name, cur)?,
            LayerSpec::Maxpool2x2 { .. } => compile_maxpool2x2(&mut b, name, cur)?,
            LayerSpec::Flatten { .. } => compile_flatten(&mut b, name, cur)?,
            LayerSpec::FullyConnected { in_dim, out_dim, .. } => {
                compile_fully_connected(&mut b, name, cur, (*in_dim, *out_dim), &w_name, &b_name)?
            }
            LayerSpec::GraphConv { in_dim, out_dim, adjacency, .. } => {
                let a = spec.input(adjacency)?;
                let adj = b.data(&a.name, a.schema.clone(), a.role)?;
                compile_graph_conv(&mut b, name, cur, (*in_dim, *out_dim), adj, &w_name, &b_name)?
            }
            LayerSpec::CrossEntropyLoss { labels, selection, .. } => {
                let classes = b.schema(cur).columns().get(1).map(|c| c.domain_size);
                if classes != Some(spec.class_count) {
                    return Err(chain_err(name, format!("logits have {classes:?} classes, model declares {}", spec.class_count)));
                }
                let sel = match selection {
                    Some(s) => {
                        let d = spec.input(s)?;
                        Some(b.data(&d.name, d.schema.clone(), d.role)?)
                    }
                    None => None,
                };
                let l = spec.input(labels)?;
                let labels_node = b.data(&l.name, l.schema.clone(), l.role)?;
                let (loss, scored) = compile_cross_entropy(&mut b, name, cur, labels_node, sel)?;
                loss_head = Some(LossHead { logits: scored, input: cur, labels: l.name.clone() });
                loss
            }
            LayerSpec::ArgmaxPredict { .. } => {
                if idx + 1 != last {
                    return Err(chain_err(name, "argmax_predict must be the last layer"));
                }
                let s = b.schema(cur);
                if s.len() != 2 {
                    return Err(chain_err(name, format!("argmax needs (row, class) logits, found {:?}", names(s))));
                }
                predicts = true;
                cur
            }
        };
    }
    Ok(b.finish(cur, loss_head, predicts))
}
