//! Plans: DAGs of relational primitive applications.
//!
//! A [`Plan`] is the executable form of a model `f(D, P)`: data and parameter
//! relations flow in at source nodes, every other node applies one primitive,
//! and the output node is usually the scalar loss.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relcore::{
    aggregate, aggregate_schema, densify, equi_join_product, filter_range, filter_schema, join_add, join_add_schema,
    join_schema, reindex, reindex_schema, scalar_map, AffineIndexExpr, Agg, GroupKey, IndexSchema, OutputColumn,
    ScalarFn, TensorRelation,
};

pub type NodeId = usize;

/// Named relations, e.g. the data `D` of one evaluation.
pub type Relations = BTreeMap<String, TensorRelation>;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Data { name: String },
    Param { name: String },
    Join { equalities: Vec<(String, String)>, output: Vec<OutputColumn> },
    JoinAdd { equalities: Vec<(String, String)>, aliases: Vec<String> },
    Reindex { exprs: Vec<AffineIndexExpr>, keep: Vec<String> },
    Filter { column: String, lo: i64, hi: i64 },
    Aggregate { keys: Vec<GroupKey>, agg: Agg },
    Map { f: ScalarFn },
    Densify,
}

/// Kinds of primitive, used to describe what a forward or backward pass ran.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Join,
    JoinAdd,
    Reindex,
    Filter,
    Aggregate,
    Map,
    Densify,
}

impl Op {
    pub fn kind(&self) -> Option<PrimitiveKind> {
        Some(match self {
            Op::Data { .. } | Op::Param { .. } => return None,
            Op::Join { .. } => PrimitiveKind::Join,
            Op::JoinAdd { .. } => PrimitiveKind::JoinAdd,
            Op::Reindex { .. } => PrimitiveKind::Reindex,
            Op::Filter { .. } => PrimitiveKind::Filter,
            Op::Aggregate { .. } => PrimitiveKind::Aggregate,
            Op::Map { .. } => PrimitiveKind::Map,
            Op::Densify => PrimitiveKind::Densify,
        })
    }

    /// Output schema given the input schemas; the same check runs again at execution.
    pub fn output_schema(&self, inputs: &[&IndexSchema]) -> Result<IndexSchema> {
        match self {
            Op::Data { .. } | Op::Param { .. } => unreachable!("sources carry their declared schema"),
            Op::Join { equalities, output } => join_schema(inputs[0], inputs[1], equalities, output),
            Op::JoinAdd { equalities, aliases } => join_add_schema(inputs[0], inputs[1], equalities, aliases),
            Op::Reindex { exprs, keep } => reindex_schema(inputs[0], exprs, keep),
            Op::Filter { column, lo, hi } => filter_schema(inputs[0], column, *lo, *hi),
            Op::Aggregate { keys, .. } => aggregate_schema(inputs[0], keys),
            Op::Map { .. } | Op::Densify => Ok(inputs[0].clone()),
        }
    }

    /// Applies the primitive. Source nodes are resolved by the caller.
    pub fn apply(&self, inputs: &[&TensorRelation]) -> Result<TensorRelation> {
        match self {
            Op::Data { .. } | Op::Param { .. } => unreachable!("sources are bound, not applied"),
            Op::Join { equalities, output } => equi_join_product(inputs[0], inputs[1], equalities, output),
            Op::JoinAdd { equalities, aliases } => join_add(inputs[0], inputs[1], equalities, aliases),
            Op::Reindex { exprs, keep } => reindex(inputs[0], exprs, keep),
            Op::Filter { column, lo, hi } => filter_range(inputs[0], column, *lo, *hi),
            Op::Aggregate { keys, agg } => aggregate(inputs[0], keys, *agg),
            Op::Map { f } => scalar_map(inputs[0], *f),
            Op::Densify => densify(inputs[0]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Node {
    /// Unique, e.g. `conv1/join`.
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub schema: IndexSchema,
    /// SQL table materializing this node, if any; other nodes are inlined.
    pub table: Option<String>,
    /// Name of the value column of that table.
    pub value_column: String,
}

/// What a data relation means; only affects SQL emission and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputRole {
    Features,
    Adjacency,
    /// One-hot `(row, class) → 1`.
    Labels,
    /// One-hot `(k, row) → 1` picking rows, e.g. a train mask.
    Selection,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataDecl {
    pub name: String,
    pub schema: IndexSchema,
    pub role: InputRole,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamDecl {
    pub name: String,
    pub schema: IndexSchema,
    /// Input dimension for weights; `None` for biases.
    pub fan_in: Option<usize>,
}

/// The loss layer's view of its inputs, for accuracy reporting.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossHead {
    /// Logits actually scored (after any row selection).
    pub logits: NodeId,
    /// Logits of every row, before any selection.
    pub input: NodeId,
    pub labels: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Plan {
    pub nodes: Vec<Node>,
    pub output: NodeId,
    pub data: Vec<DataDecl>,
    pub params: Vec<ParamDecl>,
    pub loss: Option<LossHead>,
    /// Set when the model ends in an argmax head: the output node holds logits.
    pub predicts: bool,
}

impl Plan {
    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn node_by_table(&self, table: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.table.as_deref() == Some(table))
    }

    pub fn data_decl(&self, name: &str) -> Option<&DataDecl> {
        self.data.iter().find(|d| d.name == name)
    }

    /// Evaluates every node in order and returns all values.
    pub fn evaluate(&self, data: &Relations, params: &Relations) -> Result<Vec<Arc<TensorRelation>>> {
        let mut values: Vec<Arc<TensorRelation>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Data { name } => Arc::new(bind(name, &node.schema, data, "data")?.clone()),
                Op::Param { name } => Arc::new(bind(name, &node.schema, params, "parameter")?.clone()),
                op => {
                    let ins: Vec<&TensorRelation> = node.inputs.iter().map(|i| values[*i].as_ref()).collect();
                    Arc::new(op.apply(&ins)?)
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Evaluates the plan and returns the output relation.
    pub fn forward(&self, data: &Relations, params: &Relations) -> Result<TensorRelation> {
        let mut values = self.evaluate(data, params)?;
        let out = values.swap_remove(self.output);
        Ok(Arc::try_unwrap(out).unwrap_or_else(|a| (*a).clone()))
    }

    /// Evaluates the plan and returns the scalar output.
    pub fn loss(&self, data: &Relations, params: &Relations) -> Result<f64> {
        self.forward(data, params)?.scalar_value()
    }
}

fn bind<'a>(name: &str, schema: &IndexSchema, rels: &'a Relations, what: &str) -> Result<&'a TensorRelation> {
    let r = rels.get(name).ok_or_else(|| Error::MissingInput(format!("{what} relation `{name}` is not bound")))?;
    if !r.schema().same_shape(schema) || !r.schema().names().eq(schema.names()) {
        return Err(Error::SchemaMismatch(format!(
            "{what} `{name}`: expected {:?}, bound {:?}",
            schema.columns(),
            r.schema().columns()
        )));
    }
    Ok(r)
}

impl fmt::Display for Plan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, n) in self.nodes.iter().enumerate() {
            let cols: Vec<String> = n.schema.columns().iter().map(|c| format!("{}:{}", c.name, c.domain_size)).collect();
            write!(f, "%{i} {} = {:?}{:?} [{}]", n.name, n.op.kind().map_or("source".to_string(), |k| format!("{k:?}")), n.inputs, cols.join(", "))?;
            if let Some(t) = &n.table {
                write!(f, " -> {t}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Incremental plan construction with schema checking at every step.
#[derive(Debug, Default)]
pub struct PlanBuilder {
    nodes: Vec<Node>,
    data: Vec<DataDecl>,
    params: Vec<ParamDecl>,
    scope: String,
}

impl PlanBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Prefix for the names of subsequently added nodes (usually the layer name).
    pub fn set_scope(&mut self, scope: &str) {
        self.scope = scope.to_string();
    }

    pub fn schema(&self, id: NodeId) -> &IndexSchema {
        &self.nodes[id].schema
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    fn fresh_name(&self, what: &str) -> String {
        let base = if self.scope.is_empty() { what.to_string() } else { format!("{}/{what}", self.scope) };
        if !self.nodes.iter().any(|n| n.name == base) {
            return base;
        }
        (2..).map(|i| format!("{base}{i}")).find(|c| !self.nodes.iter().any(|n| &n.name == c)).unwrap()
    }

    fn push(&mut self, what: &str, op: Op, inputs: Vec<NodeId>, schema: IndexSchema) -> NodeId {
        let name = self.fresh_name(what);
        self.nodes.push(Node { name, op, inputs, schema, table: None, value_column: "val".into() });
        self.nodes.len() - 1
    }

    /// Declares (or reuses) a data relation.
    pub fn data(&mut self, name: &str, schema: IndexSchema, role: InputRole) -> Result<NodeId> {
        if let Some(d) = self.data.iter().find(|d| d.name == name) {
            if d.schema != schema {
                return Err(Error::SchemaMismatch(format!("data `{name}` declared with two schemas")));
            }
            return Ok(self.nodes.iter().position(|n| matches!(&n.op, Op::Data { name: m } if m == name)).unwrap());
        }
        self.data.push(DataDecl { name: name.into(), schema: schema.clone(), role });
        let id = self.push(name, Op::Data { name: name.into() }, vec![], schema);
        self.nodes[id].name = name.into();
        self.nodes[id].table = Some(name.into());
        Ok(id)
    }

    pub fn param(&mut self, name: &str, schema: IndexSchema, fan_in: Option<usize>, value_column: &str) -> Result<NodeId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::SchemaMismatch(format!("parameter `{name}` declared twice")));
        }
        self.params.push(ParamDecl { name: name.into(), schema: schema.clone(), fan_in });
        let id = self.push(name, Op::Param { name: name.into() }, vec![], schema);
        self.nodes[id].name = name.into();
        self.nodes[id].table = Some(name.into());
        self.nodes[id].value_column = value_column.into();
        Ok(id)
    }

    fn apply(&mut self, what: &str, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        let schemas: Vec<&IndexSchema> = inputs.iter().map(|i| &self.nodes[*i].schema).collect();
        let schema = op.output_schema(&schemas)?;
        Ok(self.push(what, op, inputs, schema))
    }

    pub fn join(&mut self, a: NodeId, b: NodeId, equalities: Vec<(String, String)>, output: Vec<OutputColumn>) -> Result<NodeId> {
        self.apply("join", Op::Join { equalities, output }, vec![a, b])
    }

    pub fn join_add(&mut self, a: NodeId, b: NodeId, equalities: Vec<(String, String)>, aliases: Vec<String>) -> Result<NodeId> {
        self.apply("add", Op::JoinAdd { equalities, aliases }, vec![a, b])
    }

    pub fn reindex(&mut self, x: NodeId, exprs: Vec<AffineIndexExpr>, keep: Vec<String>) -> Result<NodeId> {
        self.apply("reindex", Op::Reindex { exprs, keep }, vec![x])
    }

    pub fn filter(&mut self, x: NodeId, column: &str, lo: i64, hi: i64) -> Result<NodeId> {
        self.apply("filter", Op::Filter { column: column.into(), lo, hi }, vec![x])
    }

    pub fn aggregate(&mut self, x: NodeId, keys: Vec<GroupKey>, agg: Agg) -> Result<NodeId> {
        self.apply("aggregate", Op::Aggregate { keys, agg }, vec![x])
    }

    pub fn map(&mut self, x: NodeId, f: ScalarFn) -> Result<NodeId> {
        self.apply("map", Op::Map { f }, vec![x])
    }

    pub fn densify(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply("densify", Op::Densify, vec![x])
    }

    /// Marks `id` as materialized in SQL under `table`, with value column `value_column`.
    pub fn materialize(&mut self, id: NodeId, table: &str, value_column: &str) {
        self.nodes[id].table = Some(table.into());
        self.nodes[id].value_column = value_column.into();
    }

    pub fn finish(self, output: NodeId, loss: Option<LossHead>, predicts: bool) -> Plan {
        Plan { nodes: self.nodes, output, data: self.data, params: self.params, loss, predicts }
    }
}
