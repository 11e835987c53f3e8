//! Tensor-relations and the relational primitives every layer is built from.

mod affine;
pub mod io;
mod ops;
mod relation;
mod scalar;
mod schema;

pub use affine::AffineIndexExpr;
pub use ops::{
    aggregate, aggregate_schema, densify, densify_capped, eqs, equi_join_product, filter_range, filter_schema,
    join_add, join_add_schema, join_product_capped, join_schema, reindex, reindex_schema, scalar_map, Agg,
    GroupKey, OutputColumn, Side,
};
pub(crate) use ops::{add_layout, agg_layout, join_layout, AggLayout};
pub(crate) use schema::for_each_in_box;
pub use relation::{Coord, TensorRelation, DEFAULT_DENSE_CAP};
pub use scalar::ScalarFn;
pub use schema::{Column, IndexSchema};
