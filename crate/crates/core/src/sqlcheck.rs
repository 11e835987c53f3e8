//! Round trip: run emitted scripts on SQLite and compare every table with the
//! in-engine relation of the same node.

use std::collections::BTreeMap;

use rusqlite::types::ValueRef;
use rusqlite::Connection;

use crate::checks::CheckReport;
use crate::error::{Error, Result};
use crate::plan::{Plan, Relations};
use crate::relcore::{Coord, TensorRelation};
use crate::sqlgen::{emit_forward_sql, emit_inputs_sql, Dialect, SqlScript};

/// Per-value tolerance of the round trip.
pub const SQL_TOL: f64 = 1e-9;

/// A fresh in-memory database.
pub fn open() -> Result<Connection> {
    Ok(Connection::open_in_memory()?)
}

pub fn execute(conn: &Connection, script: &SqlScript) -> Result<()> {
    conn.execute_batch(&script.render())?;
    Ok(())
}

fn real(v: ValueRef<'_>, table: &str) -> Result<f64> {
    match v {
        ValueRef::Real(x) => Ok(x),
        ValueRef::Integer(i) => Ok(i as f64),
        other => Err(Error::NonFinite(format!("`{table}` holds a non-numeric value {other:?}"))),
    }
}

/// Rows of `table` keyed by their index columns.
pub fn read_table(conn: &Connection, table: &str, columns: &[&str], value_column: &str) -> Result<BTreeMap<Coord, f64>> {
    let mut cols: Vec<&str> = columns.to_vec();
    cols.push(value_column);
    let mut stmt = conn.prepare(&format!("SELECT {} FROM {table}", cols.join(", ")))?;
    let mut rows = stmt.query([])?;
    let mut out = BTreeMap::new();
    while let Some(row) = rows.next()? {
        let mut c = Coord::new();
        for i in 0..columns.len() {
            c.push(row.get::<_, i64>(i)?);
        }
        let v = real(row.get_ref(columns.len())?, table)?;
        if out.insert(c.clone(), v).is_some() {
            return Err(Error::DuplicateIndex(c.to_vec()));
        }
    }
    Ok(out)
}

/// Compares table rows with a relation, reading a missing row as 0.
pub fn compare_table(table: &str, rows: &BTreeMap<Coord, f64>, want: &TensorRelation, tol: f64) -> CheckReport {
    let mut r = CheckReport::new(table);
    let mut note = |got: f64, expect: f64| {
        let abs = (got - expect).abs();
        let scale = got.abs().max(expect.abs());
        r.max_abs_err = r.max_abs_err.max(abs);
        r.max_rel_err = r.max_rel_err.max(if scale > 0.0 { abs / scale } else { 0.0 });
        if !(abs <= tol) {
            r.pass = false;
        }
    };
    let mut seen = 0usize;
    for (c, v) in rows {
        if !want.schema().contains(c) {
            note(f64::INFINITY, 0.0);
            continue;
        }
        seen += 1;
        note(*v, want.get(c));
    }
    for (c, v) in want.entries() {
        if !rows.contains_key(c) {
            seen += 1;
            note(0.0, *v);
        }
    }
    if want.schema().dense_size().map_or(true, |n| seen < n) {
        note(0.0, want.default_value());
    }
    r
}

/// Loads the inputs, runs the forward script and checks every node table.
pub fn round_trip(plan: &Plan, data: &Relations, params: &Relations, dialect: Dialect) -> Result<Vec<CheckReport>> {
    let inputs = emit_inputs_sql(plan, data, params, dialect)?;
    let forward = emit_forward_sql(plan, dialect)?;
    round_trip_scripts(plan, data, params, &inputs, &forward)
}

pub fn round_trip_scripts(
    plan: &Plan,
    data: &Relations,
    params: &Relations,
    inputs: &SqlScript,
    forward: &SqlScript,
) -> Result<Vec<CheckReport>> {
    let conn = open()?;
    execute(&conn, inputs)?;
    execute(&conn, forward)?;
    let values = plan.evaluate(data, params)?;
    forward
        .node_tables
        .iter()
        .map(|(table, id)| {
            let node = plan.node(*id);
            let cols: Vec<&str> = node.schema.names().collect();
            let rows = read_table(&conn, table, &cols, &node.value_column)?;
            Ok(compare_table(table, &rows, &values[*id], SQL_TOL))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checks::random_point;
    use crate::datasets::{SbmGraph, ToyImages};
    use crate::layers::build_model;

    #[test]
    fn toy_cnn_round_trips_in_both_dialects() {
        let ds = ToyImages { images: 4, ..ToyImages::default() }.generate(1).unwrap();
        let plan = build_model(&ds.spec).unwrap();
        let params = random_point(&plan, 1).unwrap();
        for d in Dialect::ALL {
            let reports = round_trip(&plan, &ds.relations, params.relations(), d).unwrap();
            assert!(reports.len() >= 10);
            for r in &reports {
                assert!(r.pass, "{d}: {r:?}");
            }
        }
    }

    #[test]
    fn gcn_round_trips() {
        let ds = SbmGraph { nodes: 16, features: 4, hidden: 3, ..SbmGraph::default() }.generate(2).unwrap();
        let plan = build_model(&ds.spec).unwrap();
        let params = random_point(&plan, 2).unwrap();
        for d in Dialect::ALL {
            for r in round_trip(&plan, &ds.relations, params.relations(), d).unwrap() {
                assert!(r.pass, "{d}: {r:?}");
            }
        }
    }

    #[test]
    fn missing_rows_read_as_zero() {
        let s = crate::relcore::IndexSchema::of(&[("i", 3)]).unwrap();
        let want = TensorRelation::new(s, 0.0, vec![([1i64], 2.0)]).unwrap();
        let rows = BTreeMap::from([(Coord::from_slice(&[1]), 2.0), (Coord::from_slice(&[2]), 0.0)]);
        assert!(compare_table("t", &rows, &want, 1e-12).pass);
        let wrong = BTreeMap::from([(Coord::from_slice(&[0]), 2.0)]);
        assert!(!compare_table("t", &wrong, &want, 1e-12).pass);
    }
}
