//! CSV + JSON sidecar persistence.
//!
//! `<name>.csv` holds one row per stored entry: the index columns in schema
//! order followed by `val`. `<name>.schema.json` carries the domains and the
//! default: `{"columns": [{"name": .., "domain_size": ..}], "default": 0.0}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::relation::{Coord, TensorRelation};
use super::schema::IndexSchema;
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    columns: IndexSchema,
    default: f64,
}

pub fn csv_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.csv"))
}

pub fn sidecar_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.schema.json"))
}

pub fn write_relation(dir: &Path, name: &str, rel: &TensorRelation) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(csv_path(dir, name))?;
    let mut header: Vec<String> = rel.schema().names().map(str::to_string).collect();
    header.push("val".into());
    w.write_record(&header)?;
    for (c, v) in rel.entries() {
        let mut row: Vec<String> = c.iter().map(|i| i.to_string()).collect();
        row.push(format!("{v:?}"));
        w.write_record(&row)?;
    }
    w.flush()?;
    let side = Sidecar { columns: rel.schema().clone(), default: rel.default_value() };
    fs::write(sidecar_path(dir, name), serde_json::to_string_pretty(&side)? + "\n")?;
    Ok(())
}

pub fn read_relation(dir: &Path, name: &str) -> Result<TensorRelation> {
    let (csv_p, side_p) = (csv_path(dir, name), sidecar_path(dir, name));
    if !csv_p.exists() || !side_p.exists() {
        return Err(Error::MissingInput(format!("relation `{name}` not found in {}", dir.display())));
    }
    let side: Sidecar = serde_json::from_str(&fs::read_to_string(side_p)?)?;
    let mut r = csv::Reader::from_path(csv_p)?;
    let expected: Vec<&str> = side.columns.names().chain(["val"]).collect();
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != expected {
        return Err(Error::SchemaMismatch(format!("`{name}`: header {header:?}, expected {expected:?}")));
    }
    let n = side.columns.len();
    let mut entries = Vec::new();
    for row in r.records() {
        let row = row?;
        let parse_err = |f: &str| Error::InvalidParams(format!("`{name}`: cannot parse `{f}`"));
        let c = row
            .iter()
            .take(n)
            .map(|f| f.trim().parse::<i64>().map_err(|_| parse_err(f)))
            .collect::<Result<Coord>>()?;
        let v_field = row.get(n).unwrap_or("");
        let v = v_field.trim().parse::<f64>().map_err(|_| parse_err(v_field))?;
        entries.push((c, v));
    }
    TensorRelation::new(side.columns, side.default, entries)
}
