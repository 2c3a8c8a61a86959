//! Deterministic file exports. Every artifact embeds the resolved
//! configuration and a SHA-256 content hash, and all numbers print in
//! shortest round-trip decimal, so a rerun with the same config and seed
//! produces byte-identical files.
//!
//! CSV layouts are frozen (documented in the README):
//!
//! ```text
//! values:      ordinal, k_0..k_{d-1}, value            (V fields)
//! values (W):  ordinal, k_0..k_{d-1}, log_w, w
//! policy:      ordinal, k_0..k_{d-1}, q_{x}_{y} per edge
//! paths:       trial, jump, time, k_0..k_{d-1}, edge
//! trajectory:  t, mu_0..mu_{d-1}, q_{x}_{y} per edge
//! convergence: n, sup_gap
//! lln:         n, median_dev, p90_dev
//! ```

use std::fmt::Write as _;
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::cost::CostModel;
use crate::error::Result;
use crate::limit::TrajectoryControl;
use crate::sim::{LlnTable, PathSample};
use crate::solver::{FieldKind, Policy, ValueField};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Canonical hash of a cost model (used as run metadata).
pub fn model_hash(model: &CostModel) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(model)?.as_bytes()))
}

/// Writes a JSON artifact with the config echoed under `"config"` and a
/// `"content_hash"` over the serialized document without the hash field.
pub fn write_json(path: &Path, config: &Value, body: Value) -> Result<()> {
    let mut doc = serde_json::Map::new();
    doc.insert("config".into(), config.clone());
    doc.insert("results".into(), body);
    let unhashed = serde_json::to_string_pretty(&Value::Object(doc.clone()))?;
    doc.insert("content_hash".into(), Value::String(sha256_hex(unhashed.as_bytes())));
    std::fs::write(path, serde_json::to_string_pretty(&Value::Object(doc))? + "\n")?;
    Ok(())
}

/// Writes a CSV artifact: a hash comment, a config comment, then the
/// frozen header and rows.
fn write_csv(path: &Path, config: &Value, header: &str, rows: &[String]) -> Result<()> {
    let mut data = String::new();
    let _ = writeln!(data, "# config: {}", serde_json::to_string(config)?);
    let _ = writeln!(data, "{header}");
    for row in rows {
        let _ = writeln!(data, "{row}");
    }
    let mut out = format!("# content_hash: {}\n", sha256_hex(data.as_bytes()));
    out.push_str(&data);
    std::fs::write(path, out)?;
    Ok(())
}

fn counts_header(d: usize) -> String {
    (0..d).map(|x| format!("k_{x}")).collect::<Vec<_>>().join(",")
}

fn edge_header(model: &CostModel) -> String {
    model
        .edges()
        .edges()
        .iter()
        .map(|&(x, y)| format!("q_{x}_{y}"))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn write_value_field_csv(path: &Path, config: &Value, field: &ValueField) -> Result<()> {
    let grid = field.grid();
    let d = grid.d();
    let header = match field.kind {
        FieldKind::V => format!("ordinal,{},value", counts_header(d)),
        FieldKind::LogW => format!("ordinal,{},log_w,w", counts_header(d)),
    };
    let rows: Vec<String> = (0..grid.len() as u32)
        .map(|i| {
            let counts = grid
                .counts(i)
                .iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join(",");
            match field.kind {
                FieldKind::V => format!("{i},{counts},{}", field.value(i)),
                FieldKind::LogW => {
                    format!("{i},{counts},{},{}", field.value(i), field.w_value(i))
                }
            }
        })
        .collect();
    write_csv(path, config, &header, &rows)
}

pub fn write_policy_csv(
    path: &Path,
    config: &Value,
    model: &CostModel,
    policy: &Policy,
) -> Result<()> {
    let grid = policy.grid();
    let header = format!(
        "ordinal,{},{}",
        counts_header(grid.d()),
        edge_header(model)
    );
    let rows: Vec<String> = (0..grid.len() as u32)
        .map(|i| {
            let counts = grid
                .counts(i)
                .iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join(",");
            let rates = policy
                .rates_at(i)
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(",");
            format!("{i},{counts},{rates}")
        })
        .collect();
    write_csv(path, config, &header, &rows)
}

pub fn write_paths_csv(
    path: &Path,
    config: &Value,
    grid: &crate::lattice::SimplexGrid,
    paths: &[PathSample],
) -> Result<()> {
    let header = format!("trial,jump,time,{},edge", counts_header(grid.d()));
    let mut rows = Vec::new();
    for (trial, sample) in paths.iter().enumerate() {
        for (k, &point) in sample.points.iter().enumerate() {
            let t = if k == 0 { 0.0 } else { sample.times[k - 1] };
            let edge = if k == 0 {
                "start".to_string()
            } else {
                sample.edges_fired[k - 1].to_string()
            };
            let counts = grid
                .counts(point)
                .iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join(",");
            rows.push(format!("{trial},{k},{t},{counts},{edge}"));
        }
    }
    write_csv(path, config, &header, &rows)
}

pub fn write_trajectory_csv(
    path: &Path,
    config: &Value,
    model: &CostModel,
    traj: &TrajectoryControl,
) -> Result<()> {
    let d = traj.d;
    let mu_header = (0..d).map(|x| format!("mu_{x}")).collect::<Vec<_>>().join(",");
    let header = format!("t,{mu_header},{}", edge_header(model));
    let rows: Vec<String> = traj
        .times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let mu = traj.path[k * d..(k + 1) * d]
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(",");
            let interval = k.min(traj.times.len().saturating_sub(2));
            let q = if traj.controls.is_empty() {
                vec!["0".to_string(); traj.ne].join(",")
            } else {
                traj.controls[interval * traj.ne..(interval + 1) * traj.ne]
                    .iter()
                    .map(f64::to_string)
                    .collect::<Vec<_>>()
                    .join(",")
            };
            format!("{t},{mu},{q}")
        })
        .collect();
    write_csv(path, config, &header, &rows)
}

pub fn write_convergence_csv(
    path: &Path,
    config: &Value,
    rows: &[(usize, f64)],
) -> Result<()> {
    let body: Vec<String> = rows.iter().map(|(n, gap)| format!("{n},{gap}")).collect();
    write_csv(path, config, "n,sup_gap", &body)
}

pub fn write_lln_csv(path: &Path, config: &Value, table: &LlnTable) -> Result<()> {
    let body: Vec<String> = table
        .rows
        .iter()
        .map(|r| format!("{},{},{}", r.n, r.median_dev, r.p90_dev))
        .collect();
    write_csv(path, config, "n,median_dev,p90_dev", &body)
}
