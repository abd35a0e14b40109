//! The three-file city format.
//!
//! * speed CSV: header `timestamp,<node id>,...`; one row per time step,
//!   ISO-8601 timestamp then one decimal speed per node.
//! * adjacency CSV: rows `src,dst,weight` with 0-based node indices; an
//!   optional `src,dst,weight` header line.
//! * metadata JSON: `{"city_id", "interval_minutes", "n_nodes"}`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::{SpeedSeries, TrafficGraph};
use crate::diffcore::DenseArray;
use crate::error::{Error, Result};

pub const SPEED_FILE: &str = "speed.csv";
pub const ADJACENCY_FILE: &str = "adjacency.csv";
pub const META_FILE: &str = "meta.json";

const TIME_FORMATS: [&str; 2] = ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CityMeta {
    pub city_id: String,
    pub interval_minutes: u32,
    pub n_nodes: usize,
}

fn load_err(file: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Load {
        file: file.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_time(s: &str) -> Option<NaiveDateTime> {
    TIME_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s.trim(), f).ok())
}

pub fn read_meta(path: &Path) -> Result<CityMeta> {
    let text = std::fs::read_to_string(path).map_err(|e| load_err(path, 0, e.to_string()))?;
    let meta: CityMeta = serde_json::from_str(&text)
        .map_err(|e| load_err(path, e.line(), e.to_string()))?;
    if meta.n_nodes == 0 || meta.interval_minutes == 0 {
        return Err(load_err(path, 1, "n_nodes and interval_minutes must be positive"));
    }
    Ok(meta)
}

fn read_adjacency(path: &Path, n_nodes: usize) -> Result<Vec<(usize, usize, f64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| load_err(path, 0, e.to_string()))?;
    let mut edges = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let line = k + 1;
        let rec = rec.map_err(|e| load_err(path, line, e.to_string()))?;
        if k == 0 && rec.get(0) == Some("src") {
            continue;
        }
        if rec.len() != 3 {
            return Err(load_err(path, line, format!("expected 3 fields, got {}", rec.len())));
        }
        let idx = |i: usize| -> Result<usize> {
            let v: usize = rec[i]
                .parse()
                .map_err(|_| load_err(path, line, format!("bad node index `{}`", &rec[i])))?;
            if v >= n_nodes {
                return Err(load_err(path, line, format!("node index {v} outside [0, {n_nodes})")));
            }
            Ok(v)
        };
        let (s, d) = (idx(0)?, idx(1)?);
        let w: f64 = rec[2]
            .parse()
            .map_err(|_| load_err(path, line, format!("bad weight `{}`", &rec[2])))?;
        if !(w >= 0.0) || !w.is_finite() {
            return Err(load_err(path, line, format!("negative or non-finite weight {w}")));
        }
        edges.push((s, d, w));
    }
    Ok(edges)
}

fn read_speeds(path: &Path, meta: &CityMeta) -> Result<SpeedSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| load_err(path, 0, e.to_string()))?;
    let mut records = reader.records();
    let header = records
        .next()
        .ok_or_else(|| load_err(path, 1, "empty file"))?
        .map_err(|e| load_err(path, 1, e.to_string()))?;
    if header.len() != meta.n_nodes + 1 {
        return Err(load_err(
            path,
            1,
            format!("{} node columns, metadata says {}", header.len().saturating_sub(1), meta.n_nodes),
        ));
    }
    let node_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let step = chrono::Duration::minutes(meta.interval_minutes as i64);
    let mut values = Vec::new();
    let mut start = None;
    let mut prev: Option<NaiveDateTime> = None;
    for (k, rec) in records.enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| load_err(path, line, e.to_string()))?;
        if rec.len() != meta.n_nodes + 1 {
            return Err(load_err(
                path,
                line,
                format!("{} fields, expected {}", rec.len(), meta.n_nodes + 1),
            ));
        }
        let ts = parse_time(&rec[0])
            .ok_or_else(|| load_err(path, line, format!("bad timestamp `{}`", &rec[0])))?;
        if let Some(p) = prev {
            if ts <= p {
                return Err(load_err(path, line, "timestamps are not increasing"));
            }
            if ts - p != step {
                return Err(load_err(
                    path,
                    line,
                    format!("timestamps {} minutes apart, expected {}", (ts - p).num_minutes(), meta.interval_minutes),
                ));
            }
        }
        start.get_or_insert(ts);
        prev = Some(ts);
        for field in rec.iter().skip(1) {
            let v: f64 = if field.is_empty() {
                0.0
            } else {
                field
                    .parse()
                    .map_err(|_| load_err(path, line, format!("bad speed `{field}`")))?
            };
            values.push(v);
        }
    }
    let t = values.len() / meta.n_nodes;
    let start = start.ok_or_else(|| load_err(path, 2, "no data rows"))?;
    SpeedSeries::new(
        meta.city_id.clone(),
        node_ids,
        DenseArray::matrix(t, meta.n_nodes, values)?,
        start,
        meta.interval_minutes,
    )
}

/// Loads a city from its three files. The graph is symmetrized and given
/// self-loops.
pub fn load_city(speed_file: &Path, adjacency_file: &Path, meta_file: &Path) -> Result<(TrafficGraph, SpeedSeries)> {
    let meta = read_meta(meta_file)?;
    let edges = read_adjacency(adjacency_file, meta.n_nodes)?;
    let graph = TrafficGraph::new(meta.city_id.clone(), meta.n_nodes, edges, meta.interval_minutes)
        .map_err(|e| load_err(adjacency_file, 0, e.to_string()))?;
    let series = read_speeds(speed_file, &meta)?;
    Ok((graph, series))
}

pub fn city_files(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join(SPEED_FILE), dir.join(ADJACENCY_FILE), dir.join(META_FILE))
}

/// [`load_city`] on `dir/{speed.csv, adjacency.csv, meta.json}`.
pub fn load_city_dir(dir: &Path) -> Result<(TrafficGraph, SpeedSeries)> {
    let (s, a, m) = city_files(dir);
    for p in [&s, &a, &m] {
        if !p.exists() {
            return Err(load_err(p, 0, "file not found"));
        }
    }
    load_city(&s, &a, &m)
}

/// Writes the three files into `dir`. Output depends only on the inputs.
pub fn write_city(dir: &Path, graph: &TrafficGraph, series: &SpeedSeries) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (s, a, m) = city_files(dir);

    let meta = CityMeta {
        city_id: graph.city_id.clone(),
        interval_minutes: graph.interval_minutes,
        n_nodes: graph.n_nodes(),
    };
    std::fs::write(&m, serde_json::to_string_pretty(&meta)? + "\n")?;

    let mut out = BufWriter::new(File::create(&a)?);
    writeln!(out, "src,dst,weight")?;
    for &(src, dst, w) in graph.edges() {
        writeln!(out, "{src},{dst},{w}")?;
    }
    out.flush()?;

    let mut out = BufWriter::new(File::create(&s)?);
    write!(out, "timestamp")?;
    for id in &series.node_ids {
        write!(out, ",{id}")?;
    }
    writeln!(out)?;
    for t in 0..series.len() {
        write!(out, "{}", series.timestamp(t).format(TIME_FORMATS[0]))?;
        for v in series.values().row(t) {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}
