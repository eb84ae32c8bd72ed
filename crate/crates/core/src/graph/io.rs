//! Dataset directories: `edges.csv`, `features.csv`, `labels.csv`, `splits.json`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use super::{ClassSplit, Graph, GraphError};
use crate::adcore::Tensor;

fn read(dir: &Path, name: &str) -> Result<String, GraphError> {
    let path = dir.join(name);
    fs::read_to_string(&path).map_err(|source| GraphError::Io { path, source })
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), GraphError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| GraphError::Io { path, source })
}

fn parse_err(file: &str, line: usize, msg: impl Into<String>) -> GraphError {
    GraphError::Parse { file: file.to_string(), line, msg: msg.into() }
}

/// Non-blank lines with 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty())
}

pub fn load_graph(dir: impl AsRef<Path>) -> Result<Graph, GraphError> {
    let dir = dir.as_ref();

    let split: ClassSplit = serde_json::from_str(&read(dir, "splits.json")?)
        .map_err(|e| parse_err("splits.json", e.line(), e.to_string()))?;

    let mut labels = Vec::new();
    for (line, text) in lines(&read(dir, "labels.csv")?) {
        let y: usize = text.parse().map_err(|_| parse_err("labels.csv", line, format!("bad class id {text:?}")))?;
        if split.split_of(y).is_none() {
            return Err(GraphError::ClassNotInSplit { class: y });
        }
        labels.push(y);
    }
    let n = labels.len();

    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (line, text) in lines(&read(dir, "features.csv")?) {
        let row = text
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| parse_err("features.csv", line, e.to_string()))?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(parse_err("features.csv", line, format!("expected {w} columns, found {}", row.len())));
            }
            _ => {}
        }
        values.extend(row);
        rows += 1;
    }
    if rows != n {
        return Err(GraphError::Invalid(format!(
            "inconsistent node counts: labels.csv has {n} rows, features.csv has {rows}"
        )));
    }
    let features = Tensor::new(vec![n, width.unwrap_or(0)], values).map_err(|e| GraphError::Invalid(e.to_string()))?;

    let mut edges = Vec::new();
    let mut seen = HashSet::new();
    for (line, text) in lines(&read(dir, "edges.csv")?) {
        let (a, b) = text.split_once(',').ok_or_else(|| parse_err("edges.csv", line, "expected \"u,v\""))?;
        let parse = |s: &str| {
            s.trim().parse::<usize>().map_err(|_| parse_err("edges.csv", line, format!("bad node id {s:?}")))
        };
        let (u, v) = (parse(a)?, parse(b)?);
        if u == v {
            return Err(GraphError::SelfLoop { file: "edges.csv".into(), line });
        }
        if u > v {
            return Err(parse_err("edges.csv", line, "u < v required"));
        }
        if v >= n {
            return Err(parse_err("edges.csv", line, format!("node {v} out of range for {n} nodes")));
        }
        if !seen.insert((u, v)) {
            return Err(GraphError::DuplicateEdge { file: "edges.csv".into(), line });
        }
        edges.push((u, v));
    }

    Graph::new(n, edges, features, labels, split)
}

/// Writes the four dataset files. Features use 17 significant digits, so
/// loading reproduces every value exactly.
pub fn save_graph(g: &Graph, dir: impl AsRef<Path>) -> Result<(), GraphError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| GraphError::Io { path: dir.to_path_buf(), source })?;

    let mut edges = String::new();
    for (u, v) in g.edges() {
        edges.push_str(&format!("{u},{v}\n"));
    }
    write(dir, "edges.csv", &edges)?;

    let mut features = String::new();
    for r in 0..g.num_nodes() {
        let row: Vec<String> = g.features().row(r).iter().map(|v| format!("{v:.16e}")).collect();
        features.push_str(&row.join(","));
        features.push('\n');
    }
    write(dir, "features.csv", &features)?;

    let mut labels = String::new();
    for y in g.labels() {
        labels.push_str(&format!("{y}\n"));
    }
    write(dir, "labels.csv", &labels)?;

    let splits = serde_json::to_string_pretty(g.class_split()).map_err(|e| GraphError::Invalid(e.to_string()))?;
    write(dir, "splits.json", &(splits + "\n"))
}
