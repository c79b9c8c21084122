//! On-disk dataset format.
//!
//! ```text
//! <dir>/graph.json        node types, relations, metapaths, target type
//! <dir>/edges/<rel>.tsv   src<TAB>dst, zero-based ids
//! <dir>/features.tsv      one row per target node
//! <dir>/labels.tsv        id<TAB>label (optional)
//! ```
//!
//! Blank lines and lines starting with `#` are ignored in every TSV file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{HeteroGraph, MetapathSpec, NodeType, RelationMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationDecl {
    pub name: String,
    pub src: String,
    pub dst: String,
}

/// Contents of `graph.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub node_types: Vec<NodeType>,
    pub relations: Vec<RelationDecl>,
    pub metapaths: Vec<MetapathSpec>,
    pub target_type: String,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub graph: HeteroGraph,
    pub metapaths: Vec<MetapathSpec>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Non-comment lines with their 1-based line numbers, split on tabs.
fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim_end_matches('\r');
        if l.trim().is_empty() || l.starts_with('#') {
            None
        } else {
            Some((i + 1, l.split('\t').map(str::trim).collect()))
        }
    })
}

fn parse_id(path: &Path, line: usize, field: &str, what: &str, bound: usize) -> Result<usize> {
    let id: usize = field
        .parse()
        .map_err(|_| parse_err(path, line, format!("{what} {field:?} is not a nonnegative integer")))?;
    if id >= bound {
        return Err(parse_err(path, line, format!("{what} {id} out of range (count {bound})")));
    }
    Ok(id)
}

fn load_edges(path: &Path, src_count: usize, dst_count: usize) -> Result<Vec<(usize, usize)>> {
    let text = read(path)?;
    records(&text)
        .map(|(line, f)| {
            if f.len() != 2 {
                return Err(parse_err(path, line, format!("expected 2 fields, found {}", f.len())));
            }
            Ok((
                parse_id(path, line, f[0], "source id", src_count)?,
                parse_id(path, line, f[1], "destination id", dst_count)?,
            ))
        })
        .collect()
}

fn load_features(path: &Path, rows: usize) -> Result<Array2<f64>> {
    read_matrix(path, Some(rows))
}

/// Reads a dense tab-separated matrix, as written by [`write_matrix`].
/// With `rows` set, a different row count is an error.
pub fn read_matrix(path: &Path, rows: Option<usize>) -> Result<Array2<f64>> {
    let text = read(path)?;
    let mut data = Vec::new();
    let mut width = None;
    let mut count = 0;
    for (line, f) in records(&text) {
        if *width.get_or_insert(f.len()) != f.len() {
            return Err(parse_err(
                path,
                line,
                format!("row has {} columns, expected {}", f.len(), width.unwrap_or(0)),
            ));
        }
        for v in f {
            data.push(v.parse::<f64>().map_err(|_| parse_err(path, line, format!("bad number {v:?}")))?);
        }
        count += 1;
    }
    if let Some(rows) = rows.filter(|&r| r != count) {
        return Err(parse_err(path, text.lines().count(), format!("{count} rows for {rows} target nodes")));
    }
    Array2::from_shape_vec((count, width.unwrap_or(0)), data).map_err(|e| Error::shape("read_matrix", e.to_string()))
}

fn load_labels(path: &Path, rows: usize) -> Result<Vec<usize>> {
    let text = read(path)?;
    let mut labels = vec![None; rows];
    for (line, f) in records(&text) {
        if f.len() != 2 {
            return Err(parse_err(path, line, format!("expected 2 fields, found {}", f.len())));
        }
        let id = parse_id(path, line, f[0], "node id", rows)?;
        let label = f[1].parse().map_err(|_| parse_err(path, line, format!("bad label {:?}", f[1])))?;
        if labels[id].replace(label).is_some() {
            return Err(parse_err(path, line, format!("node {id} labeled twice")));
        }
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| parse_err(path, text.lines().count(), format!("node {i} has no label"))))
        .collect()
}

/// Reads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("graph.json");
    let manifest: Manifest = serde_json::from_str(&read(&manifest_path)?).map_err(|e| Error::Parse {
        path: manifest_path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let count = |t: &str| {
        manifest
            .node_types
            .iter()
            .find(|n| n.name == t)
            .map(|n| n.count)
            .ok_or_else(|| Error::config(format!("{}: unknown node type {t}", manifest_path.display())))
    };
    let mut relations = Vec::with_capacity(manifest.relations.len());
    for decl in &manifest.relations {
        let (ns, nd) = (count(&decl.src)?, count(&decl.dst)?);
        let edges = load_edges(&dir.join("edges").join(format!("{}.tsv", decl.name)), ns, nd)?;
        relations.push(RelationMatrix::from_edges(&decl.name, &decl.src, &decl.dst, (ns, nd), &edges)?);
    }
    let n = count(&manifest.target_type)?;
    let features = load_features(&dir.join("features.tsv"), n)?;
    let labels_path = dir.join("labels.tsv");
    let labels = if labels_path.exists() {
        Some(load_labels(&labels_path, n)?)
    } else {
        None
    };
    let graph = HeteroGraph::new(manifest.node_types, relations, &manifest.target_type, features, labels)?;
    for spec in &manifest.metapaths {
        spec.validate(&graph)?;
    }
    Ok(Dataset {
        graph,
        metapaths: manifest.metapaths,
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Tab-separated rendering of a dense matrix.
pub fn matrix_tsv(m: &Array2<f64>) -> String {
    let mut out = String::with_capacity(m.len() * 12);
    for row in m.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.push('\t');
            }
            first = false;
            write!(out, "{v}").expect("write to string");
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    write(path, &matrix_tsv(m))
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `graph` in the format read by [`load_dataset`].
pub fn write_dataset(graph: &HeteroGraph, metapaths: &[MetapathSpec], dir: &Path) -> Result<PathBuf> {
    let edges_dir = dir.join("edges");
    create_dir(&edges_dir)?;
    let manifest = Manifest {
        node_types: graph.node_types().to_vec(),
        relations: graph
            .relations()
            .iter()
            .map(|r| RelationDecl {
                name: r.name.clone(),
                src: r.src_type.clone(),
                dst: r.dst_type.clone(),
            })
            .collect(),
        metapaths: metapaths.to_vec(),
        target_type: graph.target_type().to_string(),
    };
    write(&dir.join("graph.json"), &serde_json::to_string_pretty(&manifest)?)?;
    for rel in graph.relations() {
        let mut text = String::new();
        for (i, j, v) in rel.edges() {
            for _ in 0..v {
                writeln!(text, "{i}\t{j}").expect("write to string");
            }
        }
        write(&edges_dir.join(format!("{}.tsv", rel.name)), &text)?;
    }
    write_matrix(&dir.join("features.tsv"), graph.features())?;
    if let Some(labels) = graph.labels() {
        let text: String = labels.iter().enumerate().map(|(i, l)| format!("{i}\t{l}\n")).collect();
        write(&dir.join("labels.tsv"), &text)?;
    }
    Ok(dir.to_path_buf())
}
