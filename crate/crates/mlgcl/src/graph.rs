//! Attributed graphs and the on-disk dataset layout.
//!
//! A dataset directory contains:
//!
//! * `edges.tsv`: one undirected edge per line as `src<TAB>dst`, optionally
//!   followed by a weight column. Blank lines and lines starting with `#`
//!   are skipped. Edges are symmetrized on load; duplicates keep the
//!   largest weight.
//! * `features.csv` (comma-separated rows of reals) or `features.bin`
//!   (magic `MLGC`, little-endian `u32` row and column counts, then
//!   row-major `f32` values, upcast to `f64` in memory). When both files
//!   exist the binary one wins.
//! * `labels.tsv` (optional): `node<TAB>label` covering every node exactly
//!   once, labels contiguous from zero.
//! * `splits.json` (optional): `{"train": [...], "val": [...], "test": [...]}`
//!   with pairwise-disjoint in-range node indices.

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;
use crate::tensor::Dense;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Node indices of the train/val/test partition used by the probe.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// An undirected attributed graph with optional labels and splits.
#[derive(Clone, Debug)]
pub struct Graph {
    pub num_nodes: usize,
    /// Symmetric adjacency without self loops (as loaded).
    pub adjacency: SparseMatrix,
    /// Node features, one row per node.
    pub features: Dense,
    pub labels: Option<Vec<usize>>,
    pub splits: Option<Split>,
}

impl Graph {
    /// Validates cross-field consistency and builds the graph.
    pub fn new(
        adjacency: SparseMatrix,
        features: Dense,
        labels: Option<Vec<usize>>,
        splits: Option<Split>,
    ) -> Result<Self> {
        let n = features.nrows();
        if adjacency.rows() != n || adjacency.cols() != n {
            return Err(Error::Sparse(format!(
                "adjacency is {}x{} but features have {n} rows",
                adjacency.rows(),
                adjacency.cols()
            )));
        }
        if !adjacency.is_symmetric() {
            return Err(Error::Sparse("adjacency must be symmetric".into()));
        }
        if let Some(l) = &labels {
            validate_labels(l, n)?;
        }
        if let Some(s) = &splits {
            validate_splits(s, n)?;
        }
        Ok(Graph { num_nodes: n, adjacency, features, labels, splits })
    }

    /// Number of classes when labels are present (labels are contiguous, so
    /// this is max label + 1).
    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }
}

fn validate_labels(labels: &[usize], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::dataset(
            "labels",
            format!("{} labels for {n} nodes", labels.len()),
        ));
    }
    let max = labels.iter().copied().max().unwrap_or(0);
    let mut seen = vec![false; max + 1];
    for &l in labels {
        seen[l] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::dataset(
            "labels",
            format!("classes must be contiguous from 0; class {missing} is unused"),
        ));
    }
    Ok(())
}

fn validate_splits(s: &Split, n: usize) -> Result<()> {
    let mut owner: Vec<Option<&str>> = vec![None; n];
    for (name, part) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
        for &idx in part {
            if idx >= n {
                return Err(Error::dataset(
                    "splits.json",
                    format!("{name} index {idx} out of range for {n} nodes"),
                ));
            }
            if let Some(prev) = owner[idx] {
                return Err(Error::dataset(
                    "splits.json",
                    format!("node {idx} appears in both {prev} and {name}"),
                ));
            }
            owner[idx] = Some(name);
        }
    }
    Ok(())
}

/// Loads a dataset directory. Features are required, adjacency is required,
/// labels and splits are picked up when their files exist.
pub fn load_dataset(dir: &Path) -> Result<Graph> {
    let features = load_features(dir)?;
    let n = features.nrows();
    let adjacency = load_edges(&dir.join("edges.tsv"), n)?;
    let labels_path = dir.join("labels.tsv");
    let labels = if labels_path.exists() {
        Some(load_labels(&labels_path, n)?)
    } else {
        None
    };
    let splits_path = dir.join("splits.json");
    let splits = if splits_path.exists() {
        Some(load_splits(&splits_path)?)
    } else {
        None
    };
    Graph::new(adjacency, features, labels, splits)
}

fn load_features(dir: &Path) -> Result<Dense> {
    let bin = dir.join("features.bin");
    if bin.exists() {
        return read_features_bin(&bin);
    }
    let csv = dir.join("features.csv");
    if csv.exists() {
        return read_features_csv(&csv);
    }
    Err(Error::dataset(
        dir.display().to_string(),
        "neither features.bin nor features.csv found",
    ))
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn read_features_csv(path: &Path) -> Result<Dense> {
    let text = read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .enumerate()
            .map(|(col, cell)| {
                cell.trim().parse::<f64>().map_err(|_| {
                    Error::dataset(
                        path.display().to_string(),
                        format!("line {}, column {}: cannot parse '{}'", lineno + 1, col + 1, cell),
                    )
                })
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::dataset(
                    path.display().to_string(),
                    format!(
                        "line {}: {} columns but earlier rows have {}",
                        lineno + 1,
                        row.len(),
                        first.len()
                    ),
                ));
            }
        }
        if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::dataset(
                path.display().to_string(),
                format!("line {}: non-finite value {bad}", lineno + 1),
            ));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::dataset(path.display().to_string(), "no feature rows"));
    }
    let (n, d) = (rows.len(), rows[0].len());
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Dense::from_shape_vec((n, d), flat).expect("length checked"))
}

const FEATURES_MAGIC: &[u8; 4] = b"MLGC";

fn read_features_bin(path: &Path) -> Result<Dense> {
    let io_err = |e: std::io::Error| Error::Io { path: path.display().to_string(), source: e };
    let data_err = |reason: String| Error::dataset(path.display().to_string(), reason);
    let bytes = std::fs::read(path).map_err(io_err)?;
    if bytes.len() < 12 {
        return Err(data_err(format!("file is {} bytes, header needs 12", bytes.len())));
    }
    if &bytes[0..4] != FEATURES_MAGIC {
        return Err(data_err(format!("bad magic {:?}, expected {FEATURES_MAGIC:?}", &bytes[0..4])));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + rows * cols * 4;
    if bytes.len() != expected {
        return Err(data_err(format!(
            "expected {expected} bytes for {rows}x{cols} f32 payload, found {}",
            bytes.len()
        )));
    }
    let mut flat = Vec::with_capacity(rows * cols);
    for chunk in bytes[12..].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(data_err(format!("non-finite value {v} in payload")));
        }
        flat.push(v as f64);
    }
    if rows == 0 || cols == 0 {
        return Err(data_err(format!("empty shape {rows}x{cols}")));
    }
    Ok(Dense::from_shape_vec((rows, cols), flat).expect("length checked"))
}

/// Writes features in the binary format (values truncated to `f32`).
pub fn write_features_bin(path: &Path, features: &Dense) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Io { path: path.display().to_string(), source: e };
    let (rows, cols) = features.dim();
    let mut out = Vec::with_capacity(12 + rows * cols * 4);
    out.extend_from_slice(FEATURES_MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in features.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(&out).map_err(io_err)
}

fn load_edges(path: &Path, n: usize) -> Result<SparseMatrix> {
    let text = read_to_string(path)?;
    let mut entries = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 && fields.len() != 3 {
            return Err(Error::dataset(
                path.display().to_string(),
                format!("line {}: expected 'src<TAB>dst' with optional weight, got '{raw}'", lineno + 1),
            ));
        }
        let parse_node = |s: &str| {
            s.parse::<usize>().map_err(|_| {
                Error::dataset(
                    path.display().to_string(),
                    format!("line {}: '{s}' is not a node index", lineno + 1),
                )
            })
        };
        let src = parse_node(fields[0])?;
        let dst = parse_node(fields[1])?;
        if src >= n || dst >= n {
            return Err(Error::dataset(
                path.display().to_string(),
                format!("line {}: edge ({src}, {dst}) out of range for {n} nodes", lineno + 1),
            ));
        }
        let w = if fields.len() == 3 {
            let w: f64 = fields[2].parse().map_err(|_| {
                Error::dataset(
                    path.display().to_string(),
                    format!("line {}: '{}' is not a weight", lineno + 1, fields[2]),
                )
            })?;
            if !w.is_finite() || w < 0.0 {
                return Err(Error::dataset(
                    path.display().to_string(),
                    format!("line {}: weight must be finite and non-negative, got {w}", lineno + 1),
                ));
            }
            w
        } else {
            1.0
        };
        entries.push((src, dst, w));
        if src != dst {
            entries.push((dst, src, w));
        }
    }
    SparseMatrix::from_entries_collapse_max(n, n, entries)
}

fn load_labels(path: &Path, n: usize) -> Result<Vec<usize>> {
    let text = read_to_string(path)?;
    let mut labels = vec![usize::MAX; n];
    let mut assigned = vec![false; n];
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::dataset(
                path.display().to_string(),
                format!("line {}: expected 'node<TAB>label', got '{raw}'", lineno + 1),
            ));
        }
        let parse = |s: &str, what: &str| {
            s.parse::<usize>().map_err(|_| {
                Error::dataset(
                    path.display().to_string(),
                    format!("line {}: '{s}' is not a {what}", lineno + 1),
                )
            })
        };
        let node = parse(fields[0], "node index")?;
        let label = parse(fields[1], "label")?;
        if node >= n {
            return Err(Error::dataset(
                path.display().to_string(),
                format!("line {}: node {node} out of range for {n} nodes", lineno + 1),
            ));
        }
        if assigned[node] {
            return Err(Error::dataset(
                path.display().to_string(),
                format!("line {}: node {node} labeled twice", lineno + 1),
            ));
        }
        assigned[node] = true;
        labels[node] = label;
    }
    if let Some(missing) = assigned.iter().position(|a| !a) {
        return Err(Error::dataset(
            path.display().to_string(),
            format!("node {missing} has no label"),
        ));
    }
    validate_labels(&labels, n)?;
    Ok(labels)
}

fn load_splits(path: &Path) -> Result<Split> {
    let mut text = String::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    serde_json::from_str(&text).map_err(|e| {
        Error::dataset(path.display().to_string(), format!("invalid splits JSON: {e}"))
    })
}

/// Relabels nodes so that row `i` of the result corresponds to node
/// `perm[i]` of the input (gather semantics, matching row permutation of
/// the feature matrix). Adjacency, labels, and splits move consistently.
pub fn permute_graph(g: &Graph, perm: &[usize]) -> Result<Graph> {
    let n = g.num_nodes;
    if perm.len() != n {
        return Err(Error::arg(
            "permute_graph",
            format!("permutation length {} for {n} nodes", perm.len()),
        ));
    }
    let inv = inverse_permutation(perm)
        .ok_or_else(|| Error::arg("permute_graph", "not a permutation"))?;
    let entries = g
        .adjacency
        .entries()
        .map(|(r, c, v)| (inv[r], inv[c], v))
        .collect();
    let adjacency = SparseMatrix::from_entries(n, n, entries)?;
    let mut features = Dense::zeros(g.features.dim());
    for (i, &p) in perm.iter().enumerate() {
        features.row_mut(i).assign(&g.features.row(p));
    }
    let labels = g
        .labels
        .as_ref()
        .map(|l| perm.iter().map(|&p| l[p]).collect());
    let splits = g.splits.as_ref().map(|s| Split {
        train: s.train.iter().map(|&i| inv[i]).collect(),
        val: s.val.iter().map(|&i| inv[i]).collect(),
        test: s.test.iter().map(|&i| inv[i]).collect(),
    });
    Graph::new(adjacency, features, labels, splits)
}

/// Inverse of a permutation given in gather form, or `None` when `perm` is
/// not a permutation of `0..perm.len()`.
pub fn inverse_permutation(perm: &[usize]) -> Option<Vec<usize>> {
    let n = perm.len();
    let mut inv = vec![usize::MAX; n];
    for (i, &p) in perm.iter().enumerate() {
        if p >= n || inv[p] != usize::MAX {
            return None;
        }
        inv[p] = i;
    }
    Some(inv)
}

/// Writes a graph as a dataset directory (the inverse of [`load_dataset`]).
///
/// Features go to `features.bin` when `binary_features` is set, otherwise to
/// `features.csv` with full `f64` precision. Only the upper triangle of the
/// adjacency is written since loading symmetrizes.
pub fn write_dataset(g: &Graph, dir: &Path, binary_features: bool) -> Result<()> {
    let io_err = |p: &Path, e: std::io::Error| Error::Io { path: p.display().to_string(), source: e };
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let edges_path = dir.join("edges.tsv");
    let mut edges = String::new();
    for (i, j, v) in g.adjacency.entries() {
        if i <= j {
            if v == 1.0 {
                edges.push_str(&format!("{i}\t{j}\n"));
            } else {
                edges.push_str(&format!("{i}\t{j}\t{v}\n"));
            }
        }
    }
    std::fs::write(&edges_path, edges).map_err(|e| io_err(&edges_path, e))?;

    if binary_features {
        write_features_bin(&dir.join("features.bin"), &g.features)?;
    } else {
        let csv_path = dir.join("features.csv");
        let mut out = String::new();
        for row in g.features.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        std::fs::write(&csv_path, out).map_err(|e| io_err(&csv_path, e))?;
    }

    if let Some(labels) = &g.labels {
        let path = dir.join("labels.tsv");
        let mut out = String::new();
        for (i, l) in labels.iter().enumerate() {
            out.push_str(&format!("{i}\t{l}\n"));
        }
        std::fs::write(&path, out).map_err(|e| io_err(&path, e))?;
    }

    if let Some(splits) = &g.splits {
        let path = dir.join("splits.json");
        let json = serde_json::to_string_pretty(splits).expect("splits serialize");
        std::fs::write(&path, json).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}
