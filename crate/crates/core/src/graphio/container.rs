//! Directory container: `graph.json` plus CSV payloads.
//!
//! ```text
//! graph.json    header (format, version, n, d, num_classes, symmetric, files)
//! edges.csv     two integer columns, no header
//! features.csv  N rows × d reals
//! labels.csv    N integers, or N × C binary in multilabel mode
//! env.csv       optional, N integers
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GraphDataset, Labels, SparseAdjacency};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const GRAPH_FORMAT: &str = "vecformer-graph";
pub const GRAPH_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Classes,
    Multilabel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileFields {
    pub edges: String,
    pub features: String,
    pub labels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphHeader {
    pub format: String,
    pub version: u32,
    pub n: usize,
    pub d: usize,
    pub num_classes: usize,
    /// When set, every edge record is mirrored on load.
    pub symmetric: bool,
    pub label_mode: LabelMode,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub environments: Vec<String>,
    pub files: FileFields,
}

fn fmt_err(file: &str, line: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        file: file.to_string(),
        line,
        msg: msg.into(),
    }
}

fn read_rows(path: &Path) -> Result<Vec<(u64, Vec<String>)>> {
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("?").to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => fmt_err(&name, 0, format!("{other:?}")),
        })?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            fmt_err(&name, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        rows.push((line, record.iter().map(|s| s.trim().to_string()).collect()));
    }
    Ok(rows)
}

fn parse<T: std::str::FromStr>(file: &str, line: u64, field: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| fmt_err(file, line, format!("cannot parse {field:?}")))
}

/// Loads and validates a graph container directory.
pub fn load_graph(dir: impl AsRef<Path>) -> Result<GraphDataset> {
    let dir = dir.as_ref();
    let header_path = dir.join("graph.json");
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: GraphHeader = serde_json::from_str(&text)
        .map_err(|e| fmt_err("graph.json", e.line() as u64, e.to_string()))?;
    if header.format != GRAPH_FORMAT || header.version != GRAPH_VERSION {
        return Err(fmt_err(
            "graph.json",
            1,
            format!(
                "unsupported container {} v{} (expected {GRAPH_FORMAT} v{GRAPH_VERSION})",
                header.format, header.version
            ),
        ));
    }
    let n = header.n;

    let edges_file = &header.files.edges;
    let mut edges = Vec::new();
    for (line, row) in read_rows(&dir.join(edges_file))? {
        if row.len() != 2 {
            return Err(fmt_err(edges_file, line, format!("expected 2 columns, got {}", row.len())));
        }
        let i: usize = parse(edges_file, line, &row[0])?;
        let j: usize = parse(edges_file, line, &row[1])?;
        if i >= n || j >= n {
            return Err(Error::Structural(format!(
                "{edges_file}:{line}: edge ({i}, {j}) out of range for n={n}"
            )));
        }
        edges.push((i, j));
    }
    let adjacency = if header.symmetric {
        SparseAdjacency::from_edges_symmetrized(n, edges)?
    } else {
        SparseAdjacency::from_edges(n, edges, false)?
    };

    let feat_file = &header.files.features;
    let feat_rows = read_rows(&dir.join(feat_file))?;
    if feat_rows.len() != n {
        return Err(fmt_err(
            feat_file,
            feat_rows.last().map_or(0, |r| r.0),
            format!("{} feature rows for n={n}", feat_rows.len()),
        ));
    }
    let mut feats = Vec::with_capacity(n * header.d);
    for (line, row) in &feat_rows {
        if row.len() != header.d {
            return Err(fmt_err(feat_file, *line, format!("expected {} columns, got {}", header.d, row.len())));
        }
        for field in row {
            let v: f64 = parse(feat_file, *line, field)?;
            if !v.is_finite() {
                return Err(fmt_err(feat_file, *line, "non-finite feature"));
            }
            feats.push(v);
        }
    }
    let features = Tensor::new(vec![n, header.d], feats)?;

    let label_file = &header.files.labels;
    let label_rows = read_rows(&dir.join(label_file))?;
    if label_rows.len() != n {
        return Err(fmt_err(label_file, 0, format!("{} label rows for n={n}", label_rows.len())));
    }
    let labels = match header.label_mode {
        LabelMode::Classes => {
            let mut out = Vec::with_capacity(n);
            for (line, row) in &label_rows {
                if row.len() != 1 {
                    return Err(fmt_err(label_file, *line, "expected one label per row"));
                }
                out.push(parse(label_file, *line, &row[0])?);
            }
            Labels::Classes(out)
        }
        LabelMode::Multilabel => {
            let c = header.num_classes;
            let mut out = Vec::with_capacity(n * c);
            for (line, row) in &label_rows {
                if row.len() != c {
                    return Err(fmt_err(label_file, *line, format!("expected {c} label columns")));
                }
                for field in row {
                    let v: u8 = parse(label_file, *line, field)?;
                    out.push(f64::from(v));
                }
            }
            Labels::Multilabel(Tensor::new(vec![n, c], out)?)
        }
    };

    let environment = match &header.files.env {
        Some(env_file) => {
            let rows = read_rows(&dir.join(env_file))?;
            if rows.len() != n {
                return Err(fmt_err(env_file, 0, format!("{} env rows for n={n}", rows.len())));
            }
            let mut out = Vec::with_capacity(n);
            for (line, row) in &rows {
                out.push(parse(env_file, *line, &row[0])?);
            }
            Some(out)
        }
        None => None,
    };

    let ds = GraphDataset {
        adjacency,
        features,
        labels,
        num_classes: header.num_classes,
        environment,
        environments: header.environments,
    };
    ds.validate()?;
    Ok(ds)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `dataset` as a container directory, creating it if needed.
///
/// Every stored directed pair is written, so a symmetric graph round-trips
/// exactly whether or not the loader mirrors records.
pub fn save_graph(dataset: &GraphDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = GraphHeader {
        format: GRAPH_FORMAT.into(),
        version: GRAPH_VERSION,
        n: dataset.n(),
        d: dataset.feat_dim(),
        num_classes: dataset.num_classes,
        symmetric: dataset.adjacency.is_symmetric(),
        label_mode: match dataset.labels {
            Labels::Classes(_) => LabelMode::Classes,
            Labels::Multilabel(_) => LabelMode::Multilabel,
        },
        environments: dataset.environments.clone(),
        files: FileFields {
            edges: "edges.csv".into(),
            features: "features.csv".into(),
            labels: "labels.csv".into(),
            env: dataset.environment.as_ref().map(|_| "env.csv".into()),
        },
    };
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    write_file(&dir.join("graph.json"), &(json + "\n"))?;

    let mut edges = String::new();
    for (i, j) in dataset.adjacency.edges() {
        edges.push_str(&format!("{i},{j}\n"));
    }
    write_file(&dir.join("edges.csv"), &edges)?;
    write_file(&dir.join("features.csv"), &matrix_csv(&dataset.features))?;

    let labels = match &dataset.labels {
        Labels::Classes(c) => c.iter().map(|y| format!("{y}\n")).collect::<String>(),
        Labels::Multilabel(t) => matrix_csv(&t.map(|v| v.round())),
    };
    write_file(&dir.join("labels.csv"), &labels)?;
    if let Some(env) = &dataset.environment {
        let text: String = env.iter().map(|e| format!("{e}\n")).collect();
        write_file(&dir.join("env.csv"), &text)?;
    }
    Ok(())
}

/// Rows as comma-separated shortest round-trip decimals, LF-terminated.
pub fn matrix_csv(t: &Tensor) -> String {
    let mut out = String::new();
    for i in 0..t.rows() {
        let row: Vec<String> = t.row(i).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
