//! Reader and writer for the TUDataset text layout.
//!
//! ```text
//! <name>_A.txt                 "u, v" per line, 1-based global node ids
//! <name>_graph_indicator.txt   1-based graph id, one line per node
//! <name>_graph_labels.txt      one integer per graph
//! <name>_node_labels.txt       optional, one integer per node
//! <name>_node_attributes.txt   optional, comma-separated reals per node
//! ```
//!
//! Node features are the one-hot node labels followed by the node
//! attributes; a graph set with neither gets the constant feature 1.0.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{DomainDataset, DomainTag, GraphInstance};
use crate::error::{NegprError, Result};

struct TextFile {
    name: String,
    body: String,
}

impl TextFile {
    fn read(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| NegprError::io(path, e))?;
        Ok(TextFile {
            name: path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            body,
        })
    }

    /// Non-blank lines with their 1-based line numbers.
    fn lines(&self) -> impl Iterator<Item = (usize, &str)> {
        self.body
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty())
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> NegprError {
        NegprError::Parse {
            file: self.name.clone(),
            line,
            msg: msg.into(),
        }
    }

    fn int(&self, line: usize, tok: &str) -> Result<i64> {
        tok.trim()
            .parse()
            .map_err(|_| self.err(line, format!("expected integer, found {tok:?}")))
    }

    fn ints(&self) -> Result<Vec<(usize, i64)>> {
        self.lines().map(|(n, l)| Ok((n, self.int(n, l)?))).collect()
    }
}

fn file_path(root: &Path, name: &str, suffix: &str) -> PathBuf {
    root.join(format!("{name}_{suffix}.txt"))
}

fn required(root: &Path, name: &str, suffix: &str) -> Result<TextFile> {
    let path = file_path(root, name, suffix);
    if !path.is_file() {
        return Err(NegprError::MissingFile(path));
    }
    TextFile::read(&path)
}

fn optional(root: &Path, name: &str, suffix: &str) -> Result<Option<TextFile>> {
    let path = file_path(root, name, suffix);
    if path.is_file() {
        TextFile::read(&path).map(Some)
    } else {
        Ok(None)
    }
}

/// Load `<root>/<name>_*.txt` as a source-tagged dataset with 0-based
/// indices and graph labels remapped onto `0..C` in ascending raw order.
pub fn parse_tudataset(root: impl AsRef<Path>, name: &str) -> Result<DomainDataset> {
    let root = root.as_ref();
    let adjacency = required(root, name, "A")?;
    let indicator = required(root, name, "graph_indicator")?;
    let graph_labels = required(root, name, "graph_labels")?;
    let node_labels = optional(root, name, "node_labels")?;
    let node_attrs = optional(root, name, "node_attributes")?;

    // global node -> (graph, local index)
    let mut owner = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    for (line, id) in indicator.ints()? {
        if id < 1 {
            return Err(indicator.err(line, format!("graph id {id} is not 1-based")));
        }
        let g = (id - 1) as usize;
        if g >= sizes.len() {
            sizes.resize(g + 1, 0);
        }
        owner.push((g, sizes[g]));
        sizes[g] += 1;
    }
    let n_nodes = owner.len();

    let raw_labels = graph_labels.ints()?;
    if raw_labels.len() != sizes.len() {
        return Err(graph_labels.err(
            raw_labels.last().map_or(0, |l| l.0),
            format!(
                "{} graph labels for {} graphs in the indicator file",
                raw_labels.len(),
                sizes.len()
            ),
        ));
    }
    if let Some(g) = sizes.iter().position(|&s| s == 0) {
        return Err(NegprError::Data(format!("graph {} has no nodes", g + 1)));
    }

    let mut edges = vec![Vec::new(); sizes.len()];
    for (line, text) in adjacency.lines() {
        let mut toks = text.split(',');
        let (Some(a), Some(b), None) = (toks.next(), toks.next(), toks.next()) else {
            return Err(adjacency.err(line, format!("expected \"u, v\", found {text:?}")));
        };
        let (a, b) = (adjacency.int(line, a)?, adjacency.int(line, b)?);
        let lookup = |v: i64| -> Result<(usize, usize)> {
            if v < 1 || v as usize > n_nodes {
                return Err(adjacency.err(line, format!("node {v} outside 1..={n_nodes}")));
            }
            Ok(owner[(v - 1) as usize])
        };
        let (ga, la) = lookup(a)?;
        let (gb, lb) = lookup(b)?;
        if ga != gb {
            return Err(adjacency.err(
                line,
                format!("edge ({a}, {b}) joins graph {} and graph {}", ga + 1, gb + 1),
            ));
        }
        // self-loops carry no structure for either branch
        if la != lb {
            edges[ga].push((la, lb));
        }
    }

    let label_block = match &node_labels {
        Some(file) => {
            let vals = file.ints()?;
            if vals.len() != n_nodes {
                return Err(file.err(0, format!("{} node labels for {n_nodes} nodes", vals.len())));
            }
            let mut distinct: Vec<i64> = vals.iter().map(|v| v.1).collect();
            distinct.sort_unstable();
            distinct.dedup();
            let mut block = Array2::zeros((n_nodes, distinct.len()));
            for (i, (_, v)) in vals.iter().enumerate() {
                block[[i, distinct.binary_search(v).unwrap()]] = 1.0;
            }
            Some(block)
        }
        None => None,
    };
    let attr_block = match &node_attrs {
        Some(file) => {
            let rows = file
                .lines()
                .map(|(line, text)| {
                    text.split(',')
                        .map(|t| {
                            t.trim()
                                .parse::<f64>()
                                .ok()
                                .filter(|x| x.is_finite())
                                .ok_or_else(|| file.err(line, format!("expected real, found {t:?}")))
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            if rows.len() != n_nodes {
                return Err(file.err(0, format!("{} attribute rows for {n_nodes} nodes", rows.len())));
            }
            let width = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != width) {
                return Err(NegprError::Shape("ragged node attribute rows".into()));
            }
            Some(Array2::from_shape_vec((n_nodes, width), rows.concat()).expect("checked shape"))
        }
        None => None,
    };
    let features = match (label_block, attr_block) {
        (Some(l), Some(a)) => ndarray::concatenate![ndarray::Axis(1), l, a],
        (Some(l), None) => l,
        (None, Some(a)) => a,
        (None, None) => Array2::ones((n_nodes, 1)),
    };

    let mut class_values: Vec<i64> = raw_labels.iter().map(|l| l.1).collect();
    class_values.sort_unstable();
    class_values.dedup();

    let d = features.ncols();
    let mut per_graph: Vec<Vec<f64>> = sizes.iter().map(|&s| Vec::with_capacity(s * d)).collect();
    for (i, &(g, _)) in owner.iter().enumerate() {
        per_graph[g].extend(features.row(i).iter());
    }
    let graphs = per_graph
        .into_iter()
        .zip(edges)
        .zip(&raw_labels)
        .zip(&sizes)
        .map(|(((feats, e), &(_, raw)), &n)| {
            let x = Array2::from_shape_vec((n, d), feats).expect("row count matches size");
            let y = class_values.binary_search(&raw).expect("value from the same list");
            GraphInstance::new(x, e, Some(y))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut ds = DomainDataset::new(name, DomainTag::Source, class_values.len(), graphs)?;
    ds.set_class_values(class_values);
    Ok(ds)
}

fn one_hot_columns(x: &Array2<f64>) -> Option<Vec<usize>> {
    x.rows()
        .into_iter()
        .map(|row| {
            let mut hot = None;
            for (j, &v) in row.iter().enumerate() {
                match v {
                    0.0 => {}
                    1.0 if hot.is_none() => hot = Some(j),
                    _ => return None,
                }
            }
            hot
        })
        .collect()
}

/// Write `ds` under `<root>/<name>_*.txt`, creating `root` if needed.
///
/// Labels are written with their raw class values. Unlabeled graphs are
/// written with the first class value since the format has no "missing".
pub fn write_tudataset(ds: &DomainDataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root).map_err(|e| NegprError::io(root, e))?;
    let name = ds.name.as_str();

    let all_features: Vec<&Array2<f64>> = ds.graphs().iter().map(|g| g.node_features()).collect();
    let constant = ds.feature_dim() == 1 && all_features.iter().all(|x| x.iter().all(|&v| v == 1.0));
    let hot: Option<Vec<Vec<usize>>> = if constant {
        None
    } else {
        all_features.iter().map(|x| one_hot_columns(x)).collect()
    };
    // one-hot columns only round-trip if every column is used somewhere
    let hot = hot.filter(|rows| {
        let mut used = vec![false; ds.feature_dim()];
        rows.iter().flatten().for_each(|&j| used[j] = true);
        used.iter().all(|&u| u)
    });

    let open = |suffix: &str| -> Result<(PathBuf, BufWriter<fs::File>)> {
        let path = file_path(root, name, suffix);
        let f = fs::File::create(&path).map_err(|e| NegprError::io(&path, e))?;
        Ok((path, BufWriter::new(f)))
    };
    let (a_path, mut a) = open("A")?;
    let (i_path, mut ind) = open("graph_indicator")?;
    let (l_path, mut lab) = open("graph_labels")?;
    let mut nodes = if constant {
        None
    } else if hot.is_some() {
        Some(open("node_labels")?)
    } else {
        Some(open("node_attributes")?)
    };

    let mut offset = 0usize;
    for (gi, g) in ds.graphs().iter().enumerate() {
        let w = |p: &Path, e: std::io::Error| NegprError::io(p, e);
        for &(u, v) in g.edges() {
            writeln!(a, "{}, {}", offset + u + 1, offset + v + 1).map_err(|e| w(&a_path, e))?;
            writeln!(a, "{}, {}", offset + v + 1, offset + u + 1).map_err(|e| w(&a_path, e))?;
        }
        for i in 0..g.num_nodes() {
            writeln!(ind, "{}", gi + 1).map_err(|e| w(&i_path, e))?;
            if let Some((path, out)) = nodes.as_mut() {
                let line = match &hot {
                    Some(rows) => rows[gi][i].to_string(),
                    None => g
                        .node_features()
                        .row(i)
                        .iter()
                        .map(|v| v.to_string())
                        .collect::<Vec<_>>()
                        .join(", "),
                };
                writeln!(out, "{line}").map_err(|e| w(path, e))?;
            }
        }
        let raw = ds.class_values()[g.label.unwrap_or(0)];
        writeln!(lab, "{raw}").map_err(|e| w(&l_path, e))?;
        offset += g.num_nodes();
    }
    for (path, mut out) in [(a_path, a), (i_path, ind), (l_path, lab)].into_iter().chain(nodes) {
        out.flush().map_err(|e| NegprError::io(&path, e))?;
    }
    Ok(())
}
