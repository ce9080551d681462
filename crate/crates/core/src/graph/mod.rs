//! Graph containers, domain partitioning and label-noise injection.

mod synth;
mod tudataset;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NegprError, Result};

pub use synth::{random_graph, synth_two_domain, SYNTH_FEATURE_DIM};
pub use tudataset::{parse_tudataset, write_tudataset};

/// One attributed, undirected graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInstance {
    node_features: Array2<f64>,
    edges: Vec<(usize, usize)>,
    pub label: Option<usize>,
}

impl GraphInstance {
    /// Edges are canonicalised to `(min, max)`, sorted and deduplicated.
    pub fn new(
        node_features: Array2<f64>,
        edges: impl IntoIterator<Item = (usize, usize)>,
        label: Option<usize>,
    ) -> Result<Self> {
        let n = node_features.nrows();
        if n == 0 {
            return Err(NegprError::Data("graph has no nodes".into()));
        }
        if node_features.iter().any(|x| !x.is_finite()) {
            return Err(NegprError::NonFinite("node feature".into()));
        }
        let mut canon = Vec::new();
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(NegprError::Data(format!("edge ({u}, {v}) out of range for {n} nodes")));
            }
            if u == v {
                return Err(NegprError::Data(format!("self-loop on node {u}")));
            }
            canon.push((u.min(v), u.max(v)));
        }
        canon.sort_unstable();
        canon.dedup();
        Ok(GraphInstance {
            node_features,
            edges: canon,
            label,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_features.nrows()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.ncols()
    }

    pub fn node_features(&self) -> &Array2<f64> {
        &self.node_features
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes()];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Relabel nodes so that old node `i` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(NegprError::Data("not a permutation".into()));
        }
        let mut feats = Array2::zeros(self.node_features.raw_dim());
        for (old, &new) in perm.iter().enumerate() {
            feats.row_mut(new).assign(&self.node_features.row(old));
        }
        GraphInstance::new(feats, self.edges.iter().map(|&(u, v)| (perm[u], perm[v])), self.label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

/// An ordered collection of graphs from one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub domain_tag: DomainTag,
    pub num_classes: usize,
    feature_dim: usize,
    graphs: Vec<GraphInstance>,
    class_values: Vec<i64>,
}

impl DomainDataset {
    pub fn new(
        name: impl Into<String>,
        domain_tag: DomainTag,
        num_classes: usize,
        graphs: Vec<GraphInstance>,
    ) -> Result<Self> {
        let feature_dim = graphs.first().map_or(0, |g| g.feature_dim());
        for (i, g) in graphs.iter().enumerate() {
            if g.feature_dim() != feature_dim {
                return Err(NegprError::Shape(format!(
                    "graph {i} has feature dim {}, expected {feature_dim}",
                    g.feature_dim()
                )));
            }
            match g.label {
                Some(y) if y >= num_classes => {
                    return Err(NegprError::Data(format!(
                        "graph {i} label {y} outside [0, {num_classes})"
                    )))
                }
                None if domain_tag == DomainTag::Source => {
                    return Err(NegprError::Data(format!("source graph {i} is unlabeled")))
                }
                _ => {}
            }
        }
        Ok(DomainDataset {
            name: name.into(),
            domain_tag,
            num_classes,
            feature_dim,
            graphs,
            class_values: (0..num_classes as i64).collect(),
        })
    }

    /// Raw on-disk label value for each class index.
    pub fn class_values(&self) -> &[i64] {
        &self.class_values
    }

    pub(crate) fn set_class_values(&mut self, values: Vec<i64>) {
        debug_assert_eq!(values.len(), self.num_classes);
        self.class_values = values;
    }

    /// Remap both datasets onto the union of their raw class values so that
    /// class indices mean the same thing on each side.
    pub fn align_classes(a: &mut DomainDataset, b: &mut DomainDataset) {
        let mut union: Vec<i64> = a.class_values.iter().chain(&b.class_values).copied().collect();
        union.sort_unstable();
        union.dedup();
        for ds in [a, b] {
            let remap: Vec<usize> = ds
                .class_values
                .iter()
                .map(|v| union.binary_search(v).expect("value drawn from union"))
                .collect();
            for g in &mut ds.graphs {
                g.label = g.label.map(|y| remap[y]);
            }
            ds.num_classes = union.len();
            ds.class_values = union.clone();
        }
    }

    pub fn graphs(&self) -> &[GraphInstance] {
        &self.graphs
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Labels of every graph; `None` entries for unlabeled graphs.
    pub fn labels(&self) -> Vec<Option<usize>> {
        self.graphs.iter().map(|g| g.label).collect()
    }

    /// Labels, failing if any graph is unlabeled.
    pub fn required_labels(&self) -> Result<Vec<usize>> {
        self.graphs
            .iter()
            .enumerate()
            .map(|(i, g)| {
                g.label
                    .ok_or_else(|| NegprError::Data(format!("graph {i} of {} is unlabeled", self.name)))
            })
            .collect()
    }

    pub fn with_labels(&self, labels: &[usize]) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(NegprError::Shape(format!(
                "{} labels for {} graphs",
                labels.len(),
                self.len()
            )));
        }
        let graphs = self
            .graphs
            .iter()
            .zip(labels)
            .map(|(g, &y)| GraphInstance {
                label: Some(y),
                ..g.clone()
            })
            .collect();
        let mut ds = DomainDataset::new(self.name.clone(), self.domain_tag, self.num_classes, graphs)?;
        ds.class_values = self.class_values.clone();
        Ok(ds)
    }

    pub fn with_tag(mut self, tag: DomainTag) -> Result<Self> {
        if tag == DomainTag::Source && self.graphs.iter().any(|g| g.label.is_none()) {
            return Err(NegprError::Data("source datasets must be fully labeled".into()));
        }
        self.domain_tag = tag;
        Ok(self)
    }

    /// Dataset restricted to `indices`, in the given order.
    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Result<Self> {
        let graphs = indices
            .iter()
            .map(|&i| {
                self.graphs
                    .get(i)
                    .cloned()
                    .ok_or_else(|| NegprError::Data(format!("index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ds = DomainDataset::new(name, self.domain_tag, self.num_classes, graphs)?;
        ds.feature_dim = self.feature_dim;
        ds.class_values = self.class_values.clone();
        Ok(ds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityMetric {
    EdgeDensity,
    NodeCount,
    Flux,
}

impl FromStr for DensityMetric {
    type Err = NegprError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edge_density" | "edge" => Ok(DensityMetric::EdgeDensity),
            "node_count" | "node" | "nodes" => Ok(DensityMetric::NodeCount),
            "flux" => Ok(DensityMetric::Flux),
            other => Err(NegprError::Config(format!(
                "unknown metric {other:?}; expected edge_density, node_count or flux"
            ))),
        }
    }
}

impl fmt::Display for DensityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DensityMetric::EdgeDensity => "edge_density",
            DensityMetric::NodeCount => "node_count",
            DensityMetric::Flux => "flux",
        })
    }
}

/// Structural statistic used to split a dataset into shifted domains.
///
/// Flux is edges per node. Edge density of a single-node graph is 0.
pub fn density_statistic(g: &GraphInstance, metric: DensityMetric) -> f64 {
    let n = g.num_nodes() as f64;
    let m = g.num_edges() as f64;
    match metric {
        DensityMetric::EdgeDensity if g.num_nodes() < 2 => 0.0,
        DensityMetric::EdgeDensity => 2.0 * m / (n * (n - 1.0)),
        DensityMetric::NodeCount => n,
        DensityMetric::Flux => m / n,
    }
}

/// Original indices of each part, in ascending `(statistic, index)` order.
pub fn partition_indices(ds: &DomainDataset, metric: DensityMetric, n_parts: usize) -> Result<Vec<Vec<usize>>> {
    if n_parts < 2 {
        return Err(NegprError::Config(format!("n_parts must be >= 2, got {n_parts}")));
    }
    if ds.len() < n_parts {
        return Err(NegprError::Data(format!(
            "dataset of {} graphs cannot be split into {n_parts} parts",
            ds.len()
        )));
    }
    let stats: Vec<f64> = ds.graphs.iter().map(|g| density_statistic(g, metric)).collect();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by(|&a, &b| stats[a].total_cmp(&stats[b]).then(a.cmp(&b)));

    let base = ds.len() / n_parts;
    let extra = ds.len() % n_parts;
    let mut parts = Vec::with_capacity(n_parts);
    let mut start = 0;
    for p in 0..n_parts {
        let size = base + usize::from(p < extra);
        parts.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(parts)
}

/// Split into `n_parts` contiguous quantile chunks named `<name>0..`.
pub fn partition_by_quantile(ds: &DomainDataset, metric: DensityMetric, n_parts: usize) -> Result<Vec<DomainDataset>> {
    partition_indices(ds, metric, n_parts)?
        .iter()
        .enumerate()
        .map(|(p, idx)| ds.subset(format!("{}{p}", ds.name), idx))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub original_labels: Vec<usize>,
    pub noisy_labels: Vec<usize>,
    pub flip_mask: Vec<bool>,
    pub noise_ratio: f64,
}

impl NoiseRecord {
    pub fn num_flipped(&self) -> usize {
        self.flip_mask.iter().filter(|&&f| f).count()
    }
}

/// Symmetric label noise: exactly `round(alpha * n)` labels, chosen without
/// replacement, are moved to a uniformly drawn different class.
pub fn inject_label_noise(labels: &[usize], alpha: f64, num_classes: usize, seed: u64) -> Result<NoiseRecord> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(NegprError::Config(format!("noise ratio {alpha} outside [0, 1]")));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(NegprError::Data(format!("label {bad} outside [0, {num_classes})")));
    }
    let n = labels.len();
    let n_flip = (alpha * n as f64).round() as usize;
    if n_flip > 0 && num_classes < 2 {
        return Err(NegprError::Config("label noise needs at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = labels.to_vec();
    let mut mask = vec![false; n];
    let mut chosen = sample(&mut rng, n, n_flip).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let draw = rng.random_range(0..num_classes - 1);
        noisy[i] = if draw >= labels[i] { draw + 1 } else { draw };
        mask[i] = true;
    }
    Ok(NoiseRecord {
        original_labels: labels.to_vec(),
        noisy_labels: noisy,
        flip_mask: mask,
        noise_ratio: alpha,
    })
}
