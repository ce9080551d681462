use std::collections::VecDeque;

use ndarray::{s, Array2};

use super::BranchParams;
use crate::error::{NegprError, Result};
use crate::graph::GraphInstance;

/// Canonical shortest paths of one graph.
///
/// Each ordered pair `(u, v)` at BFS distance `1..=P` contributes one path,
/// and every node contributes itself as a length-0 path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathMultiset {
    pub paths: Vec<Vec<usize>>,
}

impl PathMultiset {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn starting_at(&self, v: usize) -> impl Iterator<Item = &Vec<usize>> {
        self.paths.iter().filter(move |p| p[0] == v)
    }
}

fn bfs_distances(adj: &[Vec<usize>], source: usize, limit: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; adj.len()];
    dist[source] = 0;
    let mut queue = VecDeque::from([source]);
    while let Some(a) = queue.pop_front() {
        if dist[a] == limit {
            continue;
        }
        for &b in &adj[a] {
            if dist[b] == usize::MAX {
                dist[b] = dist[a] + 1;
                queue.push_back(b);
            }
        }
    }
    dist
}

/// Shortest paths up to length `max_len`; on ties the predecessor with the
/// smallest index is taken.
pub fn extract_substructures(g: &GraphInstance, max_len: usize) -> PathMultiset {
    let adj = g.adjacency_lists();
    let n = g.num_nodes();
    let mut paths = Vec::new();
    for u in 0..n {
        let dist = bfs_distances(&adj, u, max_len);
        let mut targets: Vec<usize> = (0..n).filter(|&v| dist[v] != usize::MAX).collect();
        targets.sort_by_key(|&v| (dist[v], v));
        for v in targets {
            let mut path = vec![v];
            let mut cur = v;
            while cur != u {
                // adjacency lists are sorted, so the first hit is the smallest
                cur = *adj[cur]
                    .iter()
                    .find(|&&w| dist[w].checked_add(1) == Some(dist[cur]))
                    .expect("BFS predecessor exists");
                path.push(cur);
            }
            path.reverse();
            paths.push(path);
        }
    }
    PathMultiset { paths }
}

/// Path encoder inputs for one graph.
///
/// For each ordered pair within distance `max_len` the row holds the node
/// features averaged along the path, followed by a one-hot of the path
/// length. When several shortest paths join the pair, the features are
/// averaged over all of them so the encoding does not depend on node order.
fn path_inputs(g: &GraphInstance, max_len: usize) -> (Array2<f64>, Vec<usize>) {
    let adj = g.adjacency_lists();
    let n = g.num_nodes();
    let d = g.feature_dim();
    let x = g.node_features();
    let width = d + max_len + 1;
    let mut rows: Vec<f64> = Vec::new();
    let mut starts = Vec::new();
    for u in 0..n {
        let dist = bfs_distances(&adj, u, max_len);
        let mut order: Vec<usize> = (0..n).filter(|&v| dist[v] != usize::MAX).collect();
        order.sort_by_key(|&v| (dist[v], v));
        // sigma[v]: number of shortest u-v paths; acc[v]: feature sum over all of them
        let mut sigma = vec![0.0f64; n];
        let mut acc = Array2::<f64>::zeros((n, d));
        for &v in &order {
            if v == u {
                sigma[v] = 1.0;
                acc.row_mut(v).assign(&x.row(v));
                continue;
            }
            let mut sum = ndarray::Array1::<f64>::zeros(d);
            for &w in &adj[v] {
                if dist[w] != usize::MAX && dist[w] + 1 == dist[v] {
                    sigma[v] += sigma[w];
                    sum += &acc.row(w);
                }
            }
            sum.scaled_add(sigma[v], &x.row(v));
            acc.row_mut(v).assign(&sum);
        }
        for &v in &order {
            let len = dist[v];
            let scale = 1.0 / (sigma[v] * (len + 1) as f64);
            rows.extend(acc.row(v).iter().map(|a| a * scale));
            rows.extend((0..=max_len).map(|l| if l == len { 1.0 } else { 0.0 }));
            starts.push(u);
        }
    }
    let count = starts.len();
    (
        Array2::from_shape_vec((count, width), rows).expect("rows have uniform width"),
        starts,
    )
}

/// Many graphs packed into one block-diagonal batch.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    features: Array2<f64>,
    /// `graph_offsets[g]..graph_offsets[g + 1]` are the nodes of graph `g`.
    graph_offsets: Vec<usize>,
    node_graph: Vec<usize>,
    /// CSR adjacency over global node ids.
    adj_ptr: Vec<usize>,
    adj_idx: Vec<usize>,
    paths: Option<PathBlock>,
}

#[derive(Debug, Clone)]
pub(super) struct PathBlock {
    pub max_len: usize,
    pub inputs: Array2<f64>,
    /// Readout weight of each path: `1 / (|V| * paths starting at its node)`.
    pub weights: Vec<f64>,
    pub graph: Vec<usize>,
    /// Rows `offsets[g]..offsets[g + 1]` belong to graph `g`.
    pub offsets: Vec<usize>,
}

impl GraphBatch {
    /// Pack `graphs`; `max_path_len` additionally prepares EB path inputs.
    pub fn new(graphs: &[GraphInstance], max_path_len: Option<usize>) -> Result<Self> {
        let d = graphs.first().map_or(0, |g| g.feature_dim());
        if let Some(i) = graphs.iter().position(|g| g.feature_dim() != d) {
            return Err(NegprError::Shape(format!("graph {i} has a different feature width")));
        }
        let total: usize = graphs.iter().map(|g| g.num_nodes()).sum();
        let mut features = Array2::zeros((total, d));
        let mut graph_offsets = vec![0];
        let mut node_graph = Vec::with_capacity(total);
        let mut adj_ptr = vec![0];
        let mut adj_idx = Vec::new();
        for (gi, g) in graphs.iter().enumerate() {
            let off = *graph_offsets.last().unwrap();
            let n = g.num_nodes();
            features.slice_mut(s![off..off + n, ..]).assign(g.node_features());
            for nbrs in g.adjacency_lists() {
                adj_idx.extend(nbrs.iter().map(|v| v + off));
                adj_ptr.push(adj_idx.len());
                node_graph.push(gi);
            }
            graph_offsets.push(off + n);
        }

        let paths = match max_path_len {
            Some(0) => return Err(NegprError::Config("path length must be >= 1".into())),
            Some(p) => {
                let mut blocks = Vec::with_capacity(graphs.len());
                let mut weights = Vec::new();
                let mut graph = Vec::new();
                let mut offsets = vec![0];
                for (gi, g) in graphs.iter().enumerate() {
                    let (inputs, starts) = path_inputs(g, p);
                    let mut per_node = vec![0usize; g.num_nodes()];
                    starts.iter().for_each(|&u| per_node[u] += 1);
                    let n = g.num_nodes() as f64;
                    weights.extend(starts.iter().map(|&u| 1.0 / (n * per_node[u] as f64)));
                    graph.extend(std::iter::repeat_n(gi, starts.len()));
                    offsets.push(graph.len());
                    blocks.push(inputs);
                }
                let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
                let inputs = if views.is_empty() {
                    Array2::zeros((0, d + p + 1))
                } else {
                    ndarray::concatenate(ndarray::Axis(0), &views).expect("uniform width")
                };
                Some(PathBlock {
                    max_len: p,
                    inputs,
                    weights,
                    graph,
                    offsets,
                })
            }
            None => None,
        };

        Ok(GraphBatch {
            features,
            graph_offsets,
            node_graph,
            adj_ptr,
            adj_idx,
            paths,
        })
    }

    /// Batch with exactly the precomputation `params` needs.
    pub fn for_params(graphs: &[GraphInstance], params: &BranchParams) -> Result<Self> {
        let p = (params.max_path_len > 0).then_some(params.max_path_len);
        GraphBatch::new(graphs, p)
    }

    /// Sub-batch of the given graphs, in the given order, without
    /// recomputing paths.
    pub fn select(&self, graphs: &[usize]) -> Result<GraphBatch> {
        if let Some(&g) = graphs.iter().find(|&&g| g >= self.num_graphs()) {
            return Err(NegprError::Data(format!(
                "graph {g} outside batch of {}",
                self.num_graphs()
            )));
        }
        let total: usize = graphs.iter().map(|&g| self.graph_size(g)).sum();
        let mut features = Array2::zeros((total, self.feature_dim()));
        let mut graph_offsets = vec![0];
        let mut node_graph = Vec::with_capacity(total);
        let mut adj_ptr = vec![0];
        let mut adj_idx = Vec::new();
        for (new_g, &g) in graphs.iter().enumerate() {
            let (lo, hi) = (self.graph_offsets[g], self.graph_offsets[g + 1]);
            let off = *graph_offsets.last().unwrap();
            features
                .slice_mut(s![off..off + hi - lo, ..])
                .assign(&self.features.slice(s![lo..hi, ..]));
            for u in lo..hi {
                adj_idx.extend(
                    self.adj_idx[self.adj_ptr[u]..self.adj_ptr[u + 1]]
                        .iter()
                        .map(|v| v - lo + off),
                );
                adj_ptr.push(adj_idx.len());
                node_graph.push(new_g);
            }
            graph_offsets.push(off + hi - lo);
        }
        let paths = self.paths.as_ref().map(|pb| {
            let rows: Vec<usize> = graphs.iter().flat_map(|&g| pb.offsets[g]..pb.offsets[g + 1]).collect();
            let mut offsets = vec![0];
            let mut graph = Vec::with_capacity(rows.len());
            for (new_g, &g) in graphs.iter().enumerate() {
                let count = pb.offsets[g + 1] - pb.offsets[g];
                graph.extend(std::iter::repeat_n(new_g, count));
                offsets.push(graph.len());
            }
            PathBlock {
                max_len: pb.max_len,
                inputs: pb.inputs.select(ndarray::Axis(0), &rows),
                weights: rows.iter().map(|&r| pb.weights[r]).collect(),
                graph,
                offsets,
            }
        });
        Ok(GraphBatch {
            features,
            graph_offsets,
            node_graph,
            adj_ptr,
            adj_idx,
            paths,
        })
    }

    pub fn num_graphs(&self) -> usize {
        self.graph_offsets.len() - 1
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn max_path_len(&self) -> Option<usize> {
        self.paths.as_ref().map(|p| p.max_len)
    }

    pub(super) fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub(super) fn node_graph(&self) -> &[usize] {
        &self.node_graph
    }

    pub(super) fn graph_size(&self, g: usize) -> usize {
        self.graph_offsets[g + 1] - self.graph_offsets[g]
    }

    pub(super) fn path_block(&self) -> Option<&PathBlock> {
        self.paths.as_ref()
    }

    /// `out[u] = sum of h[v] over neighbours v of u`.
    pub(super) fn aggregate(&self, h: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(h.raw_dim());
        for u in 0..self.num_nodes() {
            let mut row = out.row_mut(u);
            for &v in &self.adj_idx[self.adj_ptr[u]..self.adj_ptr[u + 1]] {
                row += &h.row(v);
            }
        }
        out
    }

    /// Mean of node rows per graph.
    pub(super) fn mean_readout(&self, h: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.num_graphs(), h.ncols()));
        for (u, &g) in self.node_graph.iter().enumerate() {
            let mut row = out.row_mut(g);
            row += &h.row(u);
        }
        for g in 0..self.num_graphs() {
            let n = self.graph_size(g) as f64;
            out.row_mut(g).mapv_inplace(|v| v / n);
        }
        out
    }
}
