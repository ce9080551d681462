use ndarray::{concatenate, s, Array2, Axis};

use super::{standard, BranchParams, GraphBatch};

#[derive(Debug, Clone)]
pub struct IbCache {
    /// Per layer: the concatenated `[h | sum of neighbour h]` input.
    inputs: Vec<Array2<f64>>,
    /// Per layer: pre-activation.
    pre: Vec<Array2<f64>>,
}

pub(super) fn forward(params: &BranchParams, batch: &GraphBatch) -> (Array2<f64>, super::ForwardCache) {
    let mut h = batch.features().clone();
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let agg = batch.aggregate(&h);
        let combined = concatenate![Axis(1), h, agg];
        let mut s = combined.dot(&layer.weight.t());
        s += &layer.bias;
        h = s.mapv(|v| v.max(0.0));
        inputs.push(combined);
        pre.push(s);
    }
    let z = batch.mean_readout(&h);
    (z, super::ForwardCache::Ib(IbCache { inputs, pre }))
}

pub(super) fn backward(
    params: &BranchParams,
    batch: &GraphBatch,
    cache: &IbCache,
    grad_embed: &Array2<f64>,
    grads: &mut BranchParams,
) {
    // d mean-readout: every node of graph g receives dz_g / |V_g|
    let hidden = grad_embed.ncols();
    let mut dh = Array2::zeros((batch.num_nodes(), hidden));
    for (u, &g) in batch.node_graph().iter().enumerate() {
        let n = batch.graph_size(g) as f64;
        dh.row_mut(u).assign(&grad_embed.row(g).mapv(|v| v / n));
    }
    for l in (0..params.layers.len()).rev() {
        let pre = &cache.pre[l];
        let mut ds = dh;
        ds.zip_mut_with(pre, |d, &s| {
            if s <= 0.0 {
                *d = 0.0;
            }
        });
        grads.layers[l].weight = standard(ds.t().dot(&cache.inputs[l]));
        grads.layers[l].bias = ds.sum_axis(Axis(0));
        if l == 0 {
            break;
        }
        let dc = ds.dot(&params.layers[l].weight);
        let width = dc.ncols() / 2;
        let own = dc.slice(s![.., ..width]).to_owned();
        // aggregation is symmetric, so its transpose is itself
        let from_nbrs = batch.aggregate(&dc.slice(s![.., width..]).to_owned());
        dh = own + from_nbrs;
    }
}
