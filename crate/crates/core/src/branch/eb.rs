use ndarray::{Array2, Axis};

use super::{standard, BranchParams, GraphBatch};

pub(super) fn encoder_input_dim(feature_dim: usize, max_path_len: usize) -> usize {
    feature_dim + max_path_len + 1
}

#[derive(Debug, Clone)]
pub struct EbCache {
    pre: Array2<f64>,
}

pub(super) fn forward(params: &BranchParams, batch: &GraphBatch) -> (Array2<f64>, super::ForwardCache) {
    let paths = batch.path_block().expect("checked by caller");
    let enc = &params.layers[0];
    let mut pre = paths.inputs.dot(&enc.weight.t());
    pre += &enc.bias;
    let mut z = Array2::zeros((batch.num_graphs(), enc.out_dim()));
    for (p, row) in pre.rows().into_iter().enumerate() {
        let w = paths.weights[p];
        let mut zg = z.row_mut(paths.graph[p]);
        zg.zip_mut_with(&row, |acc, &s| *acc += w * s.max(0.0));
    }
    (z, super::ForwardCache::Eb(EbCache { pre }))
}

pub(super) fn backward(batch: &GraphBatch, cache: &EbCache, grad_embed: &Array2<f64>, grads: &mut BranchParams) {
    let paths = batch.path_block().expect("checked by caller");
    let mut ds = Array2::zeros(cache.pre.raw_dim());
    for (p, (mut d, s)) in ds.rows_mut().into_iter().zip(cache.pre.rows()).enumerate() {
        let w = paths.weights[p];
        let dz = grad_embed.row(paths.graph[p]);
        for ((di, &si), &gi) in d.iter_mut().zip(s).zip(dz) {
            if si > 0.0 {
                *di = w * gi;
            }
        }
    }
    grads.layers[0].weight = standard(ds.t().dot(&paths.inputs));
    grads.layers[0].bias = ds.sum_axis(Axis(0));
}
