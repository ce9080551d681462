//! Training losses and their gradients with respect to logits.
//!
//! | loss            | value                                                    |
//! |-----------------|----------------------------------------------------------|
//! | supervised      | mean cross-entropy on (noisy) source labels              |
//! | neighbour       | mean `KL(p_i ‖ Σ_j w_ij p_j)` over the semantic neighbours |
//! | pretraining     | `sup + β · neighbour`                                    |
//! | refinement      | pretraining + mean pseudo-label CE − `λ · mean log⟨p, q⟩` |
//!
//! Neighbour mixtures and teacher rows `q` are constants: no gradient flows
//! into them. Parameter gradients are obtained by feeding the logit
//! gradients here into [`crate::BranchParams::backward`].

use std::cell::Cell;
use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{NegprError, Result};
use crate::numeric::{cosine_sim, cross_entropy, softmax, LOG_FLOOR};
use crate::refine::PseudoLabelSet;

/// Top-k cosine neighbours of every sample with convex mixture weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    pub neighbors: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn k(&self) -> usize {
        self.neighbors.first().map_or(0, Vec::len)
    }
}

/// For each row, the `k` other rows with the largest cosine similarity
/// (smaller index first on ties). Weights are similarities clamped at zero
/// and renormalised, or uniform when every similarity clamps.
pub fn build_neighbor_graph(embeddings: &Array2<f64>, k: usize) -> Result<NeighborGraph> {
    let n = embeddings.nrows();
    if k == 0 || n <= k {
        return Err(NegprError::Config(format!(
            "need 1 <= k < n for a neighbour graph, got k = {k}, n = {n}"
        )));
    }
    let mut neighbors = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let zi = embeddings.row(i);
        let mut scored: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (cosine_sim(zi, embeddings.row(j)), j))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.truncate(k);
        let clamped: Vec<f64> = scored.iter().map(|(s, _)| s.max(0.0)).collect();
        let total: f64 = clamped.iter().sum();
        let w = if total > 0.0 {
            clamped.iter().map(|c| c / total).collect()
        } else {
            vec![1.0 / k as f64; k]
        };
        neighbors.push(scored.into_iter().map(|(_, j)| j).collect());
        weights.push(w);
    }
    Ok(NeighborGraph { neighbors, weights })
}

fn log_softmax(z: ArrayView1<f64>) -> Array1<f64> {
    let max = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = z.mapv(|v| (v - max).exp()).sum().ln() + max;
    z.mapv(|v| v - lse)
}

/// Row `i`: `Σ_j w_ij softmax(z_j)` over the neighbours of `i`.
pub fn neighbor_targets(logits: &Array2<f64>, ng: &NeighborGraph) -> Result<Array2<f64>> {
    if ng.len() != logits.nrows() {
        return Err(NegprError::Shape(format!(
            "neighbour graph over {} samples, logits for {}",
            ng.len(),
            logits.nrows()
        )));
    }
    let probs: Vec<Array1<f64>> = logits.rows().into_iter().map(softmax).collect();
    let mut targets = Array2::zeros(logits.raw_dim());
    for (i, mut row) in targets.rows_mut().into_iter().enumerate() {
        for (&j, &w) in ng.neighbors[i].iter().zip(&ng.weights[i]) {
            if j >= probs.len() {
                return Err(NegprError::Shape(format!("neighbour {j} of sample {i} out of range")));
            }
            row.scaled_add(w, &probs[j]);
        }
    }
    Ok(targets)
}

/// `(1/n) Σ_i KL(softmax(z_i) ‖ r_i)` with fixed target rows `r`.
pub fn kl_to_targets(logits: ArrayView2<f64>, targets: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let n = logits.nrows().max(1) as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for ((z, r), mut g) in logits.rows().into_iter().zip(targets.rows()).zip(grad.rows_mut()) {
        let logp = log_softmax(z);
        let p = logp.mapv(f64::exp);
        // ell_c = log p_c - log r_c; dKL/dz = p ⊙ (ell - KL)
        let ell: Array1<f64> = logp.iter().zip(r).map(|(lp, rc)| lp - rc.max(LOG_FLOOR).ln()).collect();
        let kl = p.dot(&ell);
        loss += kl;
        g.assign(&(&p * &ell.mapv(|e| e - kl) / n));
    }
    (loss / n, grad)
}

/// Neighbour-consistency loss and its logit gradient.
pub fn noise_loss(logits: &Array2<f64>, ng: &NeighborGraph) -> Result<(f64, Array2<f64>)> {
    let targets = neighbor_targets(logits, ng)?;
    Ok(kl_to_targets(logits.view(), targets.view()))
}

/// Mean cross-entropy and its logit gradient.
pub fn supervised_loss(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    if labels.len() != logits.nrows() {
        return Err(NegprError::Shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.nrows()
        )));
    }
    let c = logits.ncols();
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(NegprError::Data(format!("label {y} outside [0, {c})")));
    }
    let n = labels.len().max(1) as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for ((z, &y), mut g) in logits.rows().into_iter().zip(labels).zip(grad.rows_mut()) {
        let (l, dz) = cross_entropy(softmax(z).view(), y);
        loss += l;
        g.assign(&(dz / n));
    }
    Ok((loss / n, grad))
}

pub const SUP: &str = "sup";
pub const NOISE: &str = "noise";
pub const PSEUDO_CE: &str = "pseudo_ce";
pub const TOLERANT_REG: &str = "tolerant_reg";

/// Loss value, its components and the gradient with respect to the
/// student's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub components: BTreeMap<&'static str, f64>,
    /// `dL/dlogits` for the source rows.
    pub grad_source: Array2<f64>,
    /// `dL/dlogits` for the target rows passed to [`refine_loss`];
    /// empty for pretraining.
    pub grad_target: Array2<f64>,
}

impl LossReport {
    pub fn component(&self, name: &str) -> f64 {
        self.components.get(name).copied().unwrap_or(0.0)
    }
}

/// `mean CE + β · neighbour loss`.
pub fn pretrain_loss(logits: &Array2<f64>, labels: &[usize], ng: &NeighborGraph, beta: f64) -> Result<LossReport> {
    let (sup, g_sup) = supervised_loss(logits.view(), labels)?;
    let mut components = BTreeMap::from([(SUP, sup), (NOISE, 0.0)]);
    let mut grad = g_sup;
    // beta = 0 skips the term entirely, so no neighbour graph is required
    if beta != 0.0 {
        let (noise, g_noise) = noise_loss(logits, ng)?;
        grad.scaled_add(beta, &g_noise);
        components.insert(NOISE, noise);
    }
    Ok(LossReport {
        total: sup + beta * components[NOISE],
        components,
        grad_source: grad,
        grad_target: Array2::zeros((0, logits.ncols())),
    })
}

thread_local! {
    static FLIP_REG_SIGN: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` with the sign of the [`tolerant_reg`] gradient inverted on this
/// thread. Mutation hook for exercising the gradient checker.
#[doc(hidden)]
pub fn with_flipped_reg_sign<R>(f: impl FnOnce() -> R) -> R {
    struct Reset(bool);
    impl Drop for Reset {
        fn drop(&mut self) {
            FLIP_REG_SIGN.with(|c| c.set(self.0));
        }
    }
    let _reset = Reset(FLIP_REG_SIGN.with(|c| c.replace(true)));
    f()
}

/// `-log⟨p, q⟩` and its gradient with respect to the logits behind `p`:
/// `p_c (⟨p, q⟩ - q_c) / ⟨p, q⟩`.
pub fn tolerant_reg(p: ArrayView1<f64>, q: ArrayView1<f64>) -> (f64, Array1<f64>) {
    let s = p.dot(&q).max(LOG_FLOOR);
    let sign = if FLIP_REG_SIGN.with(Cell::get) { -1.0 } else { 1.0 };
    let grad = p.iter().zip(q).map(|(&pc, &qc)| sign * pc * (s - qc) / s).collect();
    (-s.ln(), grad)
}

/// Per-sample logit gradient of `CE(p, ỹ) - λ log⟨p, q⟩`:
/// `p - onehot(ỹ) + λ g`.
pub fn pseudo_label_gradient(p: ArrayView1<f64>, q: ArrayView1<f64>, label: usize, lambda: f64) -> Array1<f64> {
    let (_, mut grad) = cross_entropy(p, label);
    let (_, g) = tolerant_reg(p, q);
    grad.scaled_add(lambda, &g);
    grad
}

/// Pretraining loss on the source rows plus the pseudo-label terms.
///
/// `target_logits` row `pl.indices[j]` is the student's prediction for the
/// `j`-th pseudo-labelled sample. With an empty `pl` this is exactly
/// [`pretrain_loss`].
pub fn refine_loss(
    source_logits: &Array2<f64>,
    source_labels: &[usize],
    ng: &NeighborGraph,
    target_logits: &Array2<f64>,
    pl: &PseudoLabelSet,
    beta: f64,
    lambda: f64,
) -> Result<LossReport> {
    let mut report = pretrain_loss(source_logits, source_labels, ng, beta)?;
    let c = source_logits.ncols();
    let mut grad_t = Array2::zeros((target_logits.nrows(), target_logits.ncols()));
    let mut ce_sum = 0.0;
    let mut reg_sum = 0.0;
    let m = pl.len();
    if m > 0 {
        if target_logits.ncols() != c || pl.teacher_probs.ncols() != c {
            return Err(NegprError::Shape(
                "class counts differ between student and teacher".into(),
            ));
        }
        for j in 0..m {
            let idx = pl.indices[j];
            if idx >= target_logits.nrows() {
                return Err(NegprError::Data(format!(
                    "pseudo-label index {idx} outside {} target rows",
                    target_logits.nrows()
                )));
            }
            let p = softmax(target_logits.row(idx));
            let q = pl.teacher_probs.row(j);
            let (ce, _) = cross_entropy(p.view(), pl.labels[j]);
            let (reg, _) = tolerant_reg(p.view(), q);
            ce_sum += ce;
            reg_sum += reg;
            let g = pseudo_label_gradient(p.view(), q, pl.labels[j], lambda) / m as f64;
            let mut row = grad_t.row_mut(idx);
            row += &g;
        }
    }
    let denom = m.max(1) as f64;
    report.components.insert(PSEUDO_CE, ce_sum / denom);
    report.components.insert(TOLERANT_REG, reg_sum / denom);
    report.total += ce_sum / denom + lambda * reg_sum / denom;
    report.grad_target = grad_t;
    Ok(report)
}
