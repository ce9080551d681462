//! The two graph encoders and their parameters.
//!
//! * [`BranchKind::Ib`]: sum-aggregate / concat-combine message passing with
//!   ReLU layers and a mean readout.
//! * [`BranchKind::Eb`]: every shortest path of length at most `P` is
//!   encoded by one ReLU layer; node states average the paths that start at
//!   the node and the graph state averages the nodes.
//!
//! Both end in a linear classifier head. Gradients are written out by hand
//! in [`BranchParams::backward`].

mod batch;
mod eb;
mod ib;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NegprError, Result};
use crate::graph::GraphInstance;

pub use batch::{extract_substructures, GraphBatch, PathMultiset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    Ib,
    Eb,
}

impl BranchKind {
    pub fn other(self) -> BranchKind {
        match self {
            BranchKind::Ib => BranchKind::Eb,
            BranchKind::Eb => BranchKind::Ib,
        }
    }
}

impl fmt::Display for BranchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BranchKind::Ib => "ib",
            BranchKind::Eb => "eb",
        })
    }
}

impl FromStr for BranchKind {
    type Err = NegprError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ib" | "IB" => Ok(BranchKind::Ib),
            "eb" | "EB" => Ok(BranchKind::Eb),
            _ => Err(NegprError::Config(format!("unknown branch {s:?}"))),
        }
    }
}

/// Row-major copy when `a` is not already row-major; flat views rely on it.
pub(crate) fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Affine map `x -> W x + b` with `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Dense {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Dense {
            weight: Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-limit..limit)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn zeros_like(&self) -> Dense {
        Dense {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Trainable parameters of one branch, classifier head included.
///
/// The same type carries gradients (see [`BranchParams::zeros_like`]).
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub kind: BranchKind,
    /// Message-passing layers (IB) or the single path encoder (EB).
    pub layers: Vec<Dense>,
    pub head: Dense,
    /// Longest path length encoded by EB; 0 for IB.
    pub max_path_len: usize,
}

/// Architecture of a freshly initialised branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchShape {
    pub feature_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub num_classes: usize,
    pub max_path_len: usize,
}

impl BranchParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(kind: BranchKind, shape: BranchShape, seed: u64) -> Result<Self> {
        if shape.feature_dim == 0 || shape.hidden == 0 || shape.num_classes < 2 {
            return Err(NegprError::Config(format!("degenerate branch shape {shape:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = match kind {
            BranchKind::Ib => {
                if shape.layers == 0 {
                    return Err(NegprError::Config("IB needs at least one layer".into()));
                }
                let mut width = shape.feature_dim;
                (0..shape.layers)
                    .map(|_| {
                        let d = Dense::glorot(&mut rng, 2 * width, shape.hidden);
                        width = shape.hidden;
                        d
                    })
                    .collect()
            }
            BranchKind::Eb => {
                if shape.max_path_len == 0 {
                    return Err(NegprError::Config("EB needs path length >= 1".into()));
                }
                vec![Dense::glorot(
                    &mut rng,
                    eb::encoder_input_dim(shape.feature_dim, shape.max_path_len),
                    shape.hidden,
                )]
            }
        };
        let head = Dense::glorot(&mut rng, shape.hidden, shape.num_classes);
        Ok(BranchParams {
            kind,
            layers,
            head,
            max_path_len: if kind == BranchKind::Eb { shape.max_path_len } else { 0 },
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_dim()
    }

    pub fn hidden(&self) -> usize {
        self.head.in_dim()
    }

    /// Node feature width the branch expects.
    pub fn feature_dim(&self) -> usize {
        match self.kind {
            BranchKind::Ib => self.layers[0].in_dim() / 2,
            BranchKind::Eb => self.layers[0].in_dim() - (self.max_path_len + 1),
        }
    }

    pub fn zeros_like(&self) -> BranchParams {
        BranchParams {
            kind: self.kind,
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
            head: self.head.zeros_like(),
            max_path_len: self.max_path_len,
        }
    }

    fn dense_blocks(&self) -> impl Iterator<Item = &Dense> {
        self.layers.iter().chain(std::iter::once(&self.head))
    }

    /// Flat views in a fixed order: each layer's weight then bias, then the head.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.dense_blocks()
            .flat_map(|d| {
                [
                    d.weight.as_slice().expect("standard layout"),
                    d.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
            .flat_map(|d| {
                [
                    d.weight.as_slice_mut().expect("standard layout"),
                    d.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    /// Copy of `self` with every entry replaced from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<BranchParams> {
        if flat.len() != self.num_params() {
            return Err(NegprError::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut out = self.clone();
        let mut rest = flat;
        for t in out.tensors_mut() {
            let (head, tail) = rest.split_at(t.len());
            t.copy_from_slice(head);
            rest = tail;
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_batch(&self, batch: &GraphBatch) -> Result<()> {
        if batch.feature_dim() != self.feature_dim() {
            return Err(NegprError::Shape(format!(
                "batch features have width {}, {} branch expects {}",
                batch.feature_dim(),
                self.kind,
                self.feature_dim()
            )));
        }
        if self.kind == BranchKind::Eb && batch.max_path_len() != Some(self.max_path_len) {
            return Err(NegprError::Shape(format!(
                "EB needs paths up to length {}, batch holds {:?}",
                self.max_path_len,
                batch.max_path_len()
            )));
        }
        Ok(())
    }

    /// Embeddings and logits for every graph in the batch, one row each.
    pub fn forward(&self, batch: &GraphBatch) -> Result<BranchOutput> {
        self.forward_train(batch).map(|(out, _)| out)
    }

    /// Forward pass keeping the intermediates [`BranchParams::backward`] needs.
    pub fn forward_train(&self, batch: &GraphBatch) -> Result<(BranchOutput, ForwardCache)> {
        self.check_batch(batch)?;
        let (embeddings, cache) = match self.kind {
            BranchKind::Ib => ib::forward(self, batch),
            BranchKind::Eb => eb::forward(self, batch),
        };
        let mut logits = embeddings.dot(&self.head.weight.t());
        logits += &self.head.bias;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(NegprError::NonFinite(format!("{} logits", self.kind)));
        }
        Ok((BranchOutput { embeddings, logits }, cache))
    }

    /// Parameter gradient given `dL/dlogits` (one row per graph).
    pub fn backward(
        &self,
        batch: &GraphBatch,
        out: &BranchOutput,
        cache: &ForwardCache,
        grad_logits: &Array2<f64>,
    ) -> Result<BranchParams> {
        if grad_logits.dim() != out.logits.dim() {
            return Err(NegprError::Shape(format!(
                "logit gradient {:?} for logits {:?}",
                grad_logits.dim(),
                out.logits.dim()
            )));
        }
        let mut grads = self.zeros_like();
        grads.head.weight = standard(grad_logits.t().dot(&out.embeddings));
        grads.head.bias = grad_logits.sum_axis(ndarray::Axis(0));
        let grad_embed = grad_logits.dot(&self.head.weight);
        match (self.kind, cache) {
            (BranchKind::Ib, ForwardCache::Ib(c)) => ib::backward(self, batch, c, &grad_embed, &mut grads),
            (BranchKind::Eb, ForwardCache::Eb(c)) => eb::backward(batch, c, &grad_embed, &mut grads),
            _ => return Err(NegprError::Shape("cache from the other branch".into())),
        }
        Ok(grads)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let names = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, _)| format!("layer{i}"))
            .chain(std::iter::once("head".to_string()));
        let tensors = self
            .dense_blocks()
            .zip(names)
            .flat_map(|(d, name)| {
                [
                    TensorRecord {
                        name: format!("{name}.weight"),
                        shape: d.weight.shape().to_vec(),
                        data: d.weight.iter().copied().collect(),
                    },
                    TensorRecord {
                        name: format!("{name}.bias"),
                        shape: d.bias.shape().to_vec(),
                        data: d.bias.to_vec(),
                    },
                ]
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            kind: self.kind,
            max_path_len: self.max_path_len,
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(NegprError::Data(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        if ck.tensors.len() < 4 || !ck.tensors.len().is_multiple_of(2) {
            return Err(NegprError::Data(format!("{} tensors in checkpoint", ck.tensors.len())));
        }
        let mut blocks = ck
            .tensors
            .chunks(2)
            .map(|pair| {
                let (w, b) = (&pair[0], &pair[1]);
                let weight = match w.shape[..] {
                    [r, c] => Array2::from_shape_vec((r, c), w.data.clone()),
                    _ => return Err(NegprError::Shape(format!("{} is not a matrix", w.name))),
                }
                .map_err(|e| NegprError::Shape(format!("{}: {e}", w.name)))?;
                if b.shape != [weight.nrows()] || b.data.len() != weight.nrows() {
                    return Err(NegprError::Shape(format!("{} does not match {}", b.name, w.name)));
                }
                Ok(Dense {
                    weight,
                    bias: Array1::from(b.data.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = blocks.pop().expect("at least two blocks");
        let params = BranchParams {
            kind: ck.kind,
            layers: blocks,
            head,
            max_path_len: ck.max_path_len,
        };
        if !params.is_finite() {
            return Err(NegprError::NonFinite("checkpoint parameter".into()));
        }
        Ok(params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_checkpoint(&serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| NegprError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| NegprError::io(path, e))?;
        Self::from_json(&s)
    }

    /// SHA-256 of the little-endian bytes of every parameter, in tensor order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update([self.kind as u8]);
        for t in self.tensors() {
            h.update((t.len() as u64).to_le_bytes());
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub const CHECKPOINT_FORMAT: &str = "negpr-branch";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Versioned, shape-tagged serialisation of [`BranchParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: BranchKind,
    pub max_path_len: usize,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput {
    /// Graph embeddings, `graphs x hidden`.
    pub embeddings: Array2<f64>,
    /// Class logits, `graphs x classes`.
    pub logits: Array2<f64>,
}

#[derive(Debug, Clone)]
pub enum ForwardCache {
    Ib(ib::IbCache),
    Eb(eb::EbCache),
}

/// Embedding and logits of a single graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphEmbedding {
    pub embedding: Array1<f64>,
    pub logits: Array1<f64>,
}

fn single(g: &GraphInstance, params: &BranchParams, kind: BranchKind) -> Result<GraphEmbedding> {
    if params.kind != kind {
        return Err(NegprError::Config(format!(
            "expected {kind} params, got {}",
            params.kind
        )));
    }
    let batch = GraphBatch::for_params(std::slice::from_ref(g), params)?;
    let out = params.forward(&batch)?;
    Ok(GraphEmbedding {
        embedding: out.embeddings.row(0).to_owned(),
        logits: out.logits.row(0).to_owned(),
    })
}

pub fn ib_forward(g: &GraphInstance, params: &BranchParams) -> Result<GraphEmbedding> {
    single(g, params, BranchKind::Ib)
}

pub fn eb_forward(g: &GraphInstance, params: &BranchParams) -> Result<GraphEmbedding> {
    single(g, params, BranchKind::Eb)
}

/// Forward every graph; row `i` of each output belongs to `graphs[i]`.
pub fn batch_forward(graphs: &[GraphInstance], params: &BranchParams) -> Result<BranchOutput> {
    params.forward(&GraphBatch::for_params(graphs, params)?)
}
