//! Graph-level domain adaptation under noisy source labels.
//!
//! Two graph encoders are trained side by side: an implicit branch that
//! learns structure through message passing, and an explicit branch that
//! encodes enumerated shortest paths. Both are pretrained on noisy source
//! labels with a neighbour-consistency term, then refine each other on
//! confident target pseudo-labels under a teacher-agreement regularizer.
//!
//! Every gradient in the crate is derived by hand; [`numeric::finite_diff_grad`]
//! is the independent oracle used to check them.

pub mod branch;
pub mod config;
pub mod error;
pub mod graph;
pub mod harness;
pub mod numeric;
pub mod objectives;
pub mod refine;

pub use branch::{BranchKind, BranchParams, GraphBatch, GraphEmbedding};
pub use config::{Ablation, DataSource, ExperimentConfig};

pub use error::{NegprError, Result};
pub use graph::{DomainDataset, DomainTag, GraphInstance, NoiseRecord};
pub use objectives::{LossReport, NeighborGraph};
pub use refine::{PseudoLabelSet, RefinementHistory, TrainedModel};
