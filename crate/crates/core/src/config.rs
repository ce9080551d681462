//! Experiment configuration: a flat JSON object, every key optional.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::branch::{BranchKind, BranchShape};
use crate::error::{NegprError, Result};

/// Where a domain's graphs come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    /// A TUDataset directory; the dataset name is the directory's last
    /// component, so `data/PROTEINS0` reads `data/PROTEINS0/PROTEINS0_A.txt`.
    Dir(PathBuf),
}

impl DataSource {
    pub fn dataset_name(&self) -> Option<String> {
        match self {
            DataSource::Synthetic => None,
            DataSource::Dir(p) => p.file_name().map(|s| s.to_string_lossy().into_owned()),
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Synthetic => f.write_str("synthetic"),
            DataSource::Dir(p) => write!(f, "{}", p.display()),
        }
    }
}

impl FromStr for DataSource {
    type Err = NegprError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DataSource::Synthetic),
            "" => Err(NegprError::Config("empty dataset path".into())),
            path => Ok(DataSource::Dir(PathBuf::from(path))),
        }
    }
}

impl Serialize for DataSource {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DataSource {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which branches take part in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Both branches, each teaching the other.
    #[default]
    None,
    /// Only the explicit branch, teaching itself.
    WithoutIb,
    /// Only the implicit branch, teaching itself.
    WithoutEb,
}

impl Ablation {
    /// The branch left when one is removed.
    pub fn sole_branch(self) -> Option<BranchKind> {
        match self {
            Ablation::None => None,
            Ablation::WithoutIb => Some(BranchKind::Eb),
            Ablation::WithoutEb => Some(BranchKind::Ib),
        }
    }
}

impl FromStr for Ablation {
    type Err = NegprError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "without_ib" => Ok(Ablation::WithoutIb),
            "without_eb" => Ok(Ablation::WithoutEb),
            _ => Err(NegprError::Config(format!(
                "unknown ablation {s:?}; expected none, without_ib or without_eb"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub target: DataSource,
    /// Graph counts when a side is synthetic.
    pub n_source: usize,
    pub n_target: usize,
    /// Weight of the neighbour-consistency loss.
    pub beta: f64,
    /// Weight of the teacher-agreement regulariser.
    pub lambda: f64,
    /// Pseudo-label confidence threshold.
    pub zeta: f64,
    /// Semantic neighbours per source sample.
    pub k: usize,
    /// Refinement iterations.
    pub iterations: usize,
    /// Fraction of source labels flipped before training.
    pub noise_ratio: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub layers: usize,
    pub hidden: usize,
    pub pretrain_epochs: usize,
    pub refine_epochs: usize,
    /// Longest shortest path encoded by the explicit branch.
    pub path_len: usize,
    /// Graphs per optimisation step; 0 means full batch.
    pub batch_size: usize,
    pub ablation: Ablation,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Write branch checkpoints every this many refinement iterations
    /// (0: final checkpoints only).
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            source: DataSource::Synthetic,
            target: DataSource::Synthetic,
            n_source: 400,
            n_target: 400,
            beta: 1.0,
            lambda: 1.0,
            zeta: 0.9,
            k: 5,
            iterations: 5,
            noise_ratio: 0.3,
            lr: 1e-4,
            weight_decay: 1e-12,
            layers: 4,
            hidden: 256,
            pretrain_epochs: 100,
            refine_epochs: 20,
            path_len: 3,
            batch_size: 0,
            ablation: Ablation::None,
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("runs"),
            checkpoint_every: 0,
        }
    }
}

impl ExperimentConfig {
    /// Small, fast settings on the synthetic two-domain task.
    pub fn desk() -> Self {
        ExperimentConfig::default().with_desk_preset()
    }

    /// Overlay the desk preset on `self`.
    pub fn with_desk_preset(mut self) -> Self {
        self.source = DataSource::Synthetic;
        self.target = DataSource::Synthetic;
        self.n_source = 400;
        self.n_target = 400;
        self.hidden = 32;
        self.pretrain_epochs = 100;
        self.refine_epochs = 20;
        self.iterations = 5;
        // 1e-4 barely moves a freshly initialised model in a few hundred
        // full-batch steps
        self.lr = 1e-2;
        self
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s).map_err(|e| NegprError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path)
            .map_err(|e| NegprError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(NegprError::Config(msg));
        for (name, v) in [("beta", self.beta), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return fail(format!("zeta must lie in [0, 1], got {}", self.zeta));
        }
        if !(0.0..=1.0).contains(&self.noise_ratio) {
            return fail(format!("noise_ratio must lie in [0, 1], got {}", self.noise_ratio));
        }
        if self.k < 1 {
            return fail("k must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.layers < 1 || self.hidden < 1 {
            return fail("layers and hidden must be >= 1".into());
        }
        if self.path_len < 1 {
            return fail("path_len must be >= 1".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        for (side, src, n) in [
            ("source", &self.source, self.n_source),
            ("target", &self.target, self.n_target),
        ] {
            if *src == DataSource::Synthetic && n < 10 {
                return fail(format!("n_{side} must be >= 10 for synthetic data, got {n}"));
            }
        }
        if self.batch_size != 0 && self.batch_size <= self.k && self.beta != 0.0 {
            return fail(format!(
                "batch_size {} leaves no room for {} neighbours",
                self.batch_size, self.k
            ));
        }
        Ok(())
    }

    pub fn branch_shape(&self, feature_dim: usize, num_classes: usize) -> BranchShape {
        BranchShape {
            feature_dim,
            hidden: self.hidden,
            layers: self.layers,
            num_classes,
            max_path_len: self.path_len,
        }
    }
}
