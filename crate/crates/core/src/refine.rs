//! Dual-branch pretraining and nested cross-branch pseudo-label refinement.
//!
//! Stage 1 pretrains each branch on the noisy source labels with the
//! neighbour-consistency loss. Stage 2 repeats `T` times: the implicit
//! branch labels its confident target graphs and the explicit branch is
//! fine-tuned on them, then the roles swap.

use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::branch::{BranchKind, BranchParams, GraphBatch};
use crate::config::{Ablation, ExperimentConfig};
use crate::error::{NegprError, Result};
use crate::graph::{DomainDataset, GraphInstance};
use crate::numeric::{argmax, softmax, softmax_rows, AdamState};
use crate::objectives::{
    build_neighbor_graph, pretrain_loss, refine_loss, LossReport, NeighborGraph, NOISE, PSEUDO_CE, SUP, TOLERANT_REG,
};

/// Confident target samples selected by a teacher branch.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    /// Target indices, ascending.
    pub indices: Vec<usize>,
    /// Argmax of the teacher's prediction for each selected sample.
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
    /// Teacher softmax rows, aligned with `indices`.
    pub teacher_probs: Array2<f64>,
    pub teacher: BranchKind,
    pub threshold: f64,
}

impl PseudoLabelSet {
    pub fn empty(teacher: BranchKind, num_classes: usize, threshold: f64) -> Self {
        PseudoLabelSet {
            indices: Vec::new(),
            labels: Vec::new(),
            confidences: Vec::new(),
            teacher_probs: Array2::zeros((0, num_classes)),
            teacher,
            threshold,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Entries `which` re-indexed as `0..which.len()`, for use with a
    /// batch holding only the selected graphs.
    pub fn compact(&self, which: &[usize]) -> PseudoLabelSet {
        PseudoLabelSet {
            indices: (0..which.len()).collect(),
            labels: which.iter().map(|&j| self.labels[j]).collect(),
            confidences: which.iter().map(|&j| self.confidences[j]).collect(),
            teacher_probs: self.teacher_probs.select(Axis(0), which),
            teacher: self.teacher,
            threshold: self.threshold,
        }
    }
}

/// Rows whose largest probability reaches `zeta`, labelled by argmax.
pub fn filter_from_probs(probs: &Array2<f64>, zeta: f64, teacher: BranchKind) -> PseudoLabelSet {
    let mut set = PseudoLabelSet::empty(teacher, probs.ncols(), zeta);
    let mut rows = Vec::new();
    for (i, row) in probs.rows().into_iter().enumerate() {
        let label = argmax(row);
        if row[label] >= zeta {
            set.indices.push(i);
            set.labels.push(label);
            set.confidences.push(row[label]);
            rows.push(i);
        }
    }
    set.teacher_probs = probs.select(Axis(0), &rows);
    set
}

fn filter_batch(teacher: &BranchParams, target: &GraphBatch, zeta: f64) -> Result<PseudoLabelSet> {
    let probs = softmax_rows(&teacher.forward(target)?.logits);
    Ok(filter_from_probs(&probs, zeta, teacher.kind))
}

/// Confident pseudo-labels from `teacher` over the target domain.
pub fn filter_confident(teacher: &BranchParams, target: &DomainDataset, zeta: f64) -> Result<PseudoLabelSet> {
    filter_batch(teacher, &GraphBatch::for_params(target.graphs(), teacher)?, zeta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Refine,
}

/// One completed pretraining run or refinement half-iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub stage: Stage,
    pub iter: usize,
    /// Branch whose parameters were updated.
    pub branch: BranchKind,
    pub loss_total: f64,
    pub loss_sup: f64,
    pub loss_noise: f64,
    pub loss_pseudo: f64,
    pub loss_reg: f64,
    /// Size of the most recent confident set taught by each branch.
    pub n_conf_ib: usize,
    pub n_conf_eb: usize,
    /// Accuracy of the current predictor on the training labels.
    pub acc_source: f64,
    /// Accuracy on held-back target labels; NaN when there are none.
    pub acc_target: f64,
    /// Wall time since the run started; not covered by determinism.
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefinementHistory {
    pub records: Vec<HistoryRecord>,
}

pub const HISTORY_COLUMNS: [&str; 12] = [
    "stage",
    "iter",
    "loss_total",
    "loss_sup",
    "loss_noise",
    "loss_pseudo",
    "loss_reg",
    "n_conf_ib",
    "n_conf_eb",
    "acc_source",
    "acc_target",
    "seconds",
];

impl RefinementHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&HistoryRecord> {
        self.records.last()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(HISTORY_COLUMNS)?;
        for r in &self.records {
            let stage = match r.stage {
                Stage::Pretrain => "pretrain",
                Stage::Refine => "refine",
            };
            let f = |v: f64| format!("{v:?}");
            w.write_record([
                stage.to_string(),
                r.iter.to_string(),
                f(r.loss_total),
                f(r.loss_sup),
                f(r.loss_noise),
                f(r.loss_pseudo),
                f(r.loss_reg),
                r.n_conf_ib.to_string(),
                r.n_conf_eb.to_string(),
                f(r.acc_source),
                f(r.acc_target),
                f(r.seconds),
            ])?;
        }
        w.flush().map_err(|e| NegprError::io("history csv", e))?;
        Ok(())
    }

    /// Same as [`Self::write_csv`] with the timing column zeroed.
    pub fn without_timing(&self) -> RefinementHistory {
        RefinementHistory {
            records: self
                .records
                .iter()
                .map(|r| HistoryRecord {
                    seconds: 0.0,
                    ..r.clone()
                })
                .collect(),
        }
    }
}

/// Trained branches; with an ablation only one of them is present.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub ib: Option<BranchParams>,
    pub eb: Option<BranchParams>,
}

impl TrainedModel {
    pub fn branch(&self, kind: BranchKind) -> Option<&BranchParams> {
        match kind {
            BranchKind::Ib => self.ib.as_ref(),
            BranchKind::Eb => self.eb.as_ref(),
        }
    }

    fn branch_mut(&mut self, kind: BranchKind) -> Option<&mut BranchParams> {
        match kind {
            BranchKind::Ib => self.ib.as_mut(),
            BranchKind::Eb => self.eb.as_mut(),
        }
    }

    /// Mean of the present branches' softmax rows.
    pub fn predict_proba(&self, batch: &GraphBatch) -> Result<Array2<f64>> {
        let mut acc: Option<Array2<f64>> = None;
        let mut count = 0.0;
        for params in [&self.ib, &self.eb].into_iter().flatten() {
            let p = softmax_rows(&params.forward(batch)?.logits);
            acc = Some(match acc {
                Some(a) => a + p,
                None => p,
            });
            count += 1.0;
        }
        acc.map(|a| a / count)
            .ok_or_else(|| NegprError::Config("model has no branches".into()))
    }

    /// Predicted class per graph, smaller index on ties.
    pub fn predict_labels(&self, batch: &GraphBatch) -> Result<Vec<usize>> {
        Ok(self.predict_proba(batch)?.rows().into_iter().map(argmax).collect())
    }

    pub fn accuracy(&self, batch: &GraphBatch, labels: &[usize]) -> Result<f64> {
        let pred = self.predict_labels(batch)?;
        if pred.len() != labels.len() {
            return Err(NegprError::Shape(format!(
                "{} labels for {} graphs",
                labels.len(),
                pred.len()
            )));
        }
        if pred.is_empty() {
            return Ok(f64::NAN);
        }
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / pred.len() as f64)
    }
}

/// Class and ensemble distribution for one graph: argmax of the mean of the
/// two branches' softmax outputs.
pub fn predict(ib: &BranchParams, eb: &BranchParams, g: &GraphInstance) -> Result<(usize, Array1<f64>)> {
    let pib = softmax(crate::branch::ib_forward(g, ib)?.logits.view());
    let peb = softmax(crate::branch::eb_forward(g, eb)?.logits.view());
    let mean = (pib + peb) / 2.0;
    Ok((argmax(mean.view()), mean))
}

/// Packed source and target graphs plus the labels training may use.
#[derive(Debug, Clone)]
pub struct DomainBatches {
    pub source: GraphBatch,
    /// Possibly noisy source labels.
    pub source_labels: Vec<usize>,
    pub target: GraphBatch,
    /// Target labels for evaluation only.
    pub target_eval_labels: Option<Vec<usize>>,
    pub num_classes: usize,
}

impl DomainBatches {
    pub fn new(source: &DomainDataset, target: &DomainDataset, path_len: usize) -> Result<Self> {
        if source.num_classes != target.num_classes {
            return Err(NegprError::Data(format!(
                "source has {} classes, target {}",
                source.num_classes, target.num_classes
            )));
        }
        if source.feature_dim() != target.feature_dim() && !target.is_empty() {
            return Err(NegprError::Shape(format!(
                "source feature width {} differs from target {}",
                source.feature_dim(),
                target.feature_dim()
            )));
        }
        let target_eval_labels = target.labels().into_iter().collect::<Option<Vec<_>>>();
        Ok(DomainBatches {
            source: GraphBatch::new(source.graphs(), Some(path_len))?,
            source_labels: source.required_labels()?,
            target: GraphBatch::new(target.graphs(), Some(path_len))?,
            target_eval_labels,
            num_classes: source.num_classes,
        })
    }
}

/// One optimisation step's worth of rows.
struct Step {
    source: Vec<usize>,
    conf: Vec<usize>,
}

/// Full batch when `batch_size` is 0 or covers the source set; otherwise a
/// seeded shuffle of both index sets split into the same number of chunks.
fn plan_steps(n_source: usize, n_conf: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Step> {
    if batch_size == 0 || batch_size >= n_source {
        return vec![Step {
            source: (0..n_source).collect(),
            conf: (0..n_conf).collect(),
        }];
    }
    let mut src: Vec<usize> = (0..n_source).collect();
    let mut conf: Vec<usize> = (0..n_conf).collect();
    src.shuffle(rng);
    conf.shuffle(rng);
    let chunks = n_source.div_ceil(batch_size);
    (0..chunks)
        .map(|c| Step {
            source: src[c * n_source / chunks..(c + 1) * n_source / chunks].to_vec(),
            conf: conf[c * n_conf / chunks..(c + 1) * n_conf / chunks].to_vec(),
        })
        .collect()
}

fn neighbor_graph_for(embeddings: &Array2<f64>, cfg: &ExperimentConfig) -> Result<NeighborGraph> {
    if cfg.beta == 0.0 {
        return Ok(NeighborGraph {
            neighbors: Vec::new(),
            weights: Vec::new(),
        });
    }
    build_neighbor_graph(embeddings, cfg.k)
}

fn add_into(acc: &mut BranchParams, other: &BranchParams) {
    for (a, b) in acc.tensors_mut().into_iter().zip(other.tensors()) {
        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    }
}

fn apply(adam: &mut AdamState, params: &mut BranchParams, grads: &BranchParams) -> Result<()> {
    let g = grads.tensors();
    adam.step(&mut params.tensors_mut(), &g)?;
    if !params.is_finite() {
        return Err(NegprError::NonFinite(format!(
            "{} parameters after update",
            params.kind
        )));
    }
    Ok(())
}

/// Loss and parameter gradient of the refinement objective for one step.
///
/// The neighbour graph is rebuilt from the step's own source embeddings.
pub fn refine_objective(
    student: &BranchParams,
    source: &GraphBatch,
    source_labels: &[usize],
    conf: &GraphBatch,
    pl: &PseudoLabelSet,
    cfg: &ExperimentConfig,
) -> Result<(LossReport, BranchParams)> {
    let (out_s, cache_s) = student.forward_train(source)?;
    let ng = neighbor_graph_for(&out_s.embeddings, cfg)?;
    let report = if pl.is_empty() {
        pretrain_loss(&out_s.logits, source_labels, &ng, cfg.beta)?
    } else {
        let (out_t, cache_t) = student.forward_train(conf)?;
        let report = refine_loss(
            &out_s.logits,
            source_labels,
            &ng,
            &out_t.logits,
            pl,
            cfg.beta,
            cfg.lambda,
        )?;
        let grads_t = student.backward(conf, &out_t, &cache_t, &report.grad_target)?;
        let mut grads = student.backward(source, &out_s, &cache_s, &report.grad_source)?;
        add_into(&mut grads, &grads_t);
        return Ok((report, grads));
    };
    let grads = student.backward(source, &out_s, &cache_s, &report.grad_source)?;
    Ok((report, grads))
}

/// `epochs` of Adam on the refinement objective; returns the last step's loss.
#[allow(clippy::too_many_arguments)]
fn train_epochs(
    student: &mut BranchParams,
    adam: &mut AdamState,
    source: &GraphBatch,
    source_labels: &[usize],
    conf: &GraphBatch,
    pl: &PseudoLabelSet,
    cfg: &ExperimentConfig,
    epochs: usize,
    seed: u64,
) -> Result<Option<LossReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = None;
    for _ in 0..epochs {
        for step in plan_steps(source.num_graphs(), pl.len(), cfg.batch_size, &mut rng) {
            let full = step.source.len() == source.num_graphs();
            let (report, grads) = if full {
                refine_objective(student, source, source_labels, conf, pl, cfg)?
            } else {
                let labels: Vec<usize> = step.source.iter().map(|&i| source_labels[i]).collect();
                refine_objective(
                    student,
                    &source.select(&step.source)?,
                    &labels,
                    &conf.select(&step.conf)?,
                    &pl.compact(&step.conf),
                    cfg,
                )?
            };
            apply(adam, student, &grads)?;
            last = Some(report);
        }
    }
    Ok(last)
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Pretrain `branch` on the (noisy) source labels for `cfg.pretrain_epochs`.
pub fn pretrain_branch(branch: BranchParams, source: &DomainDataset, cfg: &ExperimentConfig) -> Result<BranchParams> {
    let batch = GraphBatch::new(source.graphs(), Some(cfg.path_len))?;
    let labels = source.required_labels()?;
    let mut params = branch;
    let mut adam = AdamState::new(cfg.lr, cfg.weight_decay);
    pretrain_batch(&mut params, &mut adam, &batch, &labels, cfg, 0)?;
    Ok(params)
}

fn pretrain_batch(
    params: &mut BranchParams,
    adam: &mut AdamState,
    source: &GraphBatch,
    labels: &[usize],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Option<LossReport>> {
    let empty_conf = source.select(&[])?;
    let pl = PseudoLabelSet::empty(params.kind.other(), params.num_classes(), cfg.zeta);
    train_epochs(
        params,
        adam,
        source,
        labels,
        &empty_conf,
        &pl,
        cfg,
        cfg.pretrain_epochs,
        seed,
    )
}

/// Fine-tune `student` on the teacher's confident target graphs. The
/// teacher is only read.
pub fn refine_step(
    teacher: &BranchParams,
    student: &BranchParams,
    source: &DomainDataset,
    target: &DomainDataset,
    cfg: &ExperimentConfig,
) -> Result<BranchParams> {
    let batches = DomainBatches::new(source, target, cfg.path_len)?;
    let mut student = student.clone();
    let mut adam = AdamState::new(cfg.lr, cfg.weight_decay);
    refine_batches(teacher, &mut student, &mut adam, &batches, cfg, 0)?;
    Ok(student)
}

fn refine_batches(
    teacher: &BranchParams,
    student: &mut BranchParams,
    adam: &mut AdamState,
    data: &DomainBatches,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(PseudoLabelSet, Option<LossReport>)> {
    let pl = filter_batch(teacher, &data.target, cfg.zeta)?;
    let conf = data.target.select(&pl.indices)?;
    let compact = pl.compact(&(0..pl.len()).collect::<Vec<_>>());
    let report = train_epochs(
        student,
        adam,
        &data.source,
        &data.source_labels,
        &conf,
        &compact,
        cfg,
        cfg.refine_epochs,
        seed,
    )?;
    Ok((pl, report))
}

/// Called after every history record with the model at that point.
pub type Checkpointer<'a> = dyn FnMut(&HistoryRecord, &TrainedModel) -> Result<()> + 'a;

/// Full two-stage training. Branch initialisation and minibatch order are
/// derived from `seed`.
pub fn run_negpr(
    data: &DomainBatches,
    feature_dim: usize,
    cfg: &ExperimentConfig,
    seed: u64,
    on_record: Option<&mut Checkpointer<'_>>,
) -> Result<(TrainedModel, RefinementHistory)> {
    cfg.validate()?;
    let start = Instant::now();
    let shape = cfg.branch_shape(feature_dim, data.num_classes);
    let kinds: Vec<BranchKind> = match cfg.ablation {
        Ablation::None => vec![BranchKind::Ib, BranchKind::Eb],
        other => vec![other.sole_branch().expect("ablation keeps one branch")],
    };
    let init = |kind: BranchKind| BranchParams::init(kind, shape, derive_seed(seed, kind as u64 + 1));
    let mut model = TrainedModel {
        ib: kinds
            .contains(&BranchKind::Ib)
            .then(|| init(BranchKind::Ib))
            .transpose()?,
        eb: kinds
            .contains(&BranchKind::Eb)
            .then(|| init(BranchKind::Eb))
            .transpose()?,
    };
    let mut history = RefinementHistory::default();
    let mut noop = |_: &HistoryRecord, _: &TrainedModel| Ok(());
    let on_record: &mut Checkpointer<'_> = match on_record {
        Some(f) => f,
        None => &mut noop,
    };
    let mut conf_sizes = [0usize; 2];
    // one optimiser per branch for the whole run
    let mut adams = [
        AdamState::new(cfg.lr, cfg.weight_decay),
        AdamState::new(cfg.lr, cfg.weight_decay),
    ];

    let record = |stage: Stage,
                  iter: usize,
                  branch: BranchKind,
                  report: Option<&LossReport>,
                  conf_sizes: [usize; 2],
                  model: &TrainedModel|
     -> Result<HistoryRecord> {
        let c = |name: &str| report.map_or(0.0, |r| r.component(name));
        let acc_target = match &data.target_eval_labels {
            Some(labels) => model.accuracy(&data.target, labels)?,
            None => f64::NAN,
        };
        Ok(HistoryRecord {
            stage,
            iter,
            branch,
            loss_total: report.map_or(0.0, |r| r.total),
            loss_sup: c(SUP),
            loss_noise: c(NOISE),
            loss_pseudo: c(PSEUDO_CE),
            loss_reg: c(TOLERANT_REG),
            n_conf_ib: conf_sizes[0],
            n_conf_eb: conf_sizes[1],
            acc_source: model.accuracy(&data.source, &data.source_labels)?,
            acc_target,
            seconds: start.elapsed().as_secs_f64(),
        })
    };

    for &kind in &kinds {
        let params = model.branch_mut(kind).expect("initialised above");
        let report = pretrain_batch(
            params,
            &mut adams[kind as usize],
            &data.source,
            &data.source_labels,
            cfg,
            derive_seed(seed, 10 + kind as u64),
        )?;
        let rec = record(Stage::Pretrain, 0, kind, report.as_ref(), conf_sizes, &model)?;
        on_record(&rec, &model)?;
        history.records.push(rec);
    }

    for iter in 1..=cfg.iterations {
        // IB teaches EB, then EB teaches IB; a lone branch teaches itself twice
        let schedule: [(BranchKind, BranchKind); 2] = match cfg.ablation.sole_branch() {
            None => [(BranchKind::Ib, BranchKind::Eb), (BranchKind::Eb, BranchKind::Ib)],
            Some(k) => [(k, k), (k, k)],
        };
        for (half, (teacher_kind, student_kind)) in schedule.into_iter().enumerate() {
            let teacher = model.branch(teacher_kind).expect("present").clone();
            let student = model.branch_mut(student_kind).expect("present");
            let step_seed = derive_seed(seed, 1000 + 2 * iter as u64 + half as u64);
            let (pl, report) = refine_batches(
                &teacher,
                student,
                &mut adams[student_kind as usize],
                data,
                cfg,
                step_seed,
            )?;
            conf_sizes[teacher_kind as usize] = pl.len();
            let rec = record(Stage::Refine, iter, student_kind, report.as_ref(), conf_sizes, &model)?;
            on_record(&rec, &model)?;
            history.records.push(rec);
        }
    }
    Ok((model, history))
}
