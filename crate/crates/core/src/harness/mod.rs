//! Experiment driver behind the command-line tool: multi-seed training,
//! parameter sweeps, gradient verification and dataset partitioning.

mod gradcheck;

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{NegprError, Result};
use crate::graph::{
    inject_label_noise, parse_tudataset, partition_by_quantile, synth_two_domain, write_tudataset, DensityMetric,
    DomainDataset, DomainTag,
};
use crate::refine::{run_negpr, DomainBatches, HistoryRecord, RefinementHistory, Stage, TrainedModel};

pub use gradcheck::{cmd_gradcheck, CheckResult, GradcheckOptions, GradcheckReport, SignCheck, GRADCHECK_TOL};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "NEGPR_THREADS";

pub fn worker_threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(NegprError::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Source and target domains for one seed. Synthetic data is regenerated
/// from the seed; directory datasets are read as-is and share a class
/// numbering.
pub fn load_domains(cfg: &ExperimentConfig, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    match (&cfg.source, &cfg.target) {
        (DataSource::Synthetic, DataSource::Synthetic) => synth_two_domain(cfg.n_source, cfg.n_target, seed),
        (DataSource::Dir(s), DataSource::Dir(t)) => {
            let name = |src: &DataSource| {
                src.dataset_name()
                    .ok_or_else(|| NegprError::Config(format!("cannot take a dataset name from {src}")))
            };
            let mut source = parse_tudataset(s, &name(&cfg.source)?)?;
            let mut target = parse_tudataset(t, &name(&cfg.target)?)?.with_tag(DomainTag::Target)?;
            DomainDataset::align_classes(&mut source, &mut target);
            Ok((source, target))
        }
        _ => Err(NegprError::Config(
            "source and target must both be `synthetic` or both be dataset directories".into(),
        )),
    }
}

/// Outcome of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Final target accuracy; `None` when the target has no labels.
    pub target_acc: Option<f64>,
    /// Target accuracy right after pretraining.
    pub pretrain_target_acc: Option<f64>,
    /// Final accuracy on the (noisy) training labels.
    pub source_acc: f64,
    /// Final accuracy on the source labels before noise injection.
    pub source_clean_acc: f64,
    pub num_flipped: usize,
    pub history_file: String,
    pub ib_hash: Option<String>,
    pub eb_hash: Option<String>,
}

/// Everything `summary.json` holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedResult>,
    pub target_acc_mean: Option<f64>,
    pub target_acc_std: Option<f64>,
    pub source_acc_mean: f64,
    pub source_acc_std: f64,
    /// Wall time; not covered by determinism.
    pub elapsed_seconds: f64,
}

impl RunResult {
    /// The summary with timing zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> RunResult {
        RunResult {
            elapsed_seconds: 0.0,
            ..self.clone()
        }
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn noise_seed(seed: u64) -> u64 {
    seed ^ 0x5ee_d0f1_abe1
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| NegprError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| NegprError::io(path, e))
}

fn write_history(path: &Path, history: &RefinementHistory) -> Result<()> {
    let mut buf = Vec::new();
    history.write_csv(&mut buf)?;
    write_file(path, &buf)
}

fn save_model(dir: &Path, model: &TrainedModel) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| NegprError::io(dir, e))?;
    if let Some(ib) = &model.ib {
        ib.save(dir.join("ib.json"))?;
    }
    if let Some(eb) = &model.eb {
        eb.save(dir.join("eb.json"))?;
    }
    Ok(())
}

/// Train one seed and write its history and checkpoints under `out`.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<SeedResult> {
    let (source, target) = load_domains(cfg, seed)?;
    let clean = source.required_labels()?;
    let noise = inject_label_noise(&clean, cfg.noise_ratio, source.num_classes, noise_seed(seed))?;
    let noisy = source.with_labels(&noise.noisy_labels)?;
    let data = DomainBatches::new(&noisy, &target, cfg.path_len)?;

    let ckpt_root = out.join("checkpoints").join(format!("seed{seed}"));
    let mut so_far = RefinementHistory::default();
    let mut refine_halves = 0usize;
    let per_iter = 2;
    let mut on_record = |rec: &HistoryRecord, model: &TrainedModel| -> Result<()> {
        so_far.records.push(rec.clone());
        if rec.stage == Stage::Refine {
            refine_halves += 1;
            let iter = refine_halves / per_iter;
            if refine_halves.is_multiple_of(per_iter)
                && cfg.checkpoint_every > 0
                && iter.is_multiple_of(cfg.checkpoint_every)
            {
                let dir = ckpt_root.join(format!("iter{iter}"));
                save_model(&dir, model)?;
                write_history(&dir.join("history.csv"), &so_far)?;
            }
        }
        Ok(())
    };
    let (model, history) = run_negpr(&data, noisy.feature_dim(), cfg, seed, Some(&mut on_record))?;
    save_model(&ckpt_root.join("final"), &model)?;

    let history_file = format!("history_seed{seed}.csv");
    write_history(&out.join(&history_file), &history)?;

    let last = history
        .last()
        .ok_or_else(|| NegprError::Data("training produced no history".into()))?;
    let pretrain_last = history.records.iter().rev().find(|r| r.stage == Stage::Pretrain);
    Ok(SeedResult {
        seed,
        target_acc: finite(last.acc_target),
        pretrain_target_acc: pretrain_last.and_then(|r| finite(r.acc_target)),
        source_acc: last.acc_source,
        source_clean_acc: model.accuracy(&data.source, &clean)?,
        num_flipped: noise.num_flipped(),
        history_file,
        ib_hash: model.ib.as_ref().map(|p| p.content_hash()),
        eb_hash: model.eb.as_ref().map(|p| p.content_hash()),
    })
}

/// Train every configured seed and write `summary.json` to `cfg.output_dir`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let start = Instant::now();
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| NegprError::io(&out, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads()?.min(cfg.seeds.len()))
        .build()
        .map_err(|e| NegprError::Config(format!("cannot start worker threads: {e}")))?;
    let per_seed: Vec<SeedResult> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| train_seed(cfg, seed, &out))
            .collect::<Result<Vec<_>>>()
    })?;

    let target: Option<Vec<f64>> = per_seed.iter().map(|r| r.target_acc).collect();
    let target_stats = target.map(|t| mean_std(&t));
    let source: Vec<f64> = per_seed.iter().map(|r| r.source_acc).collect();
    let (source_acc_mean, source_acc_std) = mean_std(&source);
    let result = RunResult {
        config: cfg.clone(),
        seeds: cfg.seeds.clone(),
        per_seed,
        target_acc_mean: target_stats.map(|s| s.0),
        target_acc_std: target_stats.map(|s| s.1),
        source_acc_mean,
        source_acc_std,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    };
    write_file(
        &out.join("summary.json"),
        serde_json::to_string_pretty(&result)?.as_bytes(),
    )?;
    Ok(result)
}

/// Hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Zeta,
    Alpha,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Zeta => "zeta",
            SweepParam::Alpha => "alpha",
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig, value: f64) {
        match self {
            SweepParam::Zeta => cfg.zeta = value,
            SweepParam::Alpha => cfg.noise_ratio = value,
        }
    }
}

impl FromStr for SweepParam {
    type Err = NegprError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeta" => Ok(SweepParam::Zeta),
            "alpha" | "noise_ratio" => Ok(SweepParam::Alpha),
            _ => Err(NegprError::Config(format!(
                "cannot sweep {s:?}; expected zeta or alpha"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
}

/// One full multi-seed run per value; writes `sweep_<param>.csv` to
/// `cfg.output_dir` and each run's files to `<param>_<value>/` below it.
pub fn cmd_sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(NegprError::Config("sweep needs at least one value".into()));
    }
    let mut configs = Vec::with_capacity(values.len());
    for &v in values {
        let mut c = cfg.clone();
        param.apply(&mut c, v);
        c.output_dir = cfg.output_dir.join(format!("{}_{v}", param.name()));
        c.validate()?;
        configs.push(c);
    }
    let mut rows = Vec::with_capacity(values.len());
    for (c, &value) in configs.iter().zip(values) {
        let run = cmd_train(c)?;
        let (mean_acc, std_acc) = match (run.target_acc_mean, run.target_acc_std) {
            (Some(m), Some(s)) => (m, s),
            _ => return Err(NegprError::Data("sweeps need labelled target graphs".into())),
        };
        rows.push(SweepRow {
            value,
            mean_acc,
            std_acc,
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| NegprError::Data(format!("cannot finish sweep csv: {e}")))?;
    write_file(&cfg.output_dir.join(format!("sweep_{}.csv", param.name())), &bytes)?;
    Ok(rows)
}

/// Split the dataset in `data` into `parts` quantile chunks of `metric` and
/// write each as `<out>/<name><k>/`.
pub fn cmd_partition(data: &Path, metric: DensityMetric, parts: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let name = data
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| NegprError::Config(format!("cannot take a dataset name from {}", data.display())))?;
    let ds = parse_tudataset(data, &name)?;
    partition_by_quantile(&ds, metric, parts)?
        .into_iter()
        .map(|part| {
            let dir = out.join(&part.name);
            write_tudataset(&part, &dir)?;
            Ok(dir)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_small_cases() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-15 && (s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sweep_param_names() {
        assert_eq!("zeta".parse::<SweepParam>().unwrap(), SweepParam::Zeta);
        assert_eq!("alpha".parse::<SweepParam>().unwrap(), SweepParam::Alpha);
        assert!("beta".parse::<SweepParam>().is_err());
    }

    #[test]
    fn mixed_sources_are_rejected() {
        let mut cfg = ExperimentConfig::desk();
        cfg.target = DataSource::Dir("somewhere/X".into());
        assert!(matches!(load_domains(&cfg, 0), Err(NegprError::Config(_))));
    }
}
