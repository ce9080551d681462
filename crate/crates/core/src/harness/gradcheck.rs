//! Finite-difference verification of every training loss, through both
//! branches where the loss acts on parameters.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::branch::{BranchKind, BranchParams, BranchShape, GraphBatch};
use crate::error::Result;
use crate::graph::{random_graph, GraphInstance};
use crate::numeric::{argmax, finite_diff_grad, l2_norm, relative_error, softmax, softmax_rows, FD_STEP, LOG_FLOOR};
use crate::objectives::{
    build_neighbor_graph, kl_to_targets, neighbor_targets, noise_loss, pretrain_loss, pseudo_label_gradient,
    refine_loss, supervised_loss, tolerant_reg, with_flipped_reg_sign, NeighborGraph,
};
use crate::refine::PseudoLabelSet;

/// Largest accepted relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Gradients smaller than this are not compared.
const NORM_FLOOR: f64 = 1e-6;
const FEATURE_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradcheckOptions {
    pub trials: usize,
    pub seed: u64,
    /// Invert the regulariser gradient before checking; the run must fail.
    pub flip_reg_sign: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            trials: 100,
            seed: 0,
            flip_reg_sign: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub compared: usize,
    /// Instances whose gradient norm was below the comparison floor.
    pub skipped: usize,
    pub worst_rel_err: f64,
    pub worst_instance: String,
    pub passed: bool,
}

/// Which closed form of the regulariser gradient agrees with finite
/// differences of `-log⟨softmax(z), q⟩`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignCheck {
    /// Worst error of `p_c (⟨p,q⟩ - q_c) / ⟨p,q⟩`.
    pub expanded_worst_err: f64,
    /// Best error of the opposite sign, `p_c (q_c - ⟨p,q⟩) / ⟨p,q⟩`.
    pub opposite_best_err: f64,
    /// Worst error of the implemented gradient.
    pub implemented_worst_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub trials: usize,
    pub checks: Vec<CheckResult>,
    pub sign: SignCheck,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<16} {:>8} {:>8} {:>12}  worst instance\n",
            "check", "compared", "skipped", "max rel err"
        );
        for c in &self.checks {
            s += &format!(
                "{:<16} {:>8} {:>8} {:>12.3e}  {}{}\n",
                c.name,
                c.compared,
                c.skipped,
                c.worst_rel_err,
                c.worst_instance,
                if c.passed { "" } else { "  FAIL" }
            );
        }
        s += &format!(
            "sign: expanded form max err {:.3e}, opposite sign min err {:.3e}, implemented max err {:.3e}{}\n",
            self.sign.expanded_worst_err,
            self.sign.opposite_best_err,
            self.sign.implemented_worst_err,
            if self.sign.passed { "" } else { "  FAIL" }
        );
        s += if self.passed {
            "all checks passed\n"
        } else {
            "gradient check FAILED\n"
        };
        s
    }
}

#[derive(Default)]
struct Tally {
    compared: usize,
    skipped: usize,
    worst: f64,
    worst_instance: String,
}

impl Tally {
    fn add(&mut self, analytic: &[f64], numeric: &[f64], instance: impl FnOnce() -> String) {
        if l2_norm(analytic).max(l2_norm(numeric)) <= NORM_FLOOR {
            self.skipped += 1;
            return;
        }
        self.compared += 1;
        let err = relative_error(analytic, numeric);
        // NaN counts as worst and is never replaced
        if !self.worst.is_nan() && (err.is_nan() || err > self.worst) {
            self.worst = err;
            self.worst_instance = instance();
        }
    }

    fn finish(self, name: &str) -> CheckResult {
        CheckResult {
            name: name.to_string(),
            compared: self.compared,
            skipped: self.skipped,
            passed: self.worst < GRADCHECK_TOL,
            worst_rel_err: self.worst,
            worst_instance: self.worst_instance,
        }
    }
}

/// A random problem: a small source batch, a target batch, both branches.
struct Instance {
    classes: usize,
    source: GraphBatch,
    labels: Vec<usize>,
    target: GraphBatch,
    pl: PseudoLabelSet,
    beta: f64,
    lambda: f64,
    k: usize,
    branches: [BranchParams; 2],
}

fn random_graphs(rng: &mut ChaCha8Rng, count: usize) -> Result<Vec<GraphInstance>> {
    (0..count)
        .map(|_| {
            let n = rng.random_range(1..=6);
            random_graph(n, 0.45, FEATURE_DIM, None, rng.random())
        })
        .collect()
}

fn instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let classes = rng.random_range(2..=6);
    let n = rng.random_range(3..=8);
    let n_target = rng.random_range(1..=8);
    let shape = BranchShape {
        feature_dim: FEATURE_DIM,
        hidden: 5,
        layers: 2,
        num_classes: classes,
        max_path_len: 2,
    };
    let mut branches = [
        BranchParams::init(BranchKind::Ib, shape, rng.random())?,
        BranchParams::init(BranchKind::Eb, shape, rng.random())?,
    ];
    // nonzero biases keep hidden units off the ReLU kink
    for p in &mut branches {
        for layer in p.layers.iter_mut().chain(std::iter::once(&mut p.head)) {
            layer.bias.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        }
    }
    let m = rng.random_range(1..=n_target.min(3));
    let mut indices = sample(rng, n_target, m).into_vec();
    indices.sort_unstable();
    let teacher_logits = Array2::from_shape_fn((m, classes), |_| rng.random_range(-3.0..3.0));
    let teacher_probs = softmax_rows(&teacher_logits);
    let labels_pl: Vec<usize> = teacher_probs.rows().into_iter().map(argmax).collect();
    let confidences = labels_pl
        .iter()
        .enumerate()
        .map(|(j, &l)| teacher_probs[[j, l]])
        .collect();
    Ok(Instance {
        classes,
        source: GraphBatch::new(&random_graphs(rng, n)?, Some(2))?,
        labels: (0..n).map(|_| rng.random_range(0..classes)).collect(),
        target: GraphBatch::new(&random_graphs(rng, n_target)?, Some(2))?,
        pl: PseudoLabelSet {
            indices,
            labels: labels_pl,
            confidences,
            teacher_probs,
            teacher: BranchKind::Ib,
            threshold: 0.0,
        },
        beta: rng.random_range(0.1..2.0),
        lambda: rng.random_range(0.1..2.0),
        k: rng.random_range(1..n.min(4)),
        branches,
    })
}

/// Mean over the pseudo-labelled rows of `-log p_ỹ - λ log⟨p, q⟩`.
fn pseudo_objective(target_logits: &Array2<f64>, pl: &PseudoLabelSet, lambda: f64) -> f64 {
    let m = pl.len() as f64;
    pl.indices
        .iter()
        .enumerate()
        .map(|(j, &i)| {
            let p = softmax(target_logits.row(i));
            let q = pl.teacher_probs.row(j);
            -p[pl.labels[j]].max(LOG_FLOOR).ln() - lambda * p.dot(&q).max(LOG_FLOOR).ln()
        })
        .sum::<f64>()
        / m
}

fn mean_ce(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -softmax(logits.row(i))[y].max(LOG_FLOOR).ln())
        .sum::<f64>()
        / labels.len() as f64
}

struct ParamChecks {
    sup: Tally,
    noise: Tally,
    pre: Tally,
    refine: Tally,
}

fn check_params(inst: &Instance, p: &BranchParams, describe: &dyn Fn() -> String, out: &mut ParamChecks) -> Result<()> {
    let (out_s, cache_s) = p.forward_train(&inst.source)?;
    let (out_t, cache_t) = p.forward_train(&inst.target)?;
    let ng: NeighborGraph = build_neighbor_graph(&out_s.embeddings, inst.k)?;
    // neighbour mixtures are constants of the analytic gradient
    let targets = neighbor_targets(&out_s.logits, &ng)?;
    let x0 = p.to_flat();
    let logits_at = |x: &[f64], batch: &GraphBatch| -> Array2<f64> {
        p.with_flat(x)
            .and_then(|q| q.forward(batch))
            .map(|o| o.logits)
            .unwrap_or_else(|_| Array2::from_elem((1, 1), f64::NAN))
    };
    let fd = |f: &dyn Fn(&[f64]) -> f64| finite_diff_grad(f, &x0, FD_STEP);

    let (_, g) = supervised_loss(out_s.logits.view(), &inst.labels)?;
    let analytic = p.backward(&inst.source, &out_s, &cache_s, &g)?.to_flat();
    let numeric = fd(&|x| mean_ce(&logits_at(x, &inst.source), &inst.labels))?;
    out.sup.add(&analytic, &numeric, describe);

    let (_, g) = noise_loss(&out_s.logits, &ng)?;
    let analytic = p.backward(&inst.source, &out_s, &cache_s, &g)?.to_flat();
    let numeric = fd(&|x| kl_to_targets(logits_at(x, &inst.source).view(), targets.view()).0)?;
    out.noise.add(&analytic, &numeric, describe);

    let report = pretrain_loss(&out_s.logits, &inst.labels, &ng, inst.beta)?;
    let analytic = p
        .backward(&inst.source, &out_s, &cache_s, &report.grad_source)?
        .to_flat();
    let pre_value = |x: &[f64]| {
        let z = logits_at(x, &inst.source);
        mean_ce(&z, &inst.labels) + inst.beta * kl_to_targets(z.view(), targets.view()).0
    };
    let numeric = fd(&pre_value)?;
    out.pre.add(&analytic, &numeric, describe);

    let report = refine_loss(
        &out_s.logits,
        &inst.labels,
        &ng,
        &out_t.logits,
        &inst.pl,
        inst.beta,
        inst.lambda,
    )?;
    let gs = p
        .backward(&inst.source, &out_s, &cache_s, &report.grad_source)?
        .to_flat();
    let gt = p
        .backward(&inst.target, &out_t, &cache_t, &report.grad_target)?
        .to_flat();
    let analytic: Vec<f64> = gs.iter().zip(&gt).map(|(a, b)| a + b).collect();
    let numeric = fd(&|x| pre_value(x) + pseudo_objective(&logits_at(x, &inst.target), &inst.pl, inst.lambda))?;
    out.refine.add(&analytic, &numeric, describe);
    Ok(())
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

/// Run the full suite. With `flip_reg_sign` the regulariser gradient is
/// inverted on the calling thread for the duration of the run.
pub fn cmd_gradcheck(opts: GradcheckOptions) -> Result<GradcheckReport> {
    if opts.flip_reg_sign {
        with_flipped_reg_sign(|| run(opts))
    } else {
        run(opts)
    }
}

fn run(opts: GradcheckOptions) -> Result<GradcheckReport> {
    if opts.trials == 0 {
        return Err(crate::error::NegprError::Config("trials must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = ParamChecks {
        sup: Tally::default(),
        noise: Tally::default(),
        pre: Tally::default(),
        refine: Tally::default(),
    };
    let mut re = Tally::default();
    let mut reg = Tally::default();
    let mut pseudo = Tally::default();
    let mut expanded_worst: f64 = 0.0;
    let mut opposite_best = f64::INFINITY;
    let mut implemented_worst: f64 = 0.0;

    for trial in 0..opts.trials {
        let inst = instance(&mut rng)?;
        for p in &inst.branches {
            let describe = || {
                format!(
                    "trial {trial} {} C={} batch={}",
                    p.kind,
                    inst.classes,
                    inst.labels.len()
                )
            };
            check_params(&inst, p, &describe, &mut params)?;
        }
        let tag = || format!("trial {trial} C={} batch={}", inst.classes, inst.labels.len());

        // pseudo-label terms as a function of the target logits
        let zt = Array2::from_shape_fn((inst.target.num_graphs(), inst.classes), |_| {
            rng.random_range(-3.0..3.0)
        });
        let zs = Array2::from_shape_fn((inst.labels.len(), inst.classes), |_| rng.random_range(-3.0..3.0));
        let ng = build_neighbor_graph(&zs, inst.k)?;
        let report = refine_loss(&zs, &inst.labels, &ng, &zt, &inst.pl, inst.beta, inst.lambda)?;
        let numeric = finite_diff_grad(
            |x| {
                pseudo_objective(
                    &Array2::from_shape_vec(zt.raw_dim(), x.to_vec()).unwrap(),
                    &inst.pl,
                    inst.lambda,
                )
            },
            &flat(&zt),
            FD_STEP,
        )?;
        re.add(&flat(&report.grad_target), &numeric, tag);

        // per-sample regulariser and combined gradient
        let z: Array1<f64> = Array1::from_shape_fn(inst.classes, |_| rng.random_range(-3.0..3.0));
        let q = softmax(Array1::from_shape_fn(inst.classes, |_| rng.random_range(-3.0..3.0)).view());
        let y = rng.random_range(0..inst.classes);
        let p = softmax(z.view());
        let reg_fd = finite_diff_grad(
            |x| -softmax(ArrayView1::from(x)).dot(&q).max(LOG_FLOOR).ln(),
            z.as_slice().unwrap(),
            FD_STEP,
        )?;
        let (_, g) = tolerant_reg(p.view(), q.view());
        reg.add(g.as_slice().unwrap(), &reg_fd, tag);
        let pseudo_fd = finite_diff_grad(
            |x| {
                let p = softmax(ArrayView1::from(x));
                -p[y].max(LOG_FLOOR).ln() - inst.lambda * p.dot(&q).max(LOG_FLOOR).ln()
            },
            z.as_slice().unwrap(),
            FD_STEP,
        )?;
        let lg = pseudo_label_gradient(p.view(), q.view(), y, inst.lambda);
        pseudo.add(lg.as_slice().unwrap(), &pseudo_fd, tag);

        if l2_norm(&reg_fd) > NORM_FLOOR {
            let s = p.dot(&q);
            let expanded: Vec<f64> = p.iter().zip(&q).map(|(pc, qc)| pc * (s - qc) / s).collect();
            let opposite: Vec<f64> = expanded.iter().map(|v| -v).collect();
            expanded_worst = expanded_worst.max(relative_error(&expanded, &reg_fd));
            opposite_best = opposite_best.min(relative_error(&opposite, &reg_fd));
            implemented_worst = implemented_worst.max(relative_error(g.as_slice().unwrap(), &reg_fd));
        }
    }

    let checks = vec![
        params.sup.finish("L_sup"),
        params.noise.finish("L_noise"),
        params.pre.finish("L_pre"),
        params.refine.finish("L_refine"),
        re.finish("L_Re"),
        reg.finish("tolerant_reg"),
        pseudo.finish("pseudo_label_gradient"),
    ];
    let sign_passed =
        expanded_worst < GRADCHECK_TOL && implemented_worst < GRADCHECK_TOL && opposite_best > GRADCHECK_TOL;
    let sign = SignCheck {
        expanded_worst_err: expanded_worst,
        opposite_best_err: opposite_best,
        implemented_worst_err: implemented_worst,
        passed: sign_passed,
    };
    let passed = sign.passed && checks.iter().all(|c| c.passed && c.compared > 0);
    Ok(GradcheckReport {
        trials: opts.trials,
        checks,
        sign,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_passes() {
        let report = cmd_gradcheck(GradcheckOptions {
            trials: 5,
            ..Default::default()
        })
        .unwrap();
        assert!(report.passed, "{}", report.render());
        assert_eq!(report.checks.len(), 7);
    }

    #[test]
    fn flipped_sign_is_caught_and_scoped() {
        let opts = GradcheckOptions {
            trials: 3,
            flip_reg_sign: true,
            ..Default::default()
        };
        let report = cmd_gradcheck(opts).unwrap();
        assert!(!report.passed);
        assert!(!report.sign.passed);
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        assert!(
            failed.contains(&"tolerant_reg") && failed.contains(&"pseudo_label_gradient"),
            "{failed:?}"
        );
        // the hook is released afterwards
        assert!(
            cmd_gradcheck(GradcheckOptions {
                trials: 2,
                ..Default::default()
            })
            .unwrap()
            .passed
        );
    }

    #[test]
    fn zero_trials_is_a_config_error() {
        let err = cmd_gradcheck(GradcheckOptions {
            trials: 0,
            ..Default::default()
        })
        .unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
