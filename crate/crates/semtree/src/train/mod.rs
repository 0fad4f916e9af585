//! Optimization loops.
//!
//! Regression training runs in two phases driven by the k-schedule. While
//! `k >= 2`, minibatch gradient steps update `(A, b, Theta)` jointly under
//! the chosen router method. Once the schedule reaches `k = 1`, `(A, b)` are
//! frozen (top-1 selection has a flat gradient anyway) and only the leaf
//! regressors are fitted: first on each leaf's AUGMENTED sample set (samples
//! for which the leaf is the first or second routing choice under the frozen
//! router), then, from the fine-tune boundary on, on the samples actually
//! routed to the leaf. The augmented assignment is computed once at phase-2
//! entry; the router is frozen, so it cannot change.
//!
//! Everything is deterministic under the plan's seed: batching, shuffling,
//! and gradient reductions all run in fixed order.

mod ablation;

pub use ablation::{
    ablation_imbalance, ablation_root_recovery, ImbalanceReport, MethodTrajectory,
    RootRecoveryConfig, RootRecoveryReport, RootStep,
};

use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::Dataset;
use crate::exec;
use crate::grad::{
    batch_cls_gradients, batch_reg_gradients, RegressorBank, RouterMethod,
};
use crate::mat::{dot, Mat};
use crate::optim::{Optimizer, OptimizerKind};
use crate::semnet::{argmax, ClassAssignment, SemNet, SemNetError};
use crate::tree::{ObliqueTree, Task, TreeTopology};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("training task requires a {expected} dataset")]
    TaskMismatch { expected: Task },
    #[error("model expects {model} features, dataset has {data}")]
    DimMismatch { model: usize, data: usize },
    #[error(transparent)]
    Net(#[from] SemNetError),
}

/// Piecewise-constant, non-increasing epoch-to-k map ending at 1.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KSchedule {
    /// `(start_epoch, k)` pairs; the first start must be 0.
    steps: Vec<(usize, usize)>,
}

impl KSchedule {
    pub fn new(steps: Vec<(usize, usize)>) -> Result<Self, TrainError> {
        if steps.is_empty() {
            return Err(TrainError::InvalidPlan("empty k-schedule".into()));
        }
        if steps[0].0 != 0 {
            return Err(TrainError::InvalidPlan(
                "k-schedule must start at epoch 0".into(),
            ));
        }
        for window in steps.windows(2) {
            if window[1].0 <= window[0].0 {
                return Err(TrainError::InvalidPlan(
                    "k-schedule epochs must be strictly increasing".into(),
                ));
            }
            if window[1].1 > window[0].1 {
                return Err(TrainError::InvalidPlan(
                    "k-schedule must be non-increasing in k".into(),
                ));
            }
        }
        let last_k = steps.last().unwrap().1;
        if last_k != 1 {
            return Err(TrainError::InvalidPlan(format!(
                "k-schedule must end at k = 1, ends at {last_k}"
            )));
        }
        if steps.iter().any(|&(_, k)| k == 0) {
            return Err(TrainError::InvalidPlan("k must be at least 1".into()));
        }
        Ok(Self { steps })
    }

    pub fn constant_one() -> Self {
        Self { steps: vec![(0, 1)] }
    }

    /// Anneal 4 -> 2 -> 1 at 50% and 80% of the epoch budget.
    pub fn default_anneal(epochs: usize) -> Self {
        if epochs <= 3 {
            return Self::constant_one();
        }
        Self::new(vec![(0, 4), (epochs / 2, 2), (epochs * 4 / 5, 1)])
            .expect("default schedule is valid")
    }

    pub fn k_at(&self, epoch: usize) -> usize {
        let mut k = self.steps[0].1;
        for &(start, step_k) in &self.steps {
            if epoch >= start {
                k = step_k;
            }
        }
        k
    }

    /// First epoch at which k = 1, if any phase-2 exists within `epochs`.
    pub fn phase2_start(&self, epochs: usize) -> Option<usize> {
        (0..epochs).find(|&e| self.k_at(e) == 1)
    }

    pub fn max_k(&self) -> usize {
        self.steps.iter().map(|&(_, k)| k).max().unwrap_or(1)
    }
}

impl FromStr for KSchedule {
    type Err = TrainError;

    /// Grammar: comma-separated `k:start_epoch` pairs with absolute epochs,
    /// e.g. `4:0,2:50,1:80`. A single bare `k` means that k from epoch 0.
    fn from_str(s: &str) -> Result<Self, TrainError> {
        let mut steps = Vec::new();
        for item in s.split(',') {
            let item = item.trim();
            let (k, start) = match item.split_once(':') {
                Some((k, start)) => (
                    k.trim().parse::<usize>().map_err(|_| {
                        TrainError::InvalidPlan(format!("bad k in schedule item '{item}'"))
                    })?,
                    start.trim().parse::<usize>().map_err(|_| {
                        TrainError::InvalidPlan(format!("bad epoch in schedule item '{item}'"))
                    })?,
                ),
                None => {
                    let k = item.parse::<usize>().map_err(|_| {
                        TrainError::InvalidPlan(format!("bad schedule item '{item}'"))
                    })?;
                    (k, 0)
                }
            };
            steps.push((start, k));
        }
        Self::new(steps)
    }
}

/// Everything the training loops need to know.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainPlan {
    pub epochs: usize,
    /// First epoch of the second fine-tuning stage (actual samples only).
    pub finetune_at: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub schedule: KSchedule,
    pub tau: f64,
    pub seed: u64,
    pub weight_decay: f64,
    /// Epochs at which to record a leaf-utilization histogram.
    pub snapshot_epochs: Vec<usize>,
    /// Fit leaf regressors by ridge least squares instead of gradient steps
    /// during phase 2.
    pub closed_form_finetune: bool,
    /// Early stopping for the joint phase: track the hard top-1 training
    /// loss each epoch and, after this many epochs without improvement,
    /// skip ahead to leaf fine-tuning. The best-seen parameters are
    /// restored at the phase boundary either way.
    #[serde(default)]
    pub patience: Option<usize>,
}

impl TrainPlan {
    pub fn regression_default(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            finetune_at: epochs * 9 / 10,
            lr: 0.01,
            batch_size: 128,
            optimizer: OptimizerKind::adam_default(),
            schedule: KSchedule::default_anneal(epochs),
            tau: 0.5,
            seed,
            weight_decay: 0.0,
            snapshot_epochs: Vec::new(),
            closed_form_finetune: false,
            patience: None,
        }
    }

    pub fn classification_default(epochs: usize, seed: u64) -> Self {
        Self {
            schedule: KSchedule::constant_one(),
            finetune_at: epochs,
            ..Self::regression_default(epochs, seed)
        }
    }

    pub fn validate(&self, n_leaves: usize) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidPlan("epochs must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::InvalidPlan("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidPlan("batch size must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(TrainError::InvalidPlan("temperature must be positive".into()));
        }
        if self.schedule.max_k() > n_leaves {
            return Err(TrainError::InvalidPlan(format!(
                "schedule k = {} exceeds {} leaves",
                self.schedule.max_k(),
                n_leaves
            )));
        }
        if self.finetune_at < self.epochs && self.schedule.k_at(self.finetune_at) != 1 {
            return Err(TrainError::InvalidPlan(
                "fine-tune boundary must fall in the k = 1 phase".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Selector k during the epoch (absent for classification).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k: Option<usize>,
    /// Mean per-sample training loss under the epoch's own semantics
    /// (selector loss in phase 1, hard top-1 loss in phase 2, cross-entropy
    /// for classification).
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HistogramSnapshot {
    pub epoch: usize,
    /// Training samples routed to each leaf under hard top-1 semantics.
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FinalMetrics {
    /// "rmse_std" or "accuracy".
    pub metric: String,
    pub train: f64,
    pub test: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_rmse_raw: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_rmse_raw: Option<f64>,
}

/// Training log; serializes to JSON deterministically. Wall-clock time is
/// kept out of the serialized form so identical runs produce identical
/// reports.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainReport {
    pub task: Task,
    pub selector: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub snapshots: Vec<HistogramSnapshot>,
    pub final_histogram: HistogramSnapshot,
    pub final_metrics: FinalMetrics,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    /// Per-epoch metrics as CSV with header `epoch,k,loss`.
    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,k,loss\n");
        for record in &self.epochs {
            let k = record.k.map_or(String::new(), |k| k.to_string());
            out.push_str(&format!("{},{},{}\n", record.epoch, k, record.loss));
        }
        out
    }
}

/// Unit-norm rows with uniformly random directions, zero biases, zero
/// regressors. Unit rows keep every starting split equally sharp, which
/// measurably improves structure discovery over box-uniform rows.
pub fn init_regression(
    topology: TreeTopology,
    dim: usize,
    seed: u64,
) -> Result<(SemNet, RegressorBank), TrainError> {
    let m = topology.n_internal();
    let n = topology.n_leaves();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = init_rows(m, dim, &mut rng);
    let net = SemNet::regression(topology, a, vec![0.0; m], dim)?;
    Ok((net, RegressorBank::zeros(n, dim)))
}

/// Same initialization with a round-robin leaf-to-class assignment.
pub fn init_classification(
    topology: TreeTopology,
    dim: usize,
    n_classes: usize,
    seed: u64,
) -> Result<SemNet, TrainError> {
    let m = topology.n_internal();
    let n = topology.n_leaves();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = init_rows(m, dim, &mut rng);
    let assignment = ClassAssignment::round_robin(n, n_classes)?;
    Ok(SemNet::classification(topology, a, vec![0.0; m], dim, assignment)?)
}

fn init_rows<R: Rng>(m: usize, dim: usize, rng: &mut R) -> Mat {
    let mut a = Mat::zeros(m, dim);
    for i in 0..m {
        let row = loop {
            let row: Vec<f64> = (0..dim)
                .map(|_| {
                    // Box-Muller standard normal.
                    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    (-2.0 * u1.ln()).sqrt() * u2.cos()
                })
                .collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-9 {
                break row.into_iter().map(|v| v / norm).collect::<Vec<f64>>();
            }
        };
        a.row_mut(i).copy_from_slice(&row);
    }
    a
}

/// Hard top-1 leaf index for every listed row.
fn hard_leaves(net: &SemNet, xs: &Mat, rows: &[usize]) -> Vec<usize> {
    exec::map_collect(rows, |&i| argmax(&net.forward_unchecked(xs.row(i)).z))
}

fn leaf_counts(net: &SemNet, xs: &Mat, rows: &[usize]) -> Vec<usize> {
    let mut counts = vec![0usize; net.n_leaves()];
    for leaf in hard_leaves(net, xs, rows) {
        counts[leaf] += 1;
    }
    counts
}

/// Mean squared error under hard routing.
fn hard_train_mse(net: &SemNet, bank: &RegressorBank, xs: &Mat, ys: &[f64], rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let errs = exec::map_collect(rows, |&i| {
        let x = xs.row(i);
        let leaf = argmax(&net.forward_unchecked(x).z);
        let row = bank.params().row(leaf);
        let dim = xs.cols();
        let pred = dot(&row[..dim], x) + row[dim];
        let e = pred - ys[i];
        e * e
    });
    errs.iter().sum::<f64>() / rows.len() as f64
}

/// Per-leaf sample assignments for phase 2, computed once under the frozen
/// router: `actual` holds each leaf's top-1 samples, `augmented` every
/// sample for which the leaf is the first or second choice.
struct Phase2Sets {
    actual: Vec<Vec<usize>>,
    augmented: Vec<Vec<usize>>,
}

impl Phase2Sets {
    fn compute(net: &SemNet, xs: &Mat, rows: &[usize]) -> Self {
        let n = net.n_leaves();
        let picks = exec::map_collect(rows, |&i| {
            let z = net.forward_unchecked(xs.row(i)).z;
            let first = argmax(&z);
            let mut second = None;
            for (j, &v) in z.iter().enumerate() {
                if j == first {
                    continue;
                }
                match second {
                    None => second = Some(j),
                    Some(s) if v > z[s] => second = Some(j),
                    _ => {}
                }
            }
            (i, first, second)
        });
        let mut actual = vec![Vec::new(); n];
        let mut augmented = vec![Vec::new(); n];
        for (i, first, second) in picks {
            actual[first].push(i);
            augmented[first].push(i);
            if let Some(second) = second {
                augmented[second].push(i);
            }
        }
        Self { actual, augmented }
    }
}

/// One pass of minibatch gradient fitting over each leaf's sample set.
/// Leaves with empty sets are skipped (their regressors stay untouched).
#[allow(clippy::too_many_arguments)]
fn finetune_leaves_gradient(
    bank: &mut RegressorBank,
    xs: &Mat,
    ys: &[f64],
    sets: &[Vec<usize>],
    plan: &TrainPlan,
    leaf_opts: &mut [Optimizer],
    rng: &mut ChaCha8Rng,
) {
    let dim = xs.cols();
    for (leaf, samples) in sets.iter().enumerate() {
        if samples.is_empty() {
            continue;
        }
        let mut order = samples.clone();
        order.shuffle(rng);
        for batch in order.chunks(plan.batch_size) {
            let mut grad = vec![0.0; dim + 1];
            for &i in batch {
                let x = xs.row(i);
                let row = bank.params().row(leaf);
                let pred = dot(&row[..dim], x) + row[dim];
                let lprime = 2.0 * (pred - ys[i]);
                for (g, xv) in grad[..dim].iter_mut().zip(x) {
                    *g += lprime * xv;
                }
                grad[dim] += lprime;
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grad {
                *g *= scale;
            }
            leaf_opts[leaf].step(0, bank.params_mut().row_mut(leaf), &grad);
        }
    }
}

/// Ridge least-squares fit of each leaf's regressor on its sample set.
fn finetune_leaves_ridge(bank: &mut RegressorBank, xs: &Mat, ys: &[f64], sets: &[Vec<usize>]) {
    let dim = xs.cols();
    let p = dim + 1;
    let lambda = 1e-6;
    for (leaf, samples) in sets.iter().enumerate() {
        if samples.is_empty() {
            continue;
        }
        // Normal equations over [x; 1].
        let mut gram = vec![0.0; p * p];
        let mut rhs = vec![0.0; p];
        for &i in samples {
            let x = xs.row(i);
            for a in 0..p {
                let xa = if a < dim { x[a] } else { 1.0 };
                rhs[a] += xa * ys[i];
                for b in 0..p {
                    let xb = if b < dim { x[b] } else { 1.0 };
                    gram[a * p + b] += xa * xb;
                }
            }
        }
        for a in 0..p {
            gram[a * p + a] += lambda;
        }
        if let Some(solution) = solve_linear(&mut gram, &mut rhs, p) {
            bank.params_mut().row_mut(leaf).copy_from_slice(&solution);
        }
    }
}

/// Gaussian elimination with partial pivoting; `None` for singular systems.
fn solve_linear(a: &mut [f64], b: &mut [f64], n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * n + col].abs() < 1e-12 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col * n + k] * x[k];
        }
        x[col] = acc / a[col * n + col];
    }
    Some(x)
}

fn rmse_of(preds: &[f64], targets: &[f64]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let sse: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    (sse / preds.len() as f64).sqrt()
}

/// Trains the regression model with the given router method and extracts
/// the hard tree.
pub fn train_regression_with(
    mut net: SemNet,
    mut bank: RegressorBank,
    data: &Dataset,
    plan: &TrainPlan,
    method: RouterMethod,
) -> Result<(ObliqueTree, TrainReport), TrainError> {
    let start = Instant::now();
    if data.task != Task::Regress {
        return Err(TrainError::TaskMismatch { expected: Task::Regress });
    }
    if data.dim() != net.dim() {
        return Err(TrainError::DimMismatch { model: net.dim(), data: data.dim() });
    }
    plan.validate(net.n_leaves())?;

    let xs = &data.x;
    let ys = data.values_std().expect("regression targets");
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut order = data.train_idx.clone();

    let a_len = net.n_internal() * net.dim();
    let b_len = net.n_internal();
    let theta_len = net.n_leaves() * (net.dim() + 1);
    let mut opt = Optimizer::new(
        plan.optimizer,
        plan.lr,
        plan.weight_decay,
        &[a_len, b_len, theta_len],
    );

    let mut report = TrainReport {
        task: Task::Regress,
        selector: method_name(method).to_string(),
        seed: plan.seed,
        epochs: Vec::new(),
        snapshots: Vec::new(),
        final_histogram: HistogramSnapshot { epoch: plan.epochs, counts: Vec::new() },
        final_metrics: FinalMetrics {
            metric: "rmse_std".into(),
            train: 0.0,
            test: 0.0,
            train_rmse_raw: None,
            test_rmse_raw: None,
        },
        wall_clock_secs: 0.0,
    };

    let mut phase2: Option<Phase2Sets> = None;
    let mut leaf_opts: Vec<Optimizer> = Vec::new();
    let mut stage2_reset_done = false;
    // Patience bookkeeping for the joint phase: best hard-loss snapshot of
    // (A, b, Theta), restored at the phase boundary.
    let mut stop_joint = false;
    let mut best_joint: Option<(f64, Mat, Vec<f64>, Mat)> = None;
    let mut stale_epochs = 0usize;
    let final_joint_k = (0..plan.epochs)
        .map(|e| plan.schedule.k_at(e))
        .filter(|&k| k >= 2)
        .min()
        .unwrap_or(2);

    let mut prev_k: Option<usize> = None;
    for epoch in 0..plan.epochs {
        let k = plan.schedule.k_at(epoch);
        let joint = k >= 2 && !stop_joint;
        let loss = if joint {
            // Fresh optimizer moments at each k level: the objective changes
            // discontinuously and stale second moments amplify the shock.
            if prev_k.is_some_and(|p| p != k) {
                opt = Optimizer::new(
                    plan.optimizer,
                    plan.lr,
                    plan.weight_decay,
                    &[a_len, b_len, theta_len],
                );
            }
            prev_k = Some(k);
            order.shuffle(&mut rng);
            let mut acc = 0.0;
            for batch in order.chunks(plan.batch_size) {
                let (grads, batch_loss) =
                    batch_reg_gradients(&net, &bank, xs, ys, batch, method, k, plan.tau);
                opt.step(0, net.a.as_mut_slice(), grads.ga.as_slice());
                opt.step(1, &mut net.b, &grads.gb);
                opt.step(
                    2,
                    bank.params_mut().as_mut_slice(),
                    grads.gtheta.expect("regression gradients").as_slice(),
                );
                acc += batch_loss * batch.len() as f64;
            }
            // Patience watches the last joint k-level only; earlier levels
            // optimize a much softer objective whose hard loss stagnates by
            // design.
            if let (Some(patience), true) = (plan.patience, k == final_joint_k) {
                let hard = hard_train_mse(&net, &bank, xs, ys, &data.train_idx);
                let improved = best_joint.as_ref().map_or(true, |(b, ..)| hard < *b);
                if improved {
                    best_joint =
                        Some((hard, net.a.clone(), net.b.clone(), bank.params().clone()));
                    stale_epochs = 0;
                } else {
                    stale_epochs += 1;
                    if stale_epochs > patience {
                        stop_joint = true;
                    }
                }
            }
            acc / order.len().max(1) as f64
        } else {
            // Phase 2: router frozen, fit regressors only.
            if phase2.is_none() {
                if let Some((_, a, b, theta)) = best_joint.take() {
                    net.a = a;
                    net.b = b;
                    *bank.params_mut() = theta;
                }
            }
            let sets = phase2
                .get_or_insert_with(|| Phase2Sets::compute(&net, xs, &data.train_idx));
            let augmented_stage = epoch < plan.finetune_at;
            let active = if augmented_stage { &sets.augmented } else { &sets.actual };
            if leaf_opts.is_empty() || (!augmented_stage && !stage2_reset_done) {
                leaf_opts = (0..net.n_leaves())
                    .map(|_| {
                        Optimizer::new(plan.optimizer, plan.lr, plan.weight_decay, &[net.dim() + 1])
                    })
                    .collect();
                if !augmented_stage {
                    stage2_reset_done = true;
                }
            }
            if plan.closed_form_finetune {
                finetune_leaves_ridge(&mut bank, xs, ys, active);
            } else {
                finetune_leaves_gradient(&mut bank, xs, ys, active, plan, &mut leaf_opts, &mut rng);
            }
            hard_train_mse(&net, &bank, xs, ys, &data.train_idx)
        };

        report.epochs.push(EpochRecord { epoch, k: Some(if joint { k } else { 1 }), loss });
        if plan.snapshot_epochs.contains(&epoch) {
            report.snapshots.push(HistogramSnapshot {
                epoch,
                counts: leaf_counts(&net, xs, &data.train_idx),
            });
        }
    }

    report.final_histogram = HistogramSnapshot {
        epoch: plan.epochs,
        counts: leaf_counts(&net, xs, &data.train_idx),
    };

    let tree = net
        .to_tree(bank.to_payloads())?
        .with_preprocess(data.preprocess.clone());

    let predict_rows = |rows: &[usize]| -> (Vec<f64>, Vec<f64>) {
        let preds =
            exec::map_collect(rows, |&i| tree.predict_reg(xs.row(i)).expect("shapes checked"));
        let targets: Vec<f64> = rows.iter().map(|&i| ys[i]).collect();
        (preds, targets)
    };
    let (train_preds, train_targets) = predict_rows(&data.train_idx);
    let (test_preds, test_targets) = predict_rows(&data.test_idx);
    let target_std = data.preprocess.target_std.unwrap_or(1.0);
    report.final_metrics = FinalMetrics {
        metric: "rmse_std".into(),
        train: rmse_of(&train_preds, &train_targets),
        test: rmse_of(&test_preds, &test_targets),
        train_rmse_raw: Some(rmse_of(&train_preds, &train_targets) * target_std),
        test_rmse_raw: Some(rmse_of(&test_preds, &test_targets) * target_std),
    };
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((tree, report))
}

fn method_name(method: RouterMethod) -> &'static str {
    match method {
        RouterMethod::TopK => "topk",
        RouterMethod::Ste => "ste",
        RouterMethod::TopKReg1 => "topk-reg1",
    }
}

/// Annealed top-k training (the default regression recipe).
pub fn train_regression(
    net: SemNet,
    bank: RegressorBank,
    data: &Dataset,
    plan: &TrainPlan,
) -> Result<(ObliqueTree, TrainReport), TrainError> {
    train_regression_with(net, bank, data, plan, RouterMethod::TopK)
}

/// Straight-through baseline; `hybrid_reg1` switches to the top-k router
/// gradient with single-regressor updates instead.
pub fn train_regression_ste(
    net: SemNet,
    bank: RegressorBank,
    data: &Dataset,
    plan: &TrainPlan,
    hybrid_reg1: bool,
) -> Result<(ObliqueTree, TrainReport), TrainError> {
    let method = if hybrid_reg1 { RouterMethod::TopKReg1 } else { RouterMethod::Ste };
    train_regression_with(net, bank, data, plan, method)
}

/// Minibatch cross-entropy descent on `(A, b)`; leaf labels stay fixed.
pub fn train_classification(
    mut net: SemNet,
    data: &Dataset,
    plan: &TrainPlan,
) -> Result<(ObliqueTree, TrainReport), TrainError> {
    let start = Instant::now();
    if data.task != Task::Classify {
        return Err(TrainError::TaskMismatch { expected: Task::Classify });
    }
    if data.dim() != net.dim() {
        return Err(TrainError::DimMismatch { model: net.dim(), data: data.dim() });
    }
    plan.validate(net.n_leaves())?;
    let assignment = net.classes().ok_or(SemNetError::NotClassification)?;
    let (labels, n_classes) = data.labels().expect("classification labels");
    if n_classes > assignment.n_classes() {
        return Err(TrainError::InvalidPlan(format!(
            "dataset has {n_classes} classes, model only {}",
            assignment.n_classes()
        )));
    }

    let xs = &data.x;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut order = data.train_idx.clone();
    let a_len = net.n_internal() * net.dim();
    let b_len = net.n_internal();
    let mut opt = Optimizer::new(plan.optimizer, plan.lr, plan.weight_decay, &[a_len, b_len]);

    let mut report = TrainReport {
        task: Task::Classify,
        selector: "none".into(),
        seed: plan.seed,
        epochs: Vec::new(),
        snapshots: Vec::new(),
        final_histogram: HistogramSnapshot { epoch: plan.epochs, counts: Vec::new() },
        final_metrics: FinalMetrics {
            metric: "accuracy".into(),
            train: 0.0,
            test: 0.0,
            train_rmse_raw: None,
            test_rmse_raw: None,
        },
        wall_clock_secs: 0.0,
    };

    for epoch in 0..plan.epochs {
        order.shuffle(&mut rng);
        let mut acc = 0.0;
        for batch in order.chunks(plan.batch_size) {
            let (grads, batch_loss) = batch_cls_gradients(&net, xs, labels, batch);
            opt.step(0, net.a.as_mut_slice(), grads.ga.as_slice());
            opt.step(1, &mut net.b, &grads.gb);
            acc += batch_loss * batch.len() as f64;
        }
        let loss = acc / order.len().max(1) as f64;
        report.epochs.push(EpochRecord { epoch, k: None, loss });
        if plan.snapshot_epochs.contains(&epoch) {
            report.snapshots.push(HistogramSnapshot {
                epoch,
                counts: leaf_counts(&net, xs, &data.train_idx),
            });
        }
    }

    report.final_histogram = HistogramSnapshot {
        epoch: plan.epochs,
        counts: leaf_counts(&net, xs, &data.train_idx),
    };

    let tree = net.to_class_tree()?.with_preprocess(data.preprocess.clone());
    let accuracy_on = |rows: &[usize]| -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        let hits = exec::map_collect(rows, |&i| {
            (tree.predict_class(xs.row(i)).expect("shapes checked") == labels[i]) as usize
        });
        hits.iter().sum::<usize>() as f64 / rows.len() as f64
    };
    report.final_metrics.train = accuracy_on(&data.train_idx);
    report.final_metrics.test = accuracy_on(&data.test_idx);
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((tree, report))
}
