//! Teacher-student ablation experiments.
//!
//! Root recovery: a random height-5 teacher over two features has its root
//! row fixed to a known target; students copy every teacher weight except
//! that row, which starts elsewhere, and only the row is trained (plain SGD)
//! under the straight-through estimator and under top-2 selection. Training
//! happens in the teacher's raw input space so the frozen weights stay
//! exactly optimal; progress is always evaluated with hard top-1 semantics.
//!
//! Leaf utilization: fresh students trained on the imbalanced synthetic data
//! with each router method, comparing how many leaves stay in active use.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{gen_imbalance, gen_teacher_tree, query_teacher};
use crate::exec;
use crate::grad::{batch_reg_gradients, RegressorBank, RouterMethod};
use crate::mat::{dot, Mat};
use crate::optim::sgd_step;
use crate::semnet::{argmax, SemNet};
use crate::tree::{ObliqueTree, TreeTopology};

use super::{init_regression, train_regression_with, TrainError, TrainPlan};

/// Target root weights and the student's starting point.
pub const ROOT_TARGET: [f64; 2] = [-0.55, 0.45];
pub const ROOT_INIT: [f64; 2] = [0.25, 0.25];

#[derive(Debug, Clone, PartialEq)]
pub struct RootRecoveryConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub n_samples: usize,
    pub init_w: [f64; 2],
    /// Record a trajectory point every this many steps.
    pub record_every: usize,
    pub k: usize,
    pub tau: f64,
}

impl RootRecoveryConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            epochs: 3,
            batch_size: 64,
            lr: 0.01,
            n_samples: 30_000,
            init_w: ROOT_INIT,
            record_every: 20,
            k: 2,
            tau: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RootStep {
    pub step: usize,
    pub w: [f64; 2],
    /// Hard top-1 loss on the minibatch that produced this step.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MethodTrajectory {
    pub steps: Vec<RootStep>,
    pub final_w: [f64; 2],
    pub final_dist: f64,
    /// Hard top-1 mean squared error over the full training set at the end.
    pub final_top1_loss: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RootRecoveryReport {
    pub target_w: [f64; 2],
    pub ste: MethodTrajectory,
    pub topk: MethodTrajectory,
}

fn hard_mse(net: &SemNet, bank: &RegressorBank, xs: &Mat, ys: &[f64], rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let dim = xs.cols();
    let errs = exec::map_collect(rows, |&i| {
        let x = xs.row(i);
        let leaf = argmax(&net.forward_unchecked(x).z);
        let row = bank.params().row(leaf);
        let e = dot(&row[..dim], x) + row[dim] - ys[i];
        e * e
    });
    errs.iter().sum::<f64>() / rows.len() as f64
}

fn run_root_recovery_method(
    teacher: &ObliqueTree,
    xs: &Mat,
    ys: &[f64],
    cfg: &RootRecoveryConfig,
    method: RouterMethod,
) -> MethodTrajectory {
    let mut net = SemNet::from_tree(teacher).expect("teacher converts");
    net.a.row_mut(0).copy_from_slice(&cfg.init_w);
    let bank = RegressorBank::from_tree(teacher).expect("teacher regressors");

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..xs.rows()).collect();
    let mut steps = Vec::new();
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (grads, _) =
                batch_reg_gradients(&net, &bank, xs, ys, batch, method, cfg.k, cfg.tau);
            // Only the root row trains; everything else stays frozen.
            let root_grad = grads.ga.row(0).to_vec();
            sgd_step(net.a.row_mut(0), &root_grad, cfg.lr);
            if step % cfg.record_every == 0 {
                steps.push(RootStep {
                    step,
                    w: [net.a[(0, 0)], net.a[(0, 1)]],
                    loss: hard_mse(&net, &bank, xs, ys, batch),
                });
            }
            step += 1;
        }
    }
    let final_w = [net.a[(0, 0)], net.a[(0, 1)]];
    let all_rows: Vec<usize> = (0..xs.rows()).collect();
    let final_top1_loss = hard_mse(&net, &bank, xs, ys, &all_rows);
    steps.push(RootStep { step, w: final_w, loss: final_top1_loss });
    let final_dist =
        ((final_w[0] - ROOT_TARGET[0]).powi(2) + (final_w[1] - ROOT_TARGET[1]).powi(2)).sqrt();
    MethodTrajectory {
        steps,
        final_w,
        final_dist,
        final_top1_loss,
    }
}

/// Root-weight recovery with the default configuration.
pub fn ablation_root_recovery(seed: u64) -> RootRecoveryReport {
    ablation_root_recovery_with(&RootRecoveryConfig::new(seed))
}

pub fn ablation_root_recovery_with(cfg: &RootRecoveryConfig) -> RootRecoveryReport {
    // Teacher: random height-5 tree over two features with the root row
    // pinned to the target weights.
    let base = gen_teacher_tree(cfg.seed, 5, 2);
    let mut a = base.hyperplanes().clone();
    a.row_mut(0).copy_from_slice(&ROOT_TARGET);
    let teacher = ObliqueTree::new(
        base.topology().clone(),
        a,
        base.biases().to_vec(),
        base.leaves().to_vec(),
        2,
        None,
    )
    .expect("teacher stays valid");

    // Raw-space data: the student shares the teacher's parameter space, so
    // no standardization is applied.
    let dataset = query_teacher(&teacher, cfg.seed, cfg.n_samples);
    let xs = &dataset.x_raw;
    let ys = dataset.values_raw().expect("regression targets");

    let ste = run_root_recovery_method(&teacher, xs, ys, cfg, RouterMethod::Ste);
    let topk = run_root_recovery_method(&teacher, xs, ys, cfg, RouterMethod::TopK);
    RootRecoveryReport {
        target_w: ROOT_TARGET,
        ste,
        topk,
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ImbalanceReport {
    pub seed: u64,
    /// Leaves counting as utilized need strictly more than this many
    /// training samples (N / (2n)).
    pub threshold: usize,
    pub topk_utilized: usize,
    pub hybrid_utilized: usize,
    pub ste_utilized: usize,
    pub topk_histogram: Vec<usize>,
    pub hybrid_histogram: Vec<usize>,
    pub ste_histogram: Vec<usize>,
}

/// Trains one student per router method on the imbalanced synthetic data
/// and compares final leaf utilization.
pub fn ablation_imbalance(seed: u64, epochs: usize) -> Result<ImbalanceReport, TrainError> {
    let data = gen_imbalance(seed);
    let height = 5u32;
    let n_leaves = 1usize << height;
    let threshold = data.train_idx.len() / (2 * n_leaves);

    let run = |method: RouterMethod| -> Result<Vec<usize>, TrainError> {
        let (net, bank) = init_regression(TreeTopology::complete(height), data.dim(), seed)?;
        let plan = TrainPlan::regression_default(epochs, seed);
        let (_, report) = train_regression_with(net, bank, &data, &plan, method)?;
        Ok(report.final_histogram.counts)
    };

    let topk_histogram = run(RouterMethod::TopK)?;
    let hybrid_histogram = run(RouterMethod::TopKReg1)?;
    let ste_histogram = run(RouterMethod::Ste)?;
    let utilized =
        |counts: &[usize]| -> usize { counts.iter().filter(|&&c| c > threshold).count() };

    Ok(ImbalanceReport {
        seed,
        threshold,
        topk_utilized: utilized(&topk_histogram),
        hybrid_utilized: utilized(&hybrid_histogram),
        ste_utilized: utilized(&ste_histogram),
        topk_histogram,
        hybrid_histogram,
        ste_histogram,
    })
}
