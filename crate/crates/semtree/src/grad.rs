//! Reverse-mode gradients specialized to the fixed encoding shape.
//!
//! Regression head: `r = Theta [x;1]`, `s = selector(z)`, `yhat = <s, r>`,
//! squared-error loss. Classification head: softmax cross-entropy over the
//! max-pooled class logits. Both backprop through the fixed masks and the
//! paired ReLU branches; the ReLU subgradient at exactly 0 is taken as 0 on
//! both branches, and max-pool ties route to the lowest leaf index.
//!
//! Everything here is pure given an immutable model snapshot; batch variants
//! fan out per sample and reduce in index order (see `exec`).

use thiserror::Error;

use crate::exec;
use crate::mat::{dot, Mat};
use crate::selectors::{self, BackwardKind, SelectorMode, SelectorOutput};
use crate::semnet::{ForwardTrace, SemNet, SemNetError};
use crate::tree::{LeafPayload, ObliqueTree, TreeError};

#[derive(Debug, Error, PartialEq)]
pub enum GradError {
    #[error(transparent)]
    Net(#[from] SemNetError),
    #[error(transparent)]
    Selector(#[from] selectors::SelectorError),
    #[error("selector mode does not match the trace it produced")]
    ModeTraceMismatch,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

impl From<TreeError> for GradError {
    fn from(e: TreeError) -> Self {
        GradError::Net(SemNetError::Tree(e))
    }
}

/// One affine regressor per leaf; row `l` is `(theta_l, alpha_l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorBank {
    pub(crate) theta: Mat,
}

impl RegressorBank {
    pub fn zeros(n_leaves: usize, dim: usize) -> Self {
        Self {
            theta: Mat::zeros(n_leaves, dim + 1),
        }
    }

    pub fn from_mat(theta: Mat) -> Self {
        Self { theta }
    }

    /// Extracts the regressor rows of a regression tree.
    pub fn from_tree(tree: &ObliqueTree) -> Result<Self, TreeError> {
        let dim = tree.dim();
        let mut theta = Mat::zeros(tree.leaves().len(), dim + 1);
        for (l, payload) in tree.leaves().iter().enumerate() {
            match payload {
                LeafPayload::Regressor { theta: t, alpha } => {
                    theta.row_mut(l)[..dim].copy_from_slice(t);
                    theta.row_mut(l)[dim] = *alpha;
                }
                LeafPayload::Class(_) => {
                    return Err(TreeError::PayloadMismatch {
                        expected: crate::tree::Task::Regress,
                        got: crate::tree::Task::Classify,
                    })
                }
            }
        }
        Ok(Self { theta })
    }

    pub fn n_leaves(&self) -> usize {
        self.theta.rows()
    }

    pub fn dim(&self) -> usize {
        self.theta.cols() - 1
    }

    pub fn params(&self) -> &Mat {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut Mat {
        &mut self.theta
    }

    /// All leaf outputs `<theta_l, x> + alpha_l`.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let dim = self.dim();
        (0..self.theta.rows())
            .map(|l| {
                let row = self.theta.row(l);
                dot(&row[..dim], x) + row[dim]
            })
            .collect()
    }

    /// Leaf payloads for extracting a plain tree.
    pub fn to_payloads(&self) -> Vec<LeafPayload> {
        let dim = self.dim();
        (0..self.theta.rows())
            .map(|l| {
                let row = self.theta.row(l);
                LeafPayload::Regressor {
                    theta: row[..dim].to_vec(),
                    alpha: row[dim],
                }
            })
            .collect()
    }
}

/// Gradients w.r.t. the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub ga: Mat,
    pub gb: Vec<f64>,
    /// Regression only: gradient for the regressor bank, shape n x (d+1).
    pub gtheta: Option<Mat>,
}

impl Gradients {
    pub fn zeros(net: &SemNet, with_theta: bool) -> Self {
        Self {
            ga: Mat::zeros(net.n_internal(), net.dim()),
            gb: vec![0.0; net.n_internal()],
            gtheta: with_theta.then(|| Mat::zeros(net.n_leaves(), net.dim() + 1)),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        self.ga.add_assign(&other.ga);
        for (a, b) in self.gb.iter_mut().zip(&other.gb) {
            *a += b;
        }
        match (&mut self.gtheta, &other.gtheta) {
            (Some(mine), Some(theirs)) => mine.add_assign(theirs),
            (None, None) => {}
            _ => panic!("Gradients::add_assign: mismatched gtheta presence"),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.ga.scale(factor);
        for v in &mut self.gb {
            *v *= factor;
        }
        if let Some(t) = &mut self.gtheta {
            t.scale(factor);
        }
    }
}

/// Cached forward pass of the regression head.
#[derive(Debug, Clone)]
pub struct RegTrace {
    pub x: Vec<f64>,
    pub forward: ForwardTrace,
    pub s: SelectorOutput,
    /// Leaf regressor outputs.
    pub r: Vec<f64>,
    pub yhat: f64,
}

/// Cached forward pass of the classification head.
#[derive(Debug, Clone)]
pub struct ClsTrace {
    pub x: Vec<f64>,
    pub forward: ForwardTrace,
    pub class_logits: Vec<f64>,
}

/// Regression forward: logits, selector weights, and `yhat = <s, r>`.
pub fn reg_forward(
    net: &SemNet,
    bank: &RegressorBank,
    x: &[f64],
    mode: SelectorMode,
) -> Result<RegTrace, GradError> {
    let forward = net.forward_logits(x)?;
    let s = selectors::apply(mode, &forward.z)?;
    let r = bank.eval(x);
    let yhat = dot(&s.s, &r);
    Ok(RegTrace {
        x: x.to_vec(),
        forward,
        s,
        r,
        yhat,
    })
}

/// Squared-error loss of a cached regression forward.
pub fn reg_loss(trace: &RegTrace, y: f64) -> f64 {
    let e = trace.yhat - y;
    e * e
}

/// Which regressor rows receive gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
enum ThetaScope {
    /// Weighted by the selector output (one row for one-hot selectors,
    /// the support rows for top-k).
    FromSelector,
    /// Only the argmax row, regardless of the selector (the hybrid variant).
    ArgmaxOnly,
}

/// Adds this sample's gradients into `acc` (no intermediate allocation of
/// a dense per-sample gradient).
fn accumulate_reg(net: &SemNet, trace: &RegTrace, y: f64, scope: ThetaScope, acc: &mut Gradients) {
    let dim = net.dim();
    let m = net.n_internal();
    let lprime = 2.0 * (trace.yhat - y);

    // Regressor rows: dL/dTheta_l = L' * s_l * [x; 1].
    let gtheta = acc.gtheta.as_mut().expect("regression gradients carry gtheta");
    match scope {
        ThetaScope::FromSelector => {
            for &l in &trace.s.support {
                let w = lprime * trace.s.s[l];
                let row = gtheta.row_mut(l);
                for (dst, xv) in row[..dim].iter_mut().zip(&trace.x) {
                    *dst += w * xv;
                }
                row[dim] += w;
            }
        }
        ThetaScope::ArgmaxOnly => {
            let l = trace.s.selected();
            let row = gtheta.row_mut(l);
            for (dst, xv) in row[..dim].iter_mut().zip(&trace.x) {
                *dst += lprime * xv;
            }
            row[dim] += lprime;
        }
    }

    // Logit gradient via the selector's backward rule, with upstream L' * r.
    let upstream: Vec<f64> = trace.r.iter().map(|rv| lprime * rv).collect();
    let dz = selectors::selector_backward(&trace.s, &upstream);

    // Through the fixed masks and the paired ReLUs into (A, b).
    let du = masked_relu_backward(net, &trace.forward, &dz, m);
    for i in 0..m {
        if du[i] != 0.0 {
            for (dst, xv) in acc.ga.row_mut(i).iter_mut().zip(&trace.x) {
                *dst += du[i] * xv;
            }
            acc.gb[i] += du[i];
        }
    }
}

fn backward_impl(net: &SemNet, trace: &RegTrace, y: f64, scope: ThetaScope) -> Gradients {
    let mut acc = Gradients::zeros(net, true);
    accumulate_reg(net, trace, y, scope, &mut acc);
    acc
}

/// `dL/du_i = sum_j dL/dz_j * (dtop[j][i] [u_i > 0] - dbot[j][i] [u_i < 0])`.
///
/// Exploits the mask structure: a row is all ones except along the leaf's
/// path, so with `S = sum_j dz_j`,
///
/// ```text
/// du_i = (S - sum of dz over left-descendants of i)   if u_i > 0
///      = -(S - sum of dz over right-descendants of i) if u_i < 0
/// ```
///
/// and the descendant sums come from walking only the paths of leaves with
/// nonzero dz (at most the selector support, or one leaf per class).
fn masked_relu_backward(net: &SemNet, forward: &ForwardTrace, dz: &[f64], m: usize) -> Vec<f64> {
    let mut left = vec![0.0; m];
    let mut right = vec![0.0; m];
    let mut total = 0.0;
    for (j, &dzj) in dz.iter().enumerate() {
        if dzj == 0.0 {
            continue;
        }
        total += dzj;
        for step in net.topology().path(j) {
            match step.branch {
                crate::tree::Branch::Left => left[step.node] += dzj,
                crate::tree::Branch::Right => right[step.node] += dzj,
            }
        }
    }
    let mut du = vec![0.0; m];
    for i in 0..m {
        if forward.u[i] > 0.0 {
            du[i] = total - left[i];
        } else if forward.u[i] < 0.0 {
            du[i] = -(total - right[i]);
        }
    }
    du
}

/// Regression backward for the selector mode the trace was produced with.
/// Fails if `mode` disagrees with the trace's backward tag.
pub fn reg_backward(
    net: &SemNet,
    trace: &RegTrace,
    y: f64,
    mode: SelectorMode,
) -> Result<Gradients, GradError> {
    let matches = matches!(
        (mode, trace.s.backward),
        (SelectorMode::Hardmax, BackwardKind::Zero)
            | (SelectorMode::Ste, BackwardKind::Identity)
            | (SelectorMode::TopK { .. }, BackwardKind::MaskedSoftmax { .. })
    );
    if !matches {
        return Err(GradError::ModeTraceMismatch);
    }
    Ok(backward_impl(net, trace, y, ThetaScope::FromSelector))
}

/// Hybrid backward: the router gradient of the trace's selector (top-k),
/// but regressor updates restricted to the argmax row.
pub fn reg_backward_hybrid(net: &SemNet, trace: &RegTrace, y: f64) -> Gradients {
    backward_impl(net, trace, y, ThetaScope::ArgmaxOnly)
}

/// Classification forward: max-pooled class logits with trace.
pub fn cls_forward(net: &SemNet, x: &[f64]) -> Result<ClsTrace, GradError> {
    let (class_logits, forward) = net.class_logits(x)?;
    Ok(ClsTrace {
        x: x.to_vec(),
        forward,
        class_logits,
    })
}

/// Numerically stable softmax probabilities.
fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy loss of a cached classification forward.
pub fn cls_loss(trace: &ClsTrace, label: usize) -> Result<f64, GradError> {
    let c = trace.class_logits.len();
    if label >= c {
        return Err(GradError::LabelOutOfRange { label, classes: c });
    }
    let max = trace
        .class_logits
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = trace
        .class_logits
        .iter()
        .map(|v| (v - max).exp())
        .sum::<f64>()
        .ln();
    Ok(max + log_sum - trace.class_logits[label])
}

/// Classification backward: softmax cross-entropy over the class logits;
/// each class's gradient flows to its recorded argmax leaf, then through the
/// masks and ReLUs as in the regression head.
pub fn cls_backward(net: &SemNet, trace: &ClsTrace, label: usize) -> Result<Gradients, GradError> {
    let c = trace.class_logits.len();
    if label >= c {
        return Err(GradError::LabelOutOfRange { label, classes: c });
    }
    let argmax = trace
        .forward
        .class_argmax
        .as_ref()
        .expect("classification trace carries per-class argmax");

    let mut upstream = softmax(&trace.class_logits);
    upstream[label] -= 1.0;

    let mut dz = vec![0.0; net.n_leaves()];
    for (class, &g) in upstream.iter().enumerate() {
        dz[argmax[class]] += g;
    }

    let m = net.n_internal();
    let du = masked_relu_backward(net, &trace.forward, &dz, m);
    let mut ga = Mat::zeros(m, net.dim());
    for i in 0..m {
        if du[i] != 0.0 {
            for (dst, xv) in ga.row_mut(i).iter_mut().zip(&trace.x) {
                *dst = du[i] * xv;
            }
        }
    }
    Ok(Gradients {
        ga,
        gb: du,
        gtheta: None,
    })
}

/// Router methods the training loops distinguish between.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouterMethod {
    /// Annealed top-k selection.
    TopK,
    /// Straight-through estimator throughout.
    Ste,
    /// Top-k router gradients, but only the argmax regressor row updates.
    TopKReg1,
}

impl RouterMethod {
    pub(crate) fn selector(self, k: usize, tau: f64) -> SelectorMode {
        match self {
            RouterMethod::Ste => SelectorMode::Ste,
            RouterMethod::TopK | RouterMethod::TopKReg1 => SelectorMode::TopK { k, tau },
        }
    }
}

/// Splits a batch into a fixed number of contiguous chunks. The count is a
/// constant so results never depend on how many worker threads exist.
const BATCH_CHUNKS: usize = 4;

fn fixed_chunks(batch: &[usize]) -> Vec<&[usize]> {
    if batch.is_empty() {
        return Vec::new();
    }
    let chunk_len = batch.len().div_ceil(BATCH_CHUNKS.min(batch.len()));
    batch.chunks(chunk_len).collect()
}

/// Mean regression gradient and mean loss over a batch of sample indices.
/// Chunks accumulate independently (in parallel under the `parallel`
/// feature) and merge in chunk order, so the result is bit-identical
/// regardless of threading.
pub fn batch_reg_gradients(
    net: &SemNet,
    bank: &RegressorBank,
    xs: &Mat,
    ys: &[f64],
    batch: &[usize],
    method: RouterMethod,
    k: usize,
    tau: f64,
) -> (Gradients, f64) {
    let mode = method.selector(k, tau);
    let chunks = fixed_chunks(batch);
    let partials = exec::map_collect(&chunks, |chunk| {
        let mut acc = Gradients::zeros(net, true);
        let mut loss = 0.0;
        for &i in *chunk {
            let trace = reg_forward(net, bank, xs.row(i), mode).expect("validated shapes");
            let scope = match method {
                RouterMethod::TopKReg1 => ThetaScope::ArgmaxOnly,
                _ => ThetaScope::FromSelector,
            };
            accumulate_reg(net, &trace, ys[i], scope, &mut acc);
            loss += reg_loss(&trace, ys[i]);
        }
        (acc, loss)
    });

    let mut total = Gradients::zeros(net, true);
    let mut loss = 0.0;
    for (g, l) in &partials {
        total.add_assign(g);
        loss += l;
    }
    let scale = 1.0 / batch.len().max(1) as f64;
    total.scale(scale);
    (total, loss * scale)
}

/// Mean classification gradient and mean cross-entropy over a batch, with
/// the same fixed-chunk reduction as [`batch_reg_gradients`].
pub fn batch_cls_gradients(
    net: &SemNet,
    xs: &Mat,
    labels: &[usize],
    batch: &[usize],
) -> (Gradients, f64) {
    let chunks = fixed_chunks(batch);
    let partials = exec::map_collect(&chunks, |chunk| {
        let mut acc = Gradients::zeros(net, false);
        let mut loss = 0.0;
        for &i in *chunk {
            let trace = cls_forward(net, xs.row(i)).expect("validated shapes");
            loss += cls_loss(&trace, labels[i]).expect("validated labels");
            let grads = cls_backward(net, &trace, labels[i]).expect("validated labels");
            acc.add_assign(&grads);
        }
        (acc, loss)
    });

    let mut total = Gradients::zeros(net, false);
    let mut loss = 0.0;
    for (g, l) in &partials {
        total.add_assign(g);
        loss += l;
    }
    let scale = 1.0 / batch.len().max(1) as f64;
    total.scale(scale);
    (total, loss * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semnet::ClassAssignment;
    use crate::tree::TreeTopology;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(
        height: u32,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> (SemNet, RegressorBank) {
        let topology = TreeTopology::complete(height);
        let m = topology.n_internal();
        let n = topology.n_leaves();
        let a = Mat::from_vec(m, dim, (0..m * dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        let b = (0..m).map(|_| rng.random_range(-0.3..0.3)).collect();
        let net = SemNet::regression(topology, a, b, dim).unwrap();
        let theta = Mat::from_vec(
            n,
            dim + 1,
            (0..n * (dim + 1)).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        (net, RegressorBank::from_mat(theta))
    }

    fn rand_x(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect()
    }

    /// Combined tolerance: relative agreement, or both within the finite-
    /// difference noise floor.
    fn close(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
        (analytic - numeric).abs() <= abs + rel * analytic.abs().max(numeric.abs())
    }

    /// Rejects inputs near ReLU or top-k tie surfaces so finite differences
    /// stay on one smooth piece.
    fn nondegenerate(net: &SemNet, x: &[f64], k: usize) -> bool {
        let trace = net.forward_unchecked(x);
        if trace.u.iter().any(|v| v.abs() < 1e-3) {
            return false;
        }
        let mut z = trace.z.clone();
        z.sort_by(f64::total_cmp);
        let n = z.len();
        if k < n && (z[n - k] - z[n - k - 1]).abs() < 1e-3 {
            return false;
        }
        true
    }

    #[test]
    fn hardmax_forward_equals_tree_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let (net, bank) = random_instance(3, 2, &mut rng);
        let tree = net.to_tree(bank.to_payloads()).unwrap();
        for _ in 0..200 {
            let x = rand_x(2, &mut rng);
            if net.forward_unchecked(&x).u.iter().any(|v| v.abs() < 1e-9) {
                continue;
            }
            let trace = reg_forward(&net, &bank, &x, SelectorMode::Hardmax).unwrap();
            assert_eq!(trace.yhat, tree.predict_reg(&x).unwrap());
        }
    }

    #[test]
    fn topk_full_support_equal_logits_is_mean() {
        // A = 0, b = 0 makes every logit 0; top-n softmax is uniform.
        let topology = TreeTopology::complete(2);
        let net = SemNet::regression(topology, Mat::zeros(3, 2), vec![0.0; 3], 2).unwrap();
        let theta = Mat::from_vec(
            4,
            3,
            vec![1.0, 0.0, 0.5, 0.0, 1.0, -0.5, 2.0, 2.0, 0.0, -1.0, 1.0, 1.0],
        );
        let bank = RegressorBank::from_mat(theta);
        let x = [0.3, -0.4];
        let trace = reg_forward(&net, &bank, &x, SelectorMode::TopK { k: 4, tau: 1.0 }).unwrap();
        let mean = trace.r.iter().sum::<f64>() / 4.0;
        assert!((trace.yhat - mean).abs() < 1e-12);
    }

    #[test]
    fn topk_forward_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let (net, bank) = random_instance(3, 3, &mut rng);
        for _ in 0..50 {
            let x = rand_x(3, &mut rng);
            let trace = reg_forward(&net, &bank, &x, SelectorMode::TopK { k: 2, tau: 0.5 }).unwrap();
            // Independent evaluation: softmax over the two largest logits.
            let z = &trace.forward.z;
            let mut order: Vec<usize> = (0..z.len()).collect();
            order.sort_by(|&i, &j| z[j].total_cmp(&z[i]).then(i.cmp(&j)));
            let (i0, i1) = (order[0], order[1]);
            let e0 = ((z[i0] - z[i0]) / 0.5).exp();
            let e1 = ((z[i1] - z[i0]) / 0.5).exp();
            let expected = (e0 * trace.r[i0] + e1 * trace.r[i1]) / (e0 + e1);
            assert!((trace.yhat - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn hardmax_backward_router_gradient_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let (net, bank) = random_instance(3, 2, &mut rng);
        let x = rand_x(2, &mut rng);
        let trace = reg_forward(&net, &bank, &x, SelectorMode::Hardmax).unwrap();
        let grads = reg_backward(&net, &trace, 0.7, SelectorMode::Hardmax).unwrap();
        assert!(grads.ga.as_slice().iter().all(|&v| v == 0.0));
        assert!(grads.gb.iter().all(|&v| v == 0.0));
        let gtheta = grads.gtheta.unwrap();
        let nonzero_rows = (0..gtheta.rows())
            .filter(|&r| gtheta.row(r).iter().any(|&v| v != 0.0))
            .count();
        assert_eq!(nonzero_rows, 1);
    }

    #[test]
    fn ste_vs_topk_theta_support_contrast() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let (net, bank) = random_instance(3, 2, &mut rng);
        let x = rand_x(2, &mut rng);
        let y = 0.25;

        let ste_trace = reg_forward(&net, &bank, &x, SelectorMode::Ste).unwrap();
        let ste_grads = reg_backward(&net, &ste_trace, y, SelectorMode::Ste).unwrap();
        let ste_rows = nonzero_rows(ste_grads.gtheta.as_ref().unwrap());
        assert_eq!(ste_rows, 1, "STE updates a single regressor");

        let mode = SelectorMode::TopK { k: 3, tau: 0.5 };
        let topk_trace = reg_forward(&net, &bank, &x, mode).unwrap();
        let topk_grads = reg_backward(&net, &topk_trace, y, mode).unwrap();
        let topk_rows = nonzero_rows(topk_grads.gtheta.as_ref().unwrap());
        assert_eq!(topk_rows, 3, "top-k updates k regressors");
    }

    fn nonzero_rows(m: &Mat) -> usize {
        (0..m.rows())
            .filter(|&r| m.row(r).iter().any(|&v| v != 0.0))
            .count()
    }

    #[test]
    fn hybrid_updates_one_regressor_but_k_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let (net, bank) = random_instance(3, 2, &mut rng);
        let x = rand_x(2, &mut rng);
        let mode = SelectorMode::TopK { k: 4, tau: 0.5 };
        let trace = reg_forward(&net, &bank, &x, mode).unwrap();
        let grads = reg_backward_hybrid(&net, &trace, 0.0);
        assert_eq!(nonzero_rows(grads.gtheta.as_ref().unwrap()), 1);

        let upstream: Vec<f64> = trace.r.iter().map(|r| 2.0 * (trace.yhat - 0.0) * r).collect();
        let dz = selectors::selector_backward(&trace.s, &upstream);
        assert!(dz.iter().filter(|&&v| v != 0.0).count() <= 4);
    }

    #[test]
    fn ste_composed_gradient_matches_symbolic_expansion() {
        // Complete height-2 tree over one feature, chosen so the decisions
        // are u0 > 0, u1 < 0, u2 > 0. STE pretends ds/dz = I, so
        // dL/dz_j = L' * r_j for EVERY leaf, and by hand from the masks:
        //   du0 = dz2 + dz3            (u0 > 0 keeps the top coefficients)
        //   du1 = -(dz0 + dz2 + dz3)   (u1 < 0 keeps the bottom ones)
        //   du2 = dz0 + dz1 + dz3
        // with gA_i = du_i * x and gb_i = du_i: all regressor outputs enter.
        let topology = TreeTopology::complete(2);
        let a = Mat::from_vec(3, 1, vec![1.0, 0.5, -0.7]);
        let b = vec![-0.1, -0.8, 1.0];
        let x = 0.6;
        let y = 1.5;
        let net = SemNet::regression(topology, a, b, 1).unwrap();
        let bank = RegressorBank::from_mat(Mat::from_vec(
            4,
            2,
            vec![0.5, -1.0, -0.25, 2.0, 1.5, 0.3, -0.4, 0.9],
        ));
        let trace = reg_forward(&net, &bank, &[x], SelectorMode::Ste).unwrap();
        assert!(trace.forward.u[0] > 0.0 && trace.forward.u[1] < 0.0 && trace.forward.u[2] > 0.0);
        let grads = reg_backward(&net, &trace, y, SelectorMode::Ste).unwrap();

        let r: Vec<f64> = bank.eval(&[x]);
        let lprime = 2.0 * (trace.yhat - y);
        let dz: Vec<f64> = r.iter().map(|rv| lprime * rv).collect();
        let du = [dz[2] + dz[3], -(dz[0] + dz[2] + dz[3]), dz[0] + dz[1] + dz[3]];
        for i in 0..3 {
            assert!((grads.gb[i] - du[i]).abs() < 1e-12, "gb[{i}]");
            assert!((grads.ga[(i, 0)] - du[i] * x).abs() < 1e-12, "ga[{i}]");
        }
    }

    #[test]
    fn topk_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let (net, bank) = random_instance(3, 2, &mut rng);
        let mode = SelectorMode::TopK { k: 2, tau: 0.5 };
        let eps = 1e-5;
        let mut checked = 0;
        while checked < 10 {
            let x = rand_x(2, &mut rng);
            if !nondegenerate(&net, &x, 2) {
                continue;
            }
            checked += 1;
            let y = rng.random_range(-1.0..1.0);
            let trace = reg_forward(&net, &bank, &x, mode).unwrap();
            let grads = reg_backward(&net, &trace, y, mode).unwrap();

            let loss_at = |net: &SemNet, bank: &RegressorBank| {
                let t = reg_forward(net, bank, &x, mode).unwrap();
                reg_loss(&t, y)
            };

            // A entries.
            for i in 0..net.n_internal() {
                for d in 0..2 {
                    let mut plus = net.clone();
                    plus.a[(i, d)] += eps;
                    let mut minus = net.clone();
                    minus.a[(i, d)] -= eps;
                    let numeric = (loss_at(&plus, &bank) - loss_at(&minus, &bank)) / (2.0 * eps);
                    let analytic = grads.ga[(i, d)];
                    assert!(
                        close(analytic, numeric, 1e-5, 1e-8),
                        "gA[{i},{d}]: {analytic} vs {numeric}"
                    );
                }
            }
            // b entries.
            for i in 0..net.n_internal() {
                let mut plus = net.clone();
                plus.b[i] += eps;
                let mut minus = net.clone();
                minus.b[i] -= eps;
                let numeric = (loss_at(&plus, &bank) - loss_at(&minus, &bank)) / (2.0 * eps);
                assert!(close(grads.gb[i], numeric, 1e-5, 1e-8));
            }
            // Theta entries.
            let gtheta = grads.gtheta.as_ref().unwrap();
            for l in 0..bank.n_leaves() {
                for d in 0..3 {
                    let mut plus = bank.clone();
                    plus.theta[(l, d)] += eps;
                    let mut minus = bank.clone();
                    minus.theta[(l, d)] -= eps;
                    let numeric = (loss_at(&net, &plus) - loss_at(&net, &minus)) / (2.0 * eps);
                    assert!(close(gtheta[(l, d)], numeric, 1e-5, 1e-8));
                }
            }
        }
    }

    #[test]
    fn cls_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let topology = TreeTopology::complete(3);
        let m = topology.n_internal();
        let a = Mat::from_vec(m, 2, (0..m * 2).map(|_| rng.random_range(-1.0..1.0)).collect());
        let b = (0..m).map(|_| rng.random_range(-0.3..0.3)).collect();
        let assignment = ClassAssignment::round_robin(topology.n_leaves(), 3).unwrap();
        let net = SemNet::classification(topology, a, b, 2, assignment).unwrap();

        let eps = 1e-5;
        let mut checked = 0;
        while checked < 10 {
            let x = rand_x(2, &mut rng);
            let trace = net.forward_unchecked(&x);
            if trace.u.iter().any(|v| v.abs() < 1e-3) {
                continue;
            }
            // Keep away from max-pool ties.
            let (logits, fwd) = net.class_logits(&x).unwrap();
            let arg = fwd.class_argmax.as_ref().unwrap();
            let mut tied = false;
            for (class, &leaf) in arg.iter().enumerate() {
                for (l, &z) in fwd.z.iter().enumerate() {
                    if l != leaf
                        && net.classes().unwrap().class_of(l) == class
                        && (z - logits[class]).abs() < 1e-3
                    {
                        tied = true;
                    }
                }
            }
            if tied {
                continue;
            }
            checked += 1;

            let label = rng.random_range(0..3);
            let ctrace = cls_forward(&net, &x).unwrap();
            let grads = cls_backward(&net, &ctrace, label).unwrap();

            let loss_at = |net: &SemNet| {
                let t = cls_forward(net, &x).unwrap();
                cls_loss(&t, label).unwrap()
            };
            for i in 0..net.n_internal() {
                for d in 0..2 {
                    let mut plus = net.clone();
                    plus.a[(i, d)] += eps;
                    let mut minus = net.clone();
                    minus.a[(i, d)] -= eps;
                    let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
                    let analytic = grads.ga[(i, d)];
                    assert!(
                        close(analytic, numeric, 1e-5, 1e-8),
                        "gA[{i},{d}]: {analytic} vs {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn cls_single_leaf_per_class_reduces_to_softmax_ce() {
        // With one leaf per class, max-pool is the identity and the head is
        // plain softmax cross-entropy over z.
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        let topology = TreeTopology::complete(2);
        let m = topology.n_internal();
        let n = topology.n_leaves();
        let a = Mat::from_vec(m, 2, (0..m * 2).map(|_| rng.random_range(-1.0..1.0)).collect());
        let b: Vec<f64> = (0..m).map(|_| rng.random_range(-0.3..0.3)).collect();
        let assignment = ClassAssignment::new((0..n).collect(), n).unwrap();
        let net = SemNet::classification(topology, a.clone(), b.clone(), 2, assignment).unwrap();

        let x = [0.4, -0.9];
        let label = 2usize;
        let trace = cls_forward(&net, &x).unwrap();
        let grads = cls_backward(&net, &trace, label).unwrap();

        // Oracle: softmax-CE gradient over z, pushed through masks/ReLU by
        // an independent loop.
        let fwd = net.forward_unchecked(&x);
        let mut dz = softmax(&fwd.z);
        dz[label] -= 1.0;
        let mut du = vec![0.0; m];
        for (j, &dzj) in dz.iter().enumerate() {
            for i in 0..m {
                let dt = net.masks().dtop()[(j, i)];
                let db = net.masks().dbot()[(j, i)];
                if fwd.u[i] > 0.0 {
                    du[i] += dzj * dt;
                } else if fwd.u[i] < 0.0 {
                    du[i] -= dzj * db;
                }
            }
        }
        for i in 0..m {
            assert!((grads.gb[i] - du[i]).abs() < 1e-12);
            for d in 0..2 {
                assert!((grads.ga[(i, d)] - du[i] * x[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cls_equal_logits_symmetric_upstream() {
        // c = 2 with identical class logits: upstream is [0.5, -0.5] for
        // label 1. Realized by a net whose z is symmetric: A = 0, b = 0.
        let topology = TreeTopology::complete(1);
        let assignment = ClassAssignment::round_robin(2, 2).unwrap();
        let net =
            SemNet::classification(topology, Mat::zeros(1, 1), vec![0.0], 1, assignment).unwrap();
        let trace = cls_forward(&net, &[0.7]).unwrap();
        assert_eq!(trace.class_logits[0], trace.class_logits[1]);
        let loss = cls_loss(&trace, 1).unwrap();
        assert!((loss - (2.0f64).ln()).abs() < 1e-15);
        // u = 0 exactly: the dead-at-zero subgradient stops the flow into
        // (A, b), which is the documented convention.
        let grads = cls_backward(&net, &trace, 1).unwrap();
        assert!(grads.gb.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cls_backward_rejects_bad_label() {
        let topology = TreeTopology::complete(1);
        let assignment = ClassAssignment::round_robin(2, 2).unwrap();
        let net =
            SemNet::classification(topology, Mat::zeros(1, 1), vec![0.1], 1, assignment).unwrap();
        let trace = cls_forward(&net, &[0.5]).unwrap();
        assert_eq!(
            cls_backward(&net, &trace, 2).unwrap_err(),
            GradError::LabelOutOfRange { label: 2, classes: 2 }
        );
    }

    #[test]
    fn batch_gradient_is_mean_of_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let (net, bank) = random_instance(2, 2, &mut rng);
        let xs = Mat::from_vec(
            8,
            2,
            (0..16).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let ys: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let batch: Vec<usize> = (0..8).collect();
        let mode = SelectorMode::TopK { k: 2, tau: 0.5 };

        let (batch_grads, batch_loss) =
            batch_reg_gradients(&net, &bank, &xs, &ys, &batch, RouterMethod::TopK, 2, 0.5);

        let mut expected = Gradients::zeros(&net, true);
        let mut expected_loss = 0.0;
        for &i in &batch {
            let trace = reg_forward(&net, &bank, xs.row(i), mode).unwrap();
            expected.add_assign(&reg_backward(&net, &trace, ys[i], mode).unwrap());
            expected_loss += reg_loss(&trace, ys[i]);
        }
        expected.scale(1.0 / 8.0);
        expected_loss /= 8.0;

        // The batch API reduces in fixed chunks, so grouping differs from a
        // plain left fold by rounding only.
        for (a, b) in batch_grads.ga.as_slice().iter().zip(expected.ga.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in batch_grads.gb.iter().zip(&expected.gb) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in batch_grads
            .gtheta
            .as_ref()
            .unwrap()
            .as_slice()
            .iter()
            .zip(expected.gtheta.as_ref().unwrap().as_slice())
        {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((batch_loss - expected_loss).abs() < 1e-12);
    }

    #[test]
    fn reg_backward_rejects_mode_trace_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let (net, bank) = random_instance(2, 2, &mut rng);
        let x = rand_x(2, &mut rng);
        let trace = reg_forward(&net, &bank, &x, SelectorMode::Ste).unwrap();
        assert_eq!(
            reg_backward(&net, &trace, 0.0, SelectorMode::Hardmax).unwrap_err(),
            GradError::ModeTraceMismatch
        );
    }
}
