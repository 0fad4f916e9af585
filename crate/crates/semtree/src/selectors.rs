//! Leaf-selection functions over logits.
//!
//! Three selectors share one output contract: weights `s` summing to 1 with
//! an explicit support set, plus a tag describing how gradients flow back
//! through the selection.
//!
//! * `hardmax` — one-hot at the argmax; no gradient reaches the logits.
//! * `ste` — hardmax forward, identity Jacobian backward, so the upstream
//!   gradient passes to every logit unchanged.
//! * `topk` — keeps the `k` largest logits and renormalizes them with a
//!   temperature softmax; the mask is treated as a constant in backward, so
//!   gradients stay supported on the selected entries.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SelectorError {
    #[error("selector input is empty")]
    EmptyInput,
    #[error("k = {k} out of range for {n} logits")]
    KOutOfRange { k: usize, n: usize },
    #[error("temperature must be positive, got {tau}")]
    NonPositiveTemperature { tau: f64 },
}

/// Which selector to run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectorMode {
    Hardmax,
    Ste,
    TopK { k: usize, tau: f64 },
}

/// How upstream gradients on `s` map back to gradients on `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BackwardKind {
    /// `ds/dz = 0` almost everywhere (hardmax).
    Zero,
    /// `ds/dz` pretended to be the identity (straight-through).
    Identity,
    /// Softmax Jacobian restricted to the fixed support.
    MaskedSoftmax { tau: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorOutput {
    /// Selection weights; nonnegative, sum to 1, zero off support.
    pub s: Vec<f64>,
    /// Indices of the nonzero entries, in descending logit order.
    pub support: Vec<usize>,
    pub backward: BackwardKind,
}

impl SelectorOutput {
    /// Index of the selected leaf (largest weight; for hardmax/STE the
    /// single support entry, for top-k the largest logit's index).
    pub fn selected(&self) -> usize {
        self.support[0]
    }
}

/// Argmax index with ties resolved to the lowest index.
fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// One-hot vector at the argmax. No gradient flows back.
pub fn hardmax(z: &[f64]) -> Result<SelectorOutput, SelectorError> {
    if z.is_empty() {
        return Err(SelectorError::EmptyInput);
    }
    let best = argmax(z);
    let mut s = vec![0.0; z.len()];
    s[best] = 1.0;
    Ok(SelectorOutput {
        s,
        support: vec![best],
        backward: BackwardKind::Zero,
    })
}

/// Straight-through estimator: identical to hardmax in the forward pass,
/// but flagged so backward treats the Jacobian as the identity.
pub fn ste(z: &[f64]) -> Result<SelectorOutput, SelectorError> {
    let mut out = hardmax(z)?;
    out.backward = BackwardKind::Identity;
    Ok(out)
}

/// Indices of the `k` largest logits. Ties at the k-th value admit the
/// lower index. Returned in descending logit order.
fn top_k_indices(z: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&i, &j| z[j].partial_cmp(&z[i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));
    order.truncate(k);
    order
}

/// Temperature softmax over the `k` largest logits; everything else is
/// exactly zero. The masked-out entries never enter the computation, so no
/// `-inf` arithmetic occurs, and the max is subtracted before exponentiation.
pub fn topk(z: &[f64], k: usize, tau: f64) -> Result<SelectorOutput, SelectorError> {
    if z.is_empty() {
        return Err(SelectorError::EmptyInput);
    }
    if k == 0 || k > z.len() {
        return Err(SelectorError::KOutOfRange { k, n: z.len() });
    }
    if !(tau > 0.0) {
        return Err(SelectorError::NonPositiveTemperature { tau });
    }
    let support = top_k_indices(z, k);
    let zmax = z[support[0]];
    let mut s = vec![0.0; z.len()];
    let mut sum = 0.0;
    for &i in &support {
        let e = ((z[i] - zmax) / tau).exp();
        s[i] = e;
        sum += e;
    }
    for &i in &support {
        s[i] /= sum;
    }
    Ok(SelectorOutput {
        s,
        support,
        backward: BackwardKind::MaskedSoftmax { tau },
    })
}

/// Runs the selector described by `mode`.
pub fn apply(mode: SelectorMode, z: &[f64]) -> Result<SelectorOutput, SelectorError> {
    match mode {
        SelectorMode::Hardmax => hardmax(z),
        SelectorMode::Ste => ste(z),
        SelectorMode::TopK { k, tau } => topk(z, k, tau),
    }
}

/// Gradient of a loss w.r.t. the logits given the upstream gradient on `s`,
/// for a top-k output: the softmax Jacobian restricted to the support,
///
/// ```text
/// dL/dz_j = s_j * (g_j - <g, s>) / tau      for j in support, else 0.
/// ```
///
/// Panics if `upstream` and `s` have different lengths.
pub fn topk_backward(output: &SelectorOutput, upstream: &[f64], tau: f64) -> Vec<f64> {
    assert_eq!(
        upstream.len(),
        output.s.len(),
        "topk_backward: upstream length mismatch"
    );
    let mut grad = vec![0.0; output.s.len()];
    let inner: f64 = output
        .support
        .iter()
        .map(|&i| upstream[i] * output.s[i])
        .sum();
    for &i in &output.support {
        grad[i] = output.s[i] * (upstream[i] - inner) / tau;
    }
    grad
}

/// Dispatches backward on the output's tag. Hardmax yields zeros, STE passes
/// the upstream through unchanged, top-k applies [`topk_backward`].
pub fn selector_backward(output: &SelectorOutput, upstream: &[f64]) -> Vec<f64> {
    assert_eq!(
        upstream.len(),
        output.s.len(),
        "selector_backward: upstream length mismatch"
    );
    match output.backward {
        BackwardKind::Zero => vec![0.0; upstream.len()],
        BackwardKind::Identity => upstream.to_vec(),
        BackwardKind::MaskedSoftmax { tau } => topk_backward(output, upstream, tau),
    }
}
