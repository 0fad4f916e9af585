//! SGD and Adam parameter updates over flat slices.

/// Plain descent: `p <- p - lr * g`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) {
    assert_eq!(params.len(), grads.len(), "sgd_step: shape mismatch");
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

/// First/second moment buffers plus the step counter for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One Adam update with bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    assert_eq!(params.len(), grads.len(), "adam_step: shape mismatch");
    assert_eq!(params.len(), state.m.len(), "adam_step: state mismatch");
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer over a fixed set of parameter tensors, addressed by index.
/// Deterministic given the sequence of `step` calls.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    states: Vec<AdamState>,
    scratch: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, tensor_lens: &[usize]) -> Self {
        let states = match kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adam { .. } => tensor_lens.iter().map(|&l| AdamState::new(l)).collect(),
        };
        Self {
            kind,
            lr,
            weight_decay,
            states,
            scratch: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, tensor: usize, params: &mut [f64], grads: &[f64]) {
        let grads = if self.weight_decay > 0.0 {
            self.scratch.clear();
            self.scratch
                .extend(grads.iter().zip(params.iter()).map(|(g, p)| g + self.weight_decay * p));
            &self.scratch[..]
        } else {
            grads
        };
        match self.kind {
            OptimizerKind::Sgd => sgd_step(params, grads, self.lr),
            OptimizerKind::Adam { beta1, beta2, eps } => adam_step(
                params,
                grads,
                &mut self.states[tensor],
                self.lr,
                beta1,
                beta2,
                eps,
            ),
        }
    }
}
