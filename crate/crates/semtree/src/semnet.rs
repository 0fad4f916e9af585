//! Network encoding of a hard oblique tree.
//!
//! The encoding keeps the tree's hyperplane parameters `(A, b)` trainable and
//! wires them through a fixed structure: `u = A x + b`, paired branch
//! activations `top = relu(u)` / `bot = relu(-u)`, and one logit per leaf
//!
//! ```text
//! z_j = sum_i ( dtop[j][i] * top[i] + dbot[j][i] * bot[i] )
//! ```
//!
//! where the 0/1 masks `dtop`/`dbot` drop the branch activation that
//! disagrees with leaf `j`'s path. The leaf with the maximal logit is exactly
//! the leaf hard routing selects, so the encoding is invertible and lossless:
//! [`SemNet::from_tree`] and [`SemNet::to_tree`] round-trip all parameters.

use thiserror::Error;

use crate::mat::Mat;
use crate::tree::{Branch, LeafPayload, ObliqueTree, Task, TreeError, TreeTopology};

#[derive(Debug, Error, PartialEq)]
pub enum SemNetError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("class {class} has no assigned leaf")]
    ClassWithoutLeaf { class: usize },
    #[error("{classes} classes cannot be assigned to {leaves} leaves")]
    TooManyClasses { classes: usize, leaves: usize },
    #[error("leaf {leaf} assigned to class {class}, but only {classes} classes exist")]
    AssignmentOutOfRange { leaf: usize, class: usize, classes: usize },
    #[error("network has no class assignment; build it for classification")]
    NotClassification,
}

/// Fixed 0/1 coefficients of the logit layer, one row per leaf.
///
/// For leaf `j` and internal node `i`: both entries are 1 when `i` is not an
/// ancestor of `j`; the entry for the branch leading away from `j` is 0 when
/// it is (`dtop` zero for left-descendants, `dbot` zero for right-descendants).
#[derive(Debug, Clone, PartialEq)]
pub struct PathMasks {
    dtop: Mat,
    dbot: Mat,
}

impl PathMasks {
    pub fn dtop(&self) -> &Mat {
        &self.dtop
    }

    pub fn dbot(&self) -> &Mat {
        &self.dbot
    }
}

/// Builds the logit-layer masks from the topology's root-to-leaf paths.
pub fn build_masks(topology: &TreeTopology) -> PathMasks {
    let m = topology.n_internal();
    let n = topology.n_leaves();
    let mut dtop = Mat::from_vec(n, m, vec![1.0; n * m]);
    let mut dbot = Mat::from_vec(n, m, vec![1.0; n * m]);
    for leaf in 0..n {
        for step in topology.path(leaf) {
            match step.branch {
                Branch::Left => dtop[(leaf, step.node)] = 0.0,
                Branch::Right => dbot[(leaf, step.node)] = 0.0,
            }
        }
    }
    PathMasks { dtop, dbot }
}

/// Fixed leaf-to-class wiring for the classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAssignment {
    leaf_class: Vec<usize>,
    n_classes: usize,
}

impl ClassAssignment {
    pub fn new(leaf_class: Vec<usize>, n_classes: usize) -> Result<Self, SemNetError> {
        if n_classes > leaf_class.len() {
            return Err(SemNetError::TooManyClasses {
                classes: n_classes,
                leaves: leaf_class.len(),
            });
        }
        let mut covered = vec![false; n_classes];
        for (leaf, &class) in leaf_class.iter().enumerate() {
            if class >= n_classes {
                return Err(SemNetError::AssignmentOutOfRange {
                    leaf,
                    class,
                    classes: n_classes,
                });
            }
            covered[class] = true;
        }
        if let Some(class) = covered.iter().position(|&c| !c) {
            return Err(SemNetError::ClassWithoutLeaf { class });
        }
        Ok(Self { leaf_class, n_classes })
    }

    /// Leaf `l` gets class `l mod c`, so every class owns either
    /// `floor(n/c)` or `ceil(n/c)` leaves.
    pub fn round_robin(n_leaves: usize, n_classes: usize) -> Result<Self, SemNetError> {
        Self::new((0..n_leaves).map(|l| l % n_classes).collect(), n_classes)
    }

    pub fn class_of(&self, leaf: usize) -> usize {
        self.leaf_class[leaf]
    }

    pub fn leaf_classes(&self) -> &[usize] {
        &self.leaf_class
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }
}

/// Per-input cache of the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Node decisions `A x + b`.
    pub u: Vec<f64>,
    /// `relu(u)`.
    pub top: Vec<f64>,
    /// `relu(-u)`.
    pub bot: Vec<f64>,
    /// Leaf logits.
    pub z: Vec<f64>,
    /// For classification: per class, the leaf index attaining the max
    /// (ties resolved to the lowest leaf index).
    pub class_argmax: Option<Vec<usize>>,
}

/// Index of the maximal entry, ties to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Trainable tree encoding: `(A, b)` plus the fixed masks and, for
/// classification, the fixed leaf-to-class assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct SemNet {
    pub(crate) topology: TreeTopology,
    pub(crate) a: Mat,
    pub(crate) b: Vec<f64>,
    pub(crate) masks: PathMasks,
    pub(crate) dim: usize,
    pub(crate) classes: Option<ClassAssignment>,
}

impl SemNet {
    pub fn regression(
        topology: TreeTopology,
        a: Mat,
        b: Vec<f64>,
        dim: usize,
    ) -> Result<Self, SemNetError> {
        Self::build(topology, a, b, dim, None)
    }

    pub fn classification(
        topology: TreeTopology,
        a: Mat,
        b: Vec<f64>,
        dim: usize,
        classes: ClassAssignment,
    ) -> Result<Self, SemNetError> {
        Self::build(topology, a, b, dim, Some(classes))
    }

    fn build(
        topology: TreeTopology,
        a: Mat,
        b: Vec<f64>,
        dim: usize,
        classes: Option<ClassAssignment>,
    ) -> Result<Self, SemNetError> {
        let m = topology.n_internal();
        if a.rows() != m {
            return Err(TreeError::ShapeMismatch {
                what: "hyperplane matrix rows",
                expected: m,
                got: a.rows(),
            }
            .into());
        }
        if a.cols() != dim {
            return Err(TreeError::ShapeMismatch {
                what: "hyperplane matrix cols",
                expected: dim,
                got: a.cols(),
            }
            .into());
        }
        if b.len() != m {
            return Err(TreeError::ShapeMismatch {
                what: "bias vector length",
                expected: m,
                got: b.len(),
            }
            .into());
        }
        if let Some(assignment) = &classes {
            if assignment.leaf_classes().len() != topology.n_leaves() {
                return Err(TreeError::ShapeMismatch {
                    what: "class assignment length",
                    expected: topology.n_leaves(),
                    got: assignment.leaf_classes().len(),
                }
                .into());
            }
        }
        let masks = build_masks(&topology);
        Ok(Self {
            topology,
            a,
            b,
            masks,
            dim,
            classes,
        })
    }

    /// Converts a tree into its trainable encoding. Classification trees
    /// carry their leaf labels over as the fixed class assignment.
    pub fn from_tree(tree: &ObliqueTree) -> Result<Self, SemNetError> {
        let classes = match tree.task() {
            Task::Classify => {
                let labels: Vec<usize> = tree
                    .leaves()
                    .iter()
                    .map(|p| match p {
                        LeafPayload::Class(c) => *c,
                        LeafPayload::Regressor { .. } => unreachable!(),
                    })
                    .collect();
                let c = tree
                    .n_classes()
                    .unwrap_or_else(|| labels.iter().max().map_or(1, |&m| m + 1));
                Some(ClassAssignment::new(labels, c)?)
            }
            Task::Regress => None,
        };
        Self::build(
            tree.topology().clone(),
            tree.hyperplanes().clone(),
            tree.biases().to_vec(),
            tree.dim(),
            classes,
        )
    }

    /// Converts the encoding back to a plain tree with the given payloads.
    pub fn to_tree(&self, leaves: Vec<LeafPayload>) -> Result<ObliqueTree, SemNetError> {
        let n_classes = self.classes.as_ref().map(ClassAssignment::n_classes);
        Ok(ObliqueTree::new(
            self.topology.clone(),
            self.a.clone(),
            self.b.clone(),
            leaves,
            self.dim,
            n_classes,
        )?)
    }

    /// Plain tree labelled by the fixed class assignment.
    pub fn to_class_tree(&self) -> Result<ObliqueTree, SemNetError> {
        let assignment = self.classes.as_ref().ok_or(SemNetError::NotClassification)?;
        let leaves = assignment
            .leaf_classes()
            .iter()
            .map(|&c| LeafPayload::Class(c))
            .collect();
        self.to_tree(leaves)
    }

    pub fn topology(&self) -> &TreeTopology {
        &self.topology
    }

    pub fn hyperplanes(&self) -> &Mat {
        &self.a
    }

    pub fn biases(&self) -> &[f64] {
        &self.b
    }

    pub fn masks(&self) -> &PathMasks {
        &self.masks
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_internal(&self) -> usize {
        self.topology.n_internal()
    }

    pub fn n_leaves(&self) -> usize {
        self.topology.n_leaves()
    }

    pub fn classes(&self) -> Option<&ClassAssignment> {
        self.classes.as_ref()
    }

    /// Forward pass producing the leaf logits and all intermediates.
    pub fn forward_logits(&self, x: &[f64]) -> Result<ForwardTrace, SemNetError> {
        self.check_dim(x)?;
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> ForwardTrace {
        let n = self.n_leaves();
        let mut u = self.a.matvec(x);
        for (ui, bi) in u.iter_mut().zip(&self.b) {
            *ui += bi;
        }
        let top: Vec<f64> = u.iter().map(|&v| v.max(0.0)).collect();
        let bot: Vec<f64> = u.iter().map(|&v| (-v).max(0.0)).collect();
        // The all-ones part of each mask row contributes sum(top + bot);
        // the zeros sit exactly on the leaf's path, one per ancestor. So
        // z_j = total - (branch activations omitted along j's path), an
        // O(m + n*height) evaluation instead of the dense O(n*m) multiply.
        let total: f64 = top.iter().zip(&bot).map(|(t, b)| t + b).sum();
        let mut z = vec![0.0; n];
        for (j, zj) in z.iter_mut().enumerate() {
            let mut omitted = 0.0;
            for step in self.topology.path(j) {
                omitted += match step.branch {
                    Branch::Left => top[step.node],
                    Branch::Right => bot[step.node],
                };
            }
            *zj = total - omitted;
        }
        ForwardTrace {
            u,
            top,
            bot,
            z,
            class_argmax: None,
        }
    }

    /// Classification head: per class, the max logit over its leaves.
    /// Returns the class logits and a trace with the per-class argmax leaf.
    pub fn class_logits(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardTrace), SemNetError> {
        let assignment = self.classes.as_ref().ok_or(SemNetError::NotClassification)?;
        self.check_dim(x)?;
        let mut trace = self.forward_unchecked(x);
        let c = assignment.n_classes();
        let mut out = vec![f64::NEG_INFINITY; c];
        let mut arg = vec![usize::MAX; c];
        for (leaf, &class) in assignment.leaf_classes().iter().enumerate() {
            // Strict > keeps the lowest leaf index on ties.
            if trace.z[leaf] > out[class] {
                out[class] = trace.z[leaf];
                arg[class] = leaf;
            }
        }
        trace.class_argmax = Some(arg);
        Ok((out, trace))
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), SemNetError> {
        if x.len() != self.dim {
            return Err(TreeError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            }
            .into());
        }
        Ok(())
    }
}

/// True iff the logit argmax agrees with hard routing for every input.
/// Inputs exactly on a decision boundary are excluded by precondition: the
/// tie-goes-left routing rule has no counterpart in the logits.
pub fn check_theorem1(net: &SemNet, tree: &ObliqueTree, xs: &[Vec<f64>]) -> bool {
    xs.iter().all(|x| {
        let trace = net.forward_unchecked(x);
        argmax(&trace.z) == tree.route_unchecked(x)
    })
}
