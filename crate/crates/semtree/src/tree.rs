//! Plain hard oblique decision trees: topology, deterministic routing,
//! prediction, and the leaf payloads (class labels or linear regressors).
//!
//! An internal node `i` tests `<a_i, x> + b_i > 0`; true goes right, false
//! goes left. An exact tie (`== 0`) goes LEFT, so routing is a total
//! deterministic function even on decision boundaries.

use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::mat::{dot, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify,
    Regress,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Classify => write!(f, "classify"),
            Task::Regress => write!(f, "regress"),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("input has {got} features, tree expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("operation requires {expected} payloads but tree holds {got} payloads")]
    PayloadMismatch { expected: Task, got: Task },
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("{what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
    #[error("leaf label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("tree mixes class-label and regressor leaves")]
    MixedPayloads,
}

/// Reference to a child slot: either another internal node or a leaf.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRef {
    Internal(usize),
    Leaf(usize),
}

/// Branch direction taken at an internal node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Left,
    Right,
}

/// One step on a root-to-leaf path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathStep {
    /// Internal node index.
    pub node: usize,
    /// Direction taken at that node to stay on the path.
    pub branch: Branch,
}

/// Full binary tree structure. Internal node 0 is the root; a topology with
/// zero internal nodes is the single-leaf tree.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeTopology {
    children: Vec<(NodeRef, NodeRef)>,
    /// Per leaf: the root-to-leaf path, root-first.
    paths: Vec<Vec<PathStep>>,
}

impl TreeTopology {
    /// Validates and builds a topology from per-internal-node child pairs.
    /// Node 0 must be the root. Leaf indices must cover `0..m+1`.
    pub fn new(children: Vec<(NodeRef, NodeRef)>) -> Result<Self, TreeError> {
        let m = children.len();
        let n = m + 1;
        if m == 0 {
            return Ok(Self {
                children,
                paths: vec![Vec::new()],
            });
        }

        let mut internal_parents = vec![0usize; m];
        let mut leaf_parents = vec![0usize; n];
        for &(left, right) in &children {
            for child in [left, right] {
                match child {
                    NodeRef::Internal(i) => {
                        if i >= m {
                            return Err(TreeError::InvalidTopology(format!(
                                "child refers to internal node {i}, only {m} exist"
                            )));
                        }
                        if i == 0 {
                            return Err(TreeError::InvalidTopology(
                                "root (internal 0) appears as a child".into(),
                            ));
                        }
                        internal_parents[i] += 1;
                    }
                    NodeRef::Leaf(l) => {
                        if l >= n {
                            return Err(TreeError::InvalidTopology(format!(
                                "child refers to leaf {l}, only {n} exist"
                            )));
                        }
                        leaf_parents[l] += 1;
                    }
                }
            }
        }
        for (i, &count) in internal_parents.iter().enumerate().skip(1) {
            if count != 1 {
                return Err(TreeError::InvalidTopology(format!(
                    "internal node {i} has {count} parents, expected 1"
                )));
            }
        }
        for (l, &count) in leaf_parents.iter().enumerate() {
            if count != 1 {
                return Err(TreeError::InvalidTopology(format!(
                    "leaf {l} has {count} parents, expected 1"
                )));
            }
        }

        // Walk from the root to collect every root-to-leaf path. The parent
        // counts above rule out sharing, so this also proves reachability.
        let mut paths = vec![Vec::new(); n];
        let mut seen_internal = vec![false; m];
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((node, path)) = stack.pop() {
            if seen_internal[node] {
                return Err(TreeError::InvalidTopology(format!(
                    "internal node {node} visited twice"
                )));
            }
            seen_internal[node] = true;
            let (left, right) = children[node];
            for (child, branch) in [(left, Branch::Left), (right, Branch::Right)] {
                let mut child_path = path.clone();
                child_path.push(PathStep { node, branch });
                match child {
                    NodeRef::Internal(i) => stack.push((i, child_path)),
                    NodeRef::Leaf(l) => paths[l] = child_path,
                }
            }
        }
        if seen_internal.iter().any(|&s| !s) {
            return Err(TreeError::InvalidTopology(
                "not all internal nodes reachable from the root".into(),
            ));
        }

        Ok(Self { children, paths })
    }

    /// Complete tree of the given height: `2^h - 1` internal nodes and `2^h`
    /// leaves, leaves ordered left to right. Height 0 is the single leaf.
    pub fn complete(height: u32) -> Self {
        let m = (1usize << height) - 1;
        let node = |idx: usize| {
            if idx < m {
                NodeRef::Internal(idx)
            } else {
                NodeRef::Leaf(idx - m)
            }
        };
        let children = (0..m).map(|i| (node(2 * i + 1), node(2 * i + 2))).collect();
        Self::new(children).expect("complete topology is always valid")
    }

    /// Random full binary tree with depth at most `height` and at least one
    /// internal node (for `height >= 1`). Grows by splitting random leaves.
    pub fn random<R: Rng>(height: u32, rng: &mut R) -> Self {
        if height == 0 {
            return Self::complete(0);
        }
        let max_internal = (1usize << height) - 1;
        let target = rng.random_range(1..=max_internal);

        // Grown tree as (left, right) over temporary ids; negative depth trick
        // avoided by tracking leaf depths explicitly.
        #[derive(Clone, Copy)]
        enum Slot {
            Leaf,
            Node(usize),
        }
        let mut nodes: Vec<(Slot, Slot)> = Vec::new();
        let mut root = Slot::Leaf;
        // (pointer to slot, depth) of each current leaf; pointers are encoded
        // as (node id, side) with `None` meaning the root slot.
        let mut leaves: Vec<(Option<(usize, bool)>, u32)> = vec![(None, 0)];
        while nodes.len() < target {
            let eligible: Vec<usize> = (0..leaves.len())
                .filter(|&i| leaves[i].1 < height)
                .collect();
            let Some(&pick) = eligible.as_slice().get(rng.random_range(0..eligible.len().max(1)))
            else {
                break;
            };
            let (slot, depth) = leaves.swap_remove(pick);
            let id = nodes.len();
            nodes.push((Slot::Leaf, Slot::Leaf));
            match slot {
                None => root = Slot::Node(id),
                Some((parent, right)) => {
                    let entry = if right {
                        &mut nodes[parent].1
                    } else {
                        &mut nodes[parent].0
                    };
                    *entry = Slot::Node(id);
                }
            }
            leaves.push((Some((id, false)), depth + 1));
            leaves.push((Some((id, true)), depth + 1));
        }

        // Renumber: internals in preorder (root = 0), leaves left to right.
        let mut children: Vec<(NodeRef, NodeRef)> = Vec::with_capacity(nodes.len());
        let mut next_leaf = 0usize;
        fn emit(
            slot: Slot,
            nodes: &[(Slot, Slot)],
            children: &mut Vec<(NodeRef, NodeRef)>,
            next_leaf: &mut usize,
        ) -> NodeRef {
            match slot {
                Slot::Leaf => {
                    let l = *next_leaf;
                    *next_leaf += 1;
                    NodeRef::Leaf(l)
                }
                Slot::Node(id) => {
                    let my_ix = children.len();
                    children.push((NodeRef::Leaf(usize::MAX), NodeRef::Leaf(usize::MAX)));
                    let left = emit(nodes[id].0, nodes, children, next_leaf);
                    let right = emit(nodes[id].1, nodes, children, next_leaf);
                    children[my_ix] = (left, right);
                    NodeRef::Internal(my_ix)
                }
            }
        }
        match root {
            Slot::Leaf => Self::complete(0),
            Slot::Node(_) => {
                emit(root, &nodes, &mut children, &mut next_leaf);
                Self::new(children).expect("grown topology is always valid")
            }
        }
    }

    pub fn n_internal(&self) -> usize {
        self.children.len()
    }

    pub fn n_leaves(&self) -> usize {
        self.paths.len()
    }

    pub fn children(&self) -> &[(NodeRef, NodeRef)] {
        &self.children
    }

    /// Root-to-leaf path of `leaf`, root-first.
    pub fn path(&self, leaf: usize) -> &[PathStep] {
        &self.paths[leaf]
    }

    pub fn root(&self) -> NodeRef {
        if self.children.is_empty() {
            NodeRef::Leaf(0)
        } else {
            NodeRef::Internal(0)
        }
    }
}

/// Per-leaf payload. All leaves of one tree must carry the same variant.
#[derive(Debug, Clone, PartialEq)]
pub enum LeafPayload {
    Class(usize),
    Regressor { theta: Vec<f64>, alpha: f64 },
}

/// Standardization statistics carried along with a trained tree so raw
/// inputs can be mapped into the space the tree was trained in.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Preprocess {
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target_std: Option<f64>,
}

impl Preprocess {
    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.feature_means.iter().zip(&self.feature_stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn unstandardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.feature_means.iter().zip(&self.feature_stds))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn standardize_target(&self, y: f64) -> f64 {
        (y - self.target_mean.unwrap_or(0.0)) / self.target_std.unwrap_or(1.0)
    }

    pub fn unstandardize_target(&self, y: f64) -> f64 {
        y * self.target_std.unwrap_or(1.0) + self.target_mean.unwrap_or(0.0)
    }
}

/// Hard oblique decision tree: one hyperplane per internal node plus leaf
/// payloads. Immutable after construction; safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ObliqueTree {
    topology: TreeTopology,
    a: Mat,
    b: Vec<f64>,
    leaves: Vec<LeafPayload>,
    dim: usize,
    n_classes: Option<usize>,
    preprocess: Option<Preprocess>,
}

impl ObliqueTree {
    pub fn new(
        topology: TreeTopology,
        a: Mat,
        b: Vec<f64>,
        leaves: Vec<LeafPayload>,
        dim: usize,
        n_classes: Option<usize>,
    ) -> Result<Self, TreeError> {
        let m = topology.n_internal();
        let n = topology.n_leaves();
        if a.rows() != m {
            return Err(TreeError::ShapeMismatch {
                what: "hyperplane matrix rows",
                expected: m,
                got: a.rows(),
            });
        }
        if a.cols() != dim {
            return Err(TreeError::ShapeMismatch {
                what: "hyperplane matrix cols",
                expected: dim,
                got: a.cols(),
            });
        }
        if b.len() != m {
            return Err(TreeError::ShapeMismatch {
                what: "bias vector length",
                expected: m,
                got: b.len(),
            });
        }
        if leaves.len() != n {
            return Err(TreeError::ShapeMismatch {
                what: "leaf payload count",
                expected: n,
                got: leaves.len(),
            });
        }
        if !a.is_finite() {
            return Err(TreeError::NonFinite {
                what: "hyperplane matrix",
            });
        }
        if !b.iter().all(|v| v.is_finite()) {
            return Err(TreeError::NonFinite {
                what: "bias vector",
            });
        }

        let mut task = None;
        for payload in &leaves {
            let this = match payload {
                LeafPayload::Class(label) => {
                    if let Some(c) = n_classes {
                        if *label >= c {
                            return Err(TreeError::LabelOutOfRange { label: *label, classes: c });
                        }
                    }
                    Task::Classify
                }
                LeafPayload::Regressor { theta, alpha } => {
                    if theta.len() != dim {
                        return Err(TreeError::ShapeMismatch {
                            what: "leaf regressor length",
                            expected: dim,
                            got: theta.len(),
                        });
                    }
                    if !theta.iter().all(|v| v.is_finite()) || !alpha.is_finite() {
                        return Err(TreeError::NonFinite {
                            what: "leaf regressor",
                        });
                    }
                    Task::Regress
                }
            };
            match task {
                None => task = Some(this),
                Some(t) if t != this => return Err(TreeError::MixedPayloads),
                Some(_) => {}
            }
        }

        Ok(Self {
            topology,
            a,
            b,
            leaves,
            dim,
            n_classes,
            preprocess: None,
        })
    }

    pub fn with_preprocess(mut self, preprocess: Preprocess) -> Self {
        self.preprocess = Some(preprocess);
        self
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

    pub fn leaves(&self) -> &[LeafPayload] {
        &self.leaves
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.n_classes
    }

    pub fn preprocess(&self) -> Option<&Preprocess> {
        self.preprocess.as_ref()
    }

    pub fn task(&self) -> Task {
        match self.leaves.first() {
            Some(LeafPayload::Regressor { .. }) => Task::Regress,
            _ => Task::Classify,
        }
    }

    /// Decision value `<a_i, x> + b_i` at internal node `i`.
    pub fn decision(&self, node: usize, x: &[f64]) -> f64 {
        dot(self.a.row(node), x) + self.b[node]
    }

    /// Routes `x` to a leaf: right iff the node decision is strictly
    /// positive, ties go left.
    pub fn route(&self, x: &[f64]) -> Result<usize, TreeError> {
        self.check_dim(x)?;
        Ok(self.route_unchecked(x))
    }

    pub(crate) fn route_unchecked(&self, x: &[f64]) -> usize {
        let mut node = match self.topology.root() {
            NodeRef::Leaf(l) => return l,
            NodeRef::Internal(i) => i,
        };
        loop {
            let (left, right) = self.topology.children()[node];
            let next = if self.decision(node, x) > 0.0 { right } else { left };
            match next {
                NodeRef::Internal(i) => node = i,
                NodeRef::Leaf(l) => return l,
            }
        }
    }

    /// Class label of the routed leaf.
    pub fn predict_class(&self, x: &[f64]) -> Result<usize, TreeError> {
        self.check_dim(x)?;
        match &self.leaves[self.route_unchecked(x)] {
            LeafPayload::Class(label) => Ok(*label),
            LeafPayload::Regressor { .. } => Err(TreeError::PayloadMismatch {
                expected: Task::Classify,
                got: Task::Regress,
            }),
        }
    }

    /// Affine output `<theta, x> + alpha` of the routed leaf.
    pub fn predict_reg(&self, x: &[f64]) -> Result<f64, TreeError> {
        self.check_dim(x)?;
        match &self.leaves[self.route_unchecked(x)] {
            LeafPayload::Regressor { theta, alpha } => Ok(dot(theta, x) + alpha),
            LeafPayload::Class(_) => Err(TreeError::PayloadMismatch {
                expected: Task::Regress,
                got: Task::Classify,
            }),
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), TreeError> {
        if x.len() != self.dim {
            return Err(TreeError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Height-1 tree over one feature: split at x > 0.
    fn sign_tree() -> ObliqueTree {
        ObliqueTree::new(
            TreeTopology::complete(1),
            Mat::from_vec(1, 1, vec![1.0]),
            vec![0.0],
            vec![LeafPayload::Class(0), LeafPayload::Class(1)],
            1,
            Some(2),
        )
        .unwrap()
    }

    fn random_reg_tree(height: u32, dim: usize, rng: &mut ChaCha8Rng) -> ObliqueTree {
        let topology = TreeTopology::random(height, rng);
        let m = topology.n_internal();
        let n = topology.n_leaves();
        let a = Mat::from_vec(m, dim, (0..m * dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        let b = (0..m).map(|_| rng.random_range(-0.5..0.5)).collect();
        let leaves = (0..n)
            .map(|_| LeafPayload::Regressor {
                theta: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                alpha: rng.random_range(-1.0..1.0),
            })
            .collect();
        ObliqueTree::new(topology, a, b, leaves, dim, None).unwrap()
    }

    /// Independent recursive-descent routing used as the oracle for `route`.
    fn route_recursive(tree: &ObliqueTree, node: NodeRef, x: &[f64]) -> usize {
        match node {
            NodeRef::Leaf(l) => l,
            NodeRef::Internal(i) => {
                let (left, right) = tree.topology().children()[i];
                if tree.decision(i, x) > 0.0 {
                    route_recursive(tree, right, x)
                } else {
                    route_recursive(tree, left, x)
                }
            }
        }
    }

    #[test]
    fn route_sign_cases() {
        let tree = sign_tree();
        assert_eq!(tree.route(&[0.5]).unwrap(), 1);
        assert_eq!(tree.route(&[-0.5]).unwrap(), 0);
        // Exact tie goes left.
        assert_eq!(tree.route(&[0.0]).unwrap(), 0);
    }

    #[test]
    fn route_rejects_dimension_mismatch() {
        let tree = sign_tree();
        assert_eq!(
            tree.route(&[0.5, 1.0]),
            Err(TreeError::DimensionMismatch { expected: 1, got: 2 })
        );
    }

    #[test]
    fn predict_class_basics() {
        let tree = sign_tree();
        assert_eq!(tree.predict_class(&[2.0]).unwrap(), 1);

        let single_class = ObliqueTree::new(
            TreeTopology::complete(1),
            Mat::from_vec(1, 1, vec![1.0]),
            vec![0.0],
            vec![LeafPayload::Class(0), LeafPayload::Class(0)],
            1,
            Some(1),
        )
        .unwrap();
        for x in [-3.0, 0.0, 5.0] {
            assert_eq!(single_class.predict_class(&[x]).unwrap(), 0);
        }
    }

    #[test]
    fn predict_class_matches_recursive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let topology = TreeTopology::random(3, &mut rng);
        let m = topology.n_internal();
        let n = topology.n_leaves();
        let a = Mat::from_vec(m, 4, (0..m * 4).map(|_| rng.random_range(-1.0..1.0)).collect());
        let b = (0..m).map(|_| rng.random_range(-0.5..0.5)).collect();
        let leaves = (0..n).map(|l| LeafPayload::Class(l % 3)).collect();
        let tree = ObliqueTree::new(topology, a, b, leaves, 4, Some(3)).unwrap();

        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let leaf = route_recursive(&tree, tree.topology().root(), &x);
            let expected = match tree.leaves()[leaf] {
                LeafPayload::Class(c) => c,
                _ => unreachable!(),
            };
            assert_eq!(tree.predict_class(&x).unwrap(), expected);
        }
    }

    #[test]
    fn predict_reg_shared_payload_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let topology = TreeTopology::random(3, &mut rng);
        let m = topology.n_internal();
        let n = topology.n_leaves();
        let a = Mat::from_vec(m, 2, (0..m * 2).map(|_| rng.random_range(-1.0..1.0)).collect());
        let b = vec![0.1; m];
        let leaves = (0..n)
            .map(|_| LeafPayload::Regressor { theta: vec![1.0, 0.0], alpha: 2.0 })
            .collect();
        let tree = ObliqueTree::new(topology, a, b, leaves, 2, None).unwrap();
        for _ in 0..50 {
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            assert_eq!(tree.predict_reg(&x).unwrap(), x[0] + 2.0);
        }
    }

    #[test]
    fn predict_reg_step_function() {
        let tree = ObliqueTree::new(
            TreeTopology::complete(1),
            Mat::from_vec(1, 1, vec![1.0]),
            vec![0.0],
            vec![
                LeafPayload::Regressor { theta: vec![0.0], alpha: -1.0 },
                LeafPayload::Regressor { theta: vec![0.0], alpha: 1.0 },
            ],
            1,
            None,
        )
        .unwrap();
        assert_eq!(tree.predict_reg(&[0.3]).unwrap(), 1.0);
        assert_eq!(tree.predict_reg(&[-0.3]).unwrap(), -1.0);
    }

    #[test]
    fn predict_reg_matches_recursive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tree = random_reg_tree(4, 3, &mut rng);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let leaf = route_recursive(&tree, tree.topology().root(), &x);
            let expected = match &tree.leaves()[leaf] {
                LeafPayload::Regressor { theta, alpha } => dot(theta, &x) + alpha,
                _ => unreachable!(),
            };
            assert_eq!(tree.predict_reg(&x).unwrap(), expected);
        }
    }

    #[test]
    fn payload_variant_mismatch_is_an_error() {
        let tree = sign_tree();
        assert!(matches!(
            tree.predict_reg(&[0.5]),
            Err(TreeError::PayloadMismatch { .. })
        ));
    }

    #[test]
    fn mixed_payloads_rejected() {
        let err = ObliqueTree::new(
            TreeTopology::complete(1),
            Mat::from_vec(1, 1, vec![1.0]),
            vec![0.0],
            vec![
                LeafPayload::Class(0),
                LeafPayload::Regressor { theta: vec![0.0], alpha: 0.0 },
            ],
            1,
            Some(1),
        )
        .unwrap_err();
        assert_eq!(err, TreeError::MixedPayloads);
    }

    #[test]
    fn topology_rejects_double_parent() {
        // Both children of the root point at leaf 0.
        let err = TreeTopology::new(vec![(NodeRef::Leaf(0), NodeRef::Leaf(0))]).unwrap_err();
        assert!(matches!(err, TreeError::InvalidTopology(_)));
    }

    #[test]
    fn topology_paths_are_root_first() {
        let t = TreeTopology::complete(2);
        assert_eq!(t.n_internal(), 3);
        assert_eq!(t.n_leaves(), 4);
        assert_eq!(
            t.path(0),
            &[
                PathStep { node: 0, branch: Branch::Left },
                PathStep { node: 1, branch: Branch::Left }
            ]
        );
        assert_eq!(
            t.path(3),
            &[
                PathStep { node: 0, branch: Branch::Right },
                PathStep { node: 2, branch: Branch::Right }
            ]
        );
    }

    #[test]
    fn single_leaf_tree_routes_everything_to_leaf_zero() {
        let tree = ObliqueTree::new(
            TreeTopology::complete(0),
            Mat::zeros(0, 2),
            vec![],
            vec![LeafPayload::Class(0)],
            2,
            Some(1),
        )
        .unwrap();
        assert_eq!(tree.route(&[1.0, -1.0]).unwrap(), 0);
    }

    #[test]
    fn random_topologies_are_valid_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for height in 1..=6u32 {
            for _ in 0..50 {
                let t = TreeTopology::random(height, &mut rng);
                assert_eq!(t.n_leaves(), t.n_internal() + 1);
                assert!(t.n_internal() >= 1);
                for leaf in 0..t.n_leaves() {
                    assert!(t.path(leaf).len() <= height as usize);
                    assert!(!t.path(leaf).is_empty());
                    assert_eq!(t.path(leaf)[0].node, 0, "paths start at the root");
                }
            }
        }
    }

    #[test]
    fn route_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tree = random_reg_tree(3, 2, &mut rng);
        for _ in 0..20 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let first = tree.route(&x).unwrap();
            for _ in 0..5 {
                assert_eq!(tree.route(&x).unwrap(), first);
            }
        }
    }
}
