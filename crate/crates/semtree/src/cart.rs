//! Greedy axis-aligned CART with scalar leaves, the weakest baseline:
//! Gini impurity for classification, variance reduction for regression.
//! Candidate thresholds are the midpoints between consecutive sorted unique
//! feature values; routing sends `x[feature] > threshold` right, ties left.

use thiserror::Error;

use crate::data::{Dataset, Targets};
use crate::tree::Task;

#[derive(Debug, Error, PartialEq)]
pub enum CartError {
    #[error("cannot fit a tree on an empty sample set")]
    EmptyData,
    #[error("operation requires a {expected} tree")]
    TaskMismatch { expected: Task },
    #[error("input has {got} features, tree expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum AxisNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    LeafClass(usize),
    LeafValue(f64),
}

/// Axis-aligned decision tree over standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisTree {
    pub(crate) nodes: Vec<AxisNode>,
    pub(crate) dim: usize,
    pub(crate) task: Task,
}

impl AxisTree {
    pub fn nodes(&self) -> &[AxisNode] {
        &self.nodes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub(crate) fn from_parts(nodes: Vec<AxisNode>, dim: usize, task: Task) -> Self {
        Self { nodes, dim, task }
    }

    fn leaf_of(&self, x: &[f64]) -> &AxisNode {
        let mut ix = 0usize;
        loop {
            match &self.nodes[ix] {
                AxisNode::Split { feature, threshold, left, right } => {
                    ix = if x[*feature] > *threshold { *right } else { *left };
                }
                leaf => return leaf,
            }
        }
    }

    pub fn predict_class(&self, x: &[f64]) -> Result<usize, CartError> {
        self.check(x, Task::Classify)?;
        match self.leaf_of(x) {
            AxisNode::LeafClass(c) => Ok(*c),
            _ => unreachable!("homogeneous leaves"),
        }
    }

    pub fn predict_value(&self, x: &[f64]) -> Result<f64, CartError> {
        self.check(x, Task::Regress)?;
        match self.leaf_of(x) {
            AxisNode::LeafValue(v) => Ok(*v),
            _ => unreachable!("homogeneous leaves"),
        }
    }

    fn check(&self, x: &[f64], expected: Task) -> Result<(), CartError> {
        if self.task != expected {
            return Err(CartError::TaskMismatch { expected });
        }
        if x.len() != self.dim {
            return Err(CartError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }
}

enum NodeTargets<'a> {
    Labels(&'a [usize], usize),
    Values(&'a [f64]),
}

/// Weighted impurity of a candidate split, or `None` when a side is empty.
struct SplitScan<'a> {
    xs: &'a crate::mat::Mat,
    targets: NodeTargets<'a>,
    min_leaf: usize,
}

impl SplitScan<'_> {
    /// Best (feature, threshold, score) over all midpoint candidates, or
    /// `None` when no split satisfies `min_leaf`. Lower scores are better;
    /// ties resolve to the first candidate in (feature, threshold) order.
    fn best_split(&self, rows: &[usize]) -> Option<(usize, f64, f64)> {
        let d = self.xs.cols();
        let mut best: Option<(usize, f64, f64)> = None;
        let mut sorted = rows.to_vec();
        for feature in 0..d {
            sorted.sort_by(|&a, &b| {
                self.xs[(a, feature)]
                    .partial_cmp(&self.xs[(b, feature)])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            self.scan_feature(feature, &sorted, &mut best);
        }
        best
    }

    fn scan_feature(&self, feature: usize, sorted: &[usize], best: &mut Option<(usize, f64, f64)>) {
        let n = sorted.len();
        match &self.targets {
            NodeTargets::Labels(labels, c) => {
                let mut left = vec![0usize; *c];
                let mut right = vec![0usize; *c];
                for &r in sorted {
                    right[labels[r]] += 1;
                }
                for cut in 1..n {
                    let moved = sorted[cut - 1];
                    left[labels[moved]] += 1;
                    right[labels[moved]] -= 1;
                    let prev = self.xs[(moved, feature)];
                    let here = self.xs[(sorted[cut], feature)];
                    if prev == here || cut < self.min_leaf || n - cut < self.min_leaf {
                        continue;
                    }
                    let threshold = prev + (here - prev) / 2.0;
                    let score = (cut as f64) * gini(&left, cut)
                        + ((n - cut) as f64) * gini(&right, n - cut);
                    consider(best, feature, threshold, score);
                }
            }
            NodeTargets::Values(values) => {
                let mut left_sum = 0.0;
                let mut left_sq = 0.0;
                let mut right_sum: f64 = sorted.iter().map(|&r| values[r]).sum();
                let mut right_sq: f64 = sorted.iter().map(|&r| values[r] * values[r]).sum();
                for cut in 1..n {
                    let v = values[sorted[cut - 1]];
                    left_sum += v;
                    left_sq += v * v;
                    right_sum -= v;
                    right_sq -= v * v;
                    let prev = self.xs[(sorted[cut - 1], feature)];
                    let here = self.xs[(sorted[cut], feature)];
                    if prev == here || cut < self.min_leaf || n - cut < self.min_leaf {
                        continue;
                    }
                    let threshold = prev + (here - prev) / 2.0;
                    // Sum of squared errors around each side's mean.
                    let left_sse = left_sq - left_sum * left_sum / cut as f64;
                    let right_sse = right_sq - right_sum * right_sum / (n - cut) as f64;
                    consider(best, feature, threshold, left_sse + right_sse);
                }
            }
        }
    }
}

fn consider(best: &mut Option<(usize, f64, f64)>, feature: usize, threshold: f64, score: f64) {
    // Strict < keeps the first candidate on ties (lowest feature index,
    // then lowest threshold), which keeps fits deterministic.
    if best.map_or(true, |(_, _, s)| score < s) {
        *best = Some((feature, threshold, score));
    }
}

fn gini(counts: &[usize], total: usize) -> f64 {
    let total = total as f64;
    1.0 - counts
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            p * p
        })
        .sum::<f64>()
}

fn majority_label(labels: &[usize], rows: &[usize], c: usize) -> usize {
    let mut counts = vec![0usize; c];
    for &r in rows {
        counts[labels[r]] += 1;
    }
    let mut best = 0;
    for (label, &count) in counts.iter().enumerate().skip(1) {
        if count > counts[best] {
            best = label;
        }
    }
    best
}

fn mean_value(values: &[f64], rows: &[usize]) -> f64 {
    rows.iter().map(|&r| values[r]).sum::<f64>() / rows.len() as f64
}

fn is_pure(targets: &NodeTargets, rows: &[usize]) -> bool {
    match targets {
        NodeTargets::Labels(labels, _) => rows.windows(2).all(|w| labels[w[0]] == labels[w[1]]),
        NodeTargets::Values(values) => {
            rows.windows(2).all(|w| values[w[0]] == values[w[1]])
        }
    }
}

/// Greedy best-split fit on the dataset's TRAIN rows. Regression targets are
/// the standardized values, so RMSE comparisons against oblique trees happen
/// in the same units.
pub fn fit_cart(data: &Dataset, max_depth: usize, min_leaf: usize) -> Result<AxisTree, CartError> {
    if data.train_idx.is_empty() {
        return Err(CartError::EmptyData);
    }
    let targets = match &data.targets {
        Targets::Labels { labels, n_classes } => NodeTargets::Labels(labels, *n_classes),
        Targets::Values { std, .. } => NodeTargets::Values(std),
    };
    let scan = SplitScan {
        xs: &data.x,
        targets,
        min_leaf: min_leaf.max(1),
    };

    let mut nodes: Vec<AxisNode> = Vec::new();
    let root_rows = data.train_idx.clone();
    grow(&scan, &mut nodes, root_rows, max_depth);
    Ok(AxisTree::from_parts(nodes, data.dim(), data.task))
}

/// Appends the subtree for `rows` and returns its node index.
fn grow(scan: &SplitScan, nodes: &mut Vec<AxisNode>, rows: Vec<usize>, depth_left: usize) -> usize {
    let make_leaf = |rows: &[usize]| match &scan.targets {
        NodeTargets::Labels(labels, c) => AxisNode::LeafClass(majority_label(labels, rows, *c)),
        NodeTargets::Values(values) => AxisNode::LeafValue(mean_value(values, rows)),
    };

    if depth_left == 0 || rows.len() < 2 * scan.min_leaf || is_pure(&scan.targets, &rows) {
        nodes.push(make_leaf(&rows));
        return nodes.len() - 1;
    }
    let Some((feature, threshold, _)) = scan.best_split(&rows) else {
        nodes.push(make_leaf(&rows));
        return nodes.len() - 1;
    };

    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
        rows.into_iter().partition(|&r| scan.xs[(r, feature)] <= threshold);

    let ix = nodes.len();
    nodes.push(AxisNode::Split { feature, threshold, left: 0, right: 0 });
    let left = grow(scan, nodes, left_rows, depth_left - 1);
    let right = grow(scan, nodes, right_rows, depth_left - 1);
    if let AxisNode::Split { left: l, right: r, .. } = &mut nodes[ix] {
        *l = left;
        *r = right;
    }
    ix
}

/// Training-set SSE (regression) or weighted impurity surrogate used by the
/// monotonicity test.
pub fn train_sse(tree: &AxisTree, data: &Dataset) -> f64 {
    let values = data.values_std().expect("regression dataset");
    data.train_idx
        .iter()
        .map(|&r| {
            let p = tree.predict_value(data.x.row(r)).expect("valid rows");
            (p - values[r]).powi(2)
        })
        .sum()
}
