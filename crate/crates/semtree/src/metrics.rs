//! Evaluation: accuracy, RMSE in either scale, and leaf-utilization
//! histograms.

use serde::Serialize;

use crate::data::Dataset;
use crate::exec;
use crate::mat::Mat;
use crate::tree::{ObliqueTree, Task, TreeError};

/// Which rows of a dataset to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSel {
    Train,
    Test,
    All,
}

impl SplitSel {
    pub fn rows(self, data: &Dataset) -> Vec<usize> {
        match self {
            SplitSel::Train => data.train_idx.clone(),
            SplitSel::Test => data.test_idx.clone(),
            SplitSel::All => (0..data.n()).collect(),
        }
    }
}

/// Reporting scale for regression errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Standardized,
    Raw,
}

/// Fraction of matching predictions.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(preds.len(), labels.len(), "accuracy: length mismatch");
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / preds.len() as f64
}

/// Root mean squared error.
pub fn rmse(preds: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(preds.len(), targets.len(), "rmse: length mismatch");
    if preds.is_empty() {
        return 0.0;
    }
    let sse: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    (sse / preds.len() as f64).sqrt()
}

/// Classification accuracy of a tree on a dataset split. The tree operates
/// in standardized feature space.
pub fn tree_accuracy(tree: &ObliqueTree, data: &Dataset, split: SplitSel) -> Result<f64, TreeError> {
    if tree.task() != Task::Classify || data.task != Task::Classify {
        return Err(TreeError::PayloadMismatch {
            expected: Task::Classify,
            got: Task::Regress,
        });
    }
    let (labels, _) = data.labels().expect("classification dataset");
    let rows = split.rows(data);
    let preds = exec::map_collect(&rows, |&i| {
        tree.predict_class(data.x.row(i)).expect("dimensions validated")
    });
    let expected: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
    Ok(accuracy(&preds, &expected))
}

/// Regression RMSE of a tree on a dataset split, in the requested scale.
pub fn tree_rmse(
    tree: &ObliqueTree,
    data: &Dataset,
    split: SplitSel,
    scale: Scale,
) -> Result<f64, TreeError> {
    if tree.task() != Task::Regress || data.task != Task::Regress {
        return Err(TreeError::PayloadMismatch {
            expected: Task::Regress,
            got: Task::Classify,
        });
    }
    let rows = split.rows(data);
    let preds_std = exec::map_collect(&rows, |&i| {
        tree.predict_reg(data.x.row(i)).expect("dimensions validated")
    });
    match scale {
        Scale::Standardized => {
            let targets: Vec<f64> =
                rows.iter().map(|&i| data.values_std().expect("regression")[i]).collect();
            Ok(rmse(&preds_std, &targets))
        }
        Scale::Raw => {
            let preds: Vec<f64> = preds_std
                .iter()
                .map(|&p| data.preprocess.unstandardize_target(p))
                .collect();
            let targets: Vec<f64> =
                rows.iter().map(|&i| data.values_raw().expect("regression")[i]).collect();
            Ok(rmse(&preds, &targets))
        }
    }
}

/// Count of samples routed (top-1) to each leaf.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeafHistogram {
    pub counts: Vec<usize>,
    pub epoch: Option<usize>,
}

impl LeafHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Counts sorted descending, the usual way utilization is plotted.
    pub fn sorted_desc(&self) -> Vec<usize> {
        let mut sorted = self.counts.clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        sorted
    }
}

/// Routes every row and tallies per-leaf counts.
pub fn leaf_histogram(tree: &ObliqueTree, xs: &Mat, rows: &[usize]) -> LeafHistogram {
    let leaves = exec::map_collect(rows, |&i| {
        tree.route(xs.row(i)).expect("dimensions validated")
    });
    let mut counts = vec![0usize; tree.topology().n_leaves()];
    for leaf in leaves {
        counts[leaf] += 1;
    }
    LeafHistogram { counts, epoch: None }
}

/// Number of leaves holding strictly more than `threshold` samples.
pub fn utilization_summary(hist: &LeafHistogram, threshold: usize) -> usize {
    hist.counts.iter().filter(|&&c| c > threshold).count()
}
