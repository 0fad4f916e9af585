//! Dataset ingestion, standardization, splits, and synthetic generators.
//!
//! Features are standardized per column using statistics computed on the
//! TRAIN split only; the test split reuses those statistics. Regression
//! targets are standardized the same way, with the raw values kept alongside
//! so metrics can be reported in either scale. Constant columns get their
//! std clamped to 1 so they standardize to all zeros instead of dividing by
//! zero. Everything is reproducible bit-for-bit under a seed.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::mat::Mat;
use crate::tree::{LeafPayload, ObliqueTree, Preprocess, Task, TreeTopology};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("label column '{0}' not found in header")]
    MissingColumn(String),
    #[error("non-numeric value at row {row}, column '{column}'")]
    NonNumeric { row: usize, column: String },
    #[error("dataset is empty")]
    Empty,
    #[error("label at row {row} is {value}, expected a non-negative integer")]
    BadLabel { row: usize, value: f64 },
    #[error("non-finite feature at row {row}")]
    NonFinite { row: usize },
    #[error("dataset holds {got} targets for {expected} rows")]
    LengthMismatch { expected: usize, got: usize },
    #[error("operation requires a {expected} dataset")]
    TaskMismatch { expected: Task },
}

/// Seeded train/test split parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub test_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RawTargets {
    Labels(Vec<usize>),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels {
        labels: Vec<usize>,
        n_classes: usize,
    },
    Values {
        /// Standardized with train statistics.
        std: Vec<f64>,
        raw: Vec<f64>,
    },
}

/// In-memory dataset with standardized features and a fixed split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Standardized features, all rows.
    pub x: Mat,
    /// Features as ingested.
    pub x_raw: Mat,
    pub targets: Targets,
    pub task: Task,
    pub preprocess: Preprocess,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub split: SplitSpec,
}

impl Dataset {
    pub fn from_raw(x_raw: Mat, targets: RawTargets, split: SplitSpec) -> Result<Self, DataError> {
        let n = x_raw.rows();
        if n == 0 {
            return Err(DataError::Empty);
        }
        let target_len = match &targets {
            RawTargets::Labels(l) => l.len(),
            RawTargets::Values(v) => v.len(),
        };
        if target_len != n {
            return Err(DataError::LengthMismatch {
                expected: n,
                got: target_len,
            });
        }
        for row in 0..n {
            if !x_raw.row(row).iter().all(|v| v.is_finite()) {
                return Err(DataError::NonFinite { row });
            }
        }
        if let RawTargets::Values(v) = &targets {
            if let Some(row) = v.iter().position(|y| !y.is_finite()) {
                return Err(DataError::NonFinite { row });
            }
        }

        let (train_idx, test_idx) = split_indices(n, split);

        let d = x_raw.cols();
        let (feature_means, feature_stds) = column_stats(&x_raw, &train_idx, d);
        let mut x = x_raw.clone();
        for row in 0..n {
            for (c, v) in x.row_mut(row).iter_mut().enumerate() {
                *v = (*v - feature_means[c]) / feature_stds[c];
            }
        }

        let (task, targets, target_mean, target_std) = match targets {
            RawTargets::Labels(labels) => {
                let n_classes = labels.iter().max().map_or(1, |&m| m + 1);
                (Task::Classify, Targets::Labels { labels, n_classes }, None, None)
            }
            RawTargets::Values(raw) => {
                let (mean, std) = scalar_stats(&raw, &train_idx);
                let std_targets = raw.iter().map(|y| (y - mean) / std).collect();
                (
                    Task::Regress,
                    Targets::Values { std: std_targets, raw },
                    Some(mean),
                    Some(std),
                )
            }
        };

        Ok(Self {
            x,
            x_raw,
            targets,
            task,
            preprocess: Preprocess {
                feature_means,
                feature_stds,
                target_mean,
                target_std,
            },
            train_idx,
            test_idx,
            split,
        })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn labels(&self) -> Result<(&[usize], usize), DataError> {
        match &self.targets {
            Targets::Labels { labels, n_classes } => Ok((labels, *n_classes)),
            Targets::Values { .. } => Err(DataError::TaskMismatch {
                expected: Task::Classify,
            }),
        }
    }

    /// Standardized regression targets.
    pub fn values_std(&self) -> Result<&[f64], DataError> {
        match &self.targets {
            Targets::Values { std, .. } => Ok(std),
            Targets::Labels { .. } => Err(DataError::TaskMismatch {
                expected: Task::Regress,
            }),
        }
    }

    pub fn values_raw(&self) -> Result<&[f64], DataError> {
        match &self.targets {
            Targets::Values { raw, .. } => Ok(raw),
            Targets::Labels { .. } => Err(DataError::TaskMismatch {
                expected: Task::Regress,
            }),
        }
    }
}

fn split_indices(n: usize, split: SplitSpec) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(split.seed);
    order.shuffle(&mut rng);
    let test_count = ((n as f64) * split.test_fraction).round() as usize;
    let test_count = test_count.min(n.saturating_sub(1));
    let test_idx = order[..test_count].to_vec();
    let train_idx = order[test_count..].to_vec();
    (train_idx, test_idx)
}

fn column_stats(x: &Mat, rows: &[usize], d: usize) -> (Vec<f64>, Vec<f64>) {
    let count = rows.len().max(1) as f64;
    let mut means = vec![0.0; d];
    for &r in rows {
        for (c, v) in x.row(r).iter().enumerate() {
            means[c] += v;
        }
    }
    for m in &mut means {
        *m /= count;
    }
    let mut vars = vec![0.0; d];
    for &r in rows {
        for (c, v) in x.row(r).iter().enumerate() {
            let dv = v - means[c];
            vars[c] += dv * dv;
        }
    }
    let stds = vars
        .into_iter()
        .map(|v| {
            let s = (v / count).sqrt();
            if s < 1e-12 {
                1.0
            } else {
                s
            }
        })
        .collect();
    (means, stds)
}

fn scalar_stats(values: &[f64], rows: &[usize]) -> (f64, f64) {
    let count = rows.len().max(1) as f64;
    let mean = rows.iter().map(|&r| values[r]).sum::<f64>() / count;
    let var = rows.iter().map(|&r| (values[r] - mean).powi(2)).sum::<f64>() / count;
    let std = var.sqrt();
    (mean, if std < 1e-12 { 1.0 } else { std })
}

/// Loads a CSV with a header row, pulls out the label column, standardizes,
/// and splits.
pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: &str,
    task: Task,
    split: SplitSpec,
) -> Result<Dataset, DataError> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let label_ix = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| DataError::MissingColumn(label_column.to_string()))?;

    let mut features: Vec<f64> = Vec::new();
    let mut raw_labels: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        for (col, field) in record.iter().enumerate() {
            let value: f64 = field.trim().parse().map_err(|_| DataError::NonNumeric {
                row,
                column: headers.get(col).unwrap_or("?").to_string(),
            })?;
            if col == label_ix {
                raw_labels.push(value);
            } else {
                features.push(value);
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(DataError::Empty);
    }
    let d = headers.len() - 1;
    let x = Mat::from_vec(n, d, features);

    let targets = match task {
        Task::Regress => RawTargets::Values(raw_labels),
        Task::Classify => {
            let mut labels = Vec::with_capacity(n);
            for (row, &v) in raw_labels.iter().enumerate() {
                let rounded = v.round();
                if !v.is_finite() || (v - rounded).abs() > 1e-9 || rounded < 0.0 {
                    return Err(DataError::BadLabel { row, value: v });
                }
                labels.push(rounded as usize);
            }
            RawTargets::Labels(labels)
        }
    };
    Dataset::from_raw(x, targets, split)
}

/// Writes raw features plus the target as CSV with header `x0..x{d-1},y`.
pub fn write_csv(path: impl AsRef<Path>, dataset: &Dataset) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let d = dataset.dim();
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    header.push("y".to_string());
    writer.write_record(&header)?;
    for row in 0..dataset.n() {
        let mut record: Vec<String> =
            dataset.x_raw.row(row).iter().map(|v| format!("{v}")).collect();
        let y = match &dataset.targets {
            Targets::Labels { labels, .. } => format!("{}", labels[row]),
            Targets::Values { raw, .. } => format!("{}", raw[row]),
        };
        record.push(y);
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Pointer to a CSV dataset: name, path, label column, and task.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub path: String,
    pub label_column: String,
    pub task: Task,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, DataError> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Standard normal via Box-Muller.
fn gauss<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

fn unit_row<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let row: Vec<f64> = (0..dim).map(|_| gauss(rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return row.into_iter().map(|v| v / norm).collect();
        }
    }
}

fn random_oblique_tree<R: Rng>(
    topology: TreeTopology,
    dim: usize,
    bias_range: (f64, f64),
    alpha_range: (f64, f64),
    rng: &mut R,
) -> ObliqueTree {
    let m = topology.n_internal();
    let n = topology.n_leaves();
    let mut a = Mat::zeros(m, dim);
    for i in 0..m {
        a.row_mut(i).copy_from_slice(&unit_row(dim, rng));
    }
    let b: Vec<f64> = (0..m).map(|_| rng.random_range(bias_range.0..bias_range.1)).collect();
    let leaves: Vec<LeafPayload> = (0..n)
        .map(|_| LeafPayload::Regressor {
            theta: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            alpha: rng.random_range(alpha_range.0..alpha_range.1),
        })
        .collect();
    ObliqueTree::new(topology, a, b, leaves, dim, None).expect("generated tree is valid")
}

/// Random complete regression tree with unit-norm hyperplanes, as used by
/// the teacher-student experiments.
pub fn gen_teacher_tree(seed: u64, height: u32, dim: usize) -> ObliqueTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_oblique_tree(
        TreeTopology::complete(height),
        dim,
        (-0.3, 0.3),
        (-1.0, 1.0),
        &mut rng,
    )
}

/// Queries `teacher` on `n_samples` inputs drawn uniformly from
/// `[-1, 1]^d` and packages the result (standardized + split).
pub fn query_teacher(teacher: &ObliqueTree, seed: u64, n_samples: usize) -> Dataset {
    let dim = teacher.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut xs = Mat::zeros(n_samples, dim);
    let mut ys = Vec::with_capacity(n_samples);
    for row in 0..n_samples {
        for v in xs.row_mut(row) {
            *v = rng.random_range(-1.0..1.0);
        }
        ys.push(teacher.predict_reg(xs.row(row)).expect("teacher predicts"));
    }
    Dataset::from_raw(
        xs,
        RawTargets::Values(ys),
        SplitSpec { seed, test_fraction: 0.2 },
    )
    .expect("generated data is valid")
}

/// Random piecewise-linear teacher: a complete oblique regression tree with
/// unit-norm hyperplanes, queried on uniform inputs from `[-1, 1]^d`.
/// The returned dataset's raw targets equal the teacher's predictions
/// exactly (zero noise).
pub fn gen_teacher(
    seed: u64,
    height: u32,
    dim: usize,
    n_samples: usize,
) -> (ObliqueTree, Dataset) {
    let teacher = gen_teacher_tree(seed, height, dim);
    let dataset = query_teacher(&teacher, seed, n_samples);
    (teacher, dataset)
}

/// Teacher used by [`gen_imbalance`]: every split is biased off-center in
/// the same direction, so the leaf regions carry very unequal mass.
pub fn imbalance_teacher(seed: u64) -> ObliqueTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1357_9bdf);
    random_oblique_tree(TreeTopology::complete(5), 6, (0.05, 0.45), (-2.0, 2.0), &mut rng)
}

/// Piecewise-linear regression data with 32 distinct linear regions of
/// unequal mass, so leaf-utilization differences are observable.
pub fn gen_imbalance(seed: u64) -> Dataset {
    let teacher = imbalance_teacher(seed);
    let dim = teacher.dim();
    let n_samples = 4000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Mat::zeros(n_samples, dim);
    let mut ys = Vec::with_capacity(n_samples);
    for row in 0..n_samples {
        for v in xs.row_mut(row) {
            *v = rng.random_range(-1.0..1.0);
        }
        ys.push(teacher.predict_reg(xs.row(row)).expect("teacher predicts"));
    }
    Dataset::from_raw(
        xs,
        RawTargets::Values(ys),
        SplitSpec { seed, test_fraction: 0.2 },
    )
    .expect("generated data is valid")
}

/// Offset with a hard radius cap, so class regions stay disjoint by
/// construction.
fn clipped_gauss_offset<R: Rng>(sigma: f64, rng: &mut R) -> (f64, f64) {
    let cap = 3.0 * sigma;
    loop {
        let dx = gauss(rng) * sigma;
        let dy = gauss(rng) * sigma;
        if (dx * dx + dy * dy).sqrt() <= cap {
            return (dx, dy);
        }
    }
}

/// Two separable Gaussian blobs (clipped at three sigmas, so the margin
/// between classes is strictly positive).
pub fn gen_blobs(seed: u64, n_samples: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = 0.3;
    let centers = [(-1.5, -1.5), (1.5, 1.5)];
    let mut xs = Mat::zeros(n_samples, 2);
    let mut labels = Vec::with_capacity(n_samples);
    for row in 0..n_samples {
        let class = row % 2;
        let (cx, cy) = centers[class];
        let (dx, dy) = clipped_gauss_offset(sigma, &mut rng);
        xs.row_mut(row).copy_from_slice(&[cx + dx, cy + dy]);
        labels.push(class);
    }
    Dataset::from_raw(
        xs,
        RawTargets::Labels(labels),
        SplitSpec { seed, test_fraction: 0.2 },
    )
    .expect("generated data is valid")
}

/// Four Gaussian blobs at the corners of a square with diagonal labels:
/// same-class blobs sit in opposite quadrants, so no single hyperplane
/// separates the classes.
pub fn gen_xor(seed: u64, n_samples: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = 0.25;
    let centers = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)];
    let mut xs = Mat::zeros(n_samples, 2);
    let mut labels = Vec::with_capacity(n_samples);
    for row in 0..n_samples {
        let blob = row % 4;
        let (cx, cy) = centers[blob];
        let (dx, dy) = clipped_gauss_offset(sigma, &mut rng);
        xs.row_mut(row).copy_from_slice(&[cx + dx, cy + dy]);
        // Diagonal classes: (+,+) and (-,-) are class 1.
        labels.push(if blob % 2 == 0 { 1 } else { 0 });
    }
    Dataset::from_raw(
        xs,
        RawTargets::Labels(labels),
        SplitSpec { seed, test_fraction: 0.2 },
    )
    .expect("generated data is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_csv_hand_checked() {
        let f = write_temp_csv("a,y,b\n1.0,10.0,2.0\n3.0,20.0,4.0\n5.0,30.0,6.0\n");
        let ds = load_csv(
            f.path(),
            "y",
            Task::Regress,
            SplitSpec { seed: 0, test_fraction: 0.0 },
        )
        .unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.dim(), 2);
        // Label column excluded from features, order preserved.
        assert_eq!(ds.x_raw.row(0), &[1.0, 2.0]);
        assert_eq!(ds.x_raw.row(2), &[5.0, 6.0]);
        assert_eq!(ds.values_raw().unwrap(), &[10.0, 20.0, 30.0]);
        // Column a: mean 3, population std sqrt(8/3).
        let s = (8.0f64 / 3.0).sqrt();
        assert!((ds.x[(0, 0)] - (1.0 - 3.0) / s).abs() < 1e-12);
        assert!((ds.x[(1, 0)] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn constant_column_standardizes_to_zero() {
        let f = write_temp_csv("a,b,y\n7.0,1.0,0.0\n7.0,2.0,1.0\n7.0,3.0,0.0\n");
        let ds = load_csv(
            f.path(),
            "y",
            Task::Classify,
            SplitSpec { seed: 0, test_fraction: 0.0 },
        )
        .unwrap();
        for row in 0..3 {
            assert_eq!(ds.x[(row, 0)], 0.0);
        }
        assert_eq!(ds.preprocess.feature_stds[0], 1.0);
    }

    #[test]
    fn load_csv_errors() {
        let missing = write_temp_csv("a,b\n1.0,2.0\n");
        assert!(matches!(
            load_csv(missing.path(), "y", Task::Regress, SplitSpec::default()),
            Err(DataError::MissingColumn(_))
        ));

        let non_numeric = write_temp_csv("a,y\n1.0,2.0\nfoo,3.0\n");
        assert!(matches!(
            load_csv(non_numeric.path(), "y", Task::Regress, SplitSpec::default()),
            Err(DataError::NonNumeric { row: 1, .. })
        ));

        let empty = write_temp_csv("a,y\n");
        assert!(matches!(
            load_csv(empty.path(), "y", Task::Regress, SplitSpec::default()),
            Err(DataError::Empty)
        ));

        let bad_label = write_temp_csv("a,y\n1.0,0.5\n");
        assert!(matches!(
            load_csv(bad_label.path(), "y", Task::Classify, SplitSpec::default()),
            Err(DataError::BadLabel { row: 0, .. })
        ));
    }

    #[test]
    fn train_columns_are_zero_mean_unit_std() {
        let (_, ds) = gen_teacher(3, 3, 4, 500);
        for c in 0..ds.dim() {
            let n = ds.train_idx.len() as f64;
            let mean: f64 = ds.train_idx.iter().map(|&r| ds.x[(r, c)]).sum::<f64>() / n;
            let var: f64 =
                ds.train_idx.iter().map(|&r| (ds.x[(r, c)] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9, "column {c} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-9, "column {c} std");
        }
        // Targets too.
        let n = ds.train_idx.len() as f64;
        let std = ds.values_std().unwrap();
        let mean: f64 = ds.train_idx.iter().map(|&r| std[r]).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn standardize_round_trip() {
        let (_, ds) = gen_teacher(5, 2, 3, 100);
        for row in 0..ds.n() {
            let back = ds.preprocess.unstandardize(ds.x.row(row));
            for (b, orig) in back.iter().zip(ds.x_raw.row(row)) {
                assert!((b - orig).abs() < 1e-12);
            }
        }
        let raw = ds.values_raw().unwrap();
        let std = ds.values_std().unwrap();
        for (s, r) in std.iter().zip(raw) {
            assert!((ds.preprocess.unstandardize_target(*s) - r).abs() < 1e-12);
        }
    }

    #[test]
    fn split_is_deterministic_partition() {
        let (_, a) = gen_teacher(9, 3, 2, 200);
        let (_, b) = gen_teacher(9, 3, 2, 200);
        assert_eq!(a.train_idx, b.train_idx);
        assert_eq!(a.test_idx, b.test_idx);

        let mut all: Vec<usize> = a.train_idx.iter().chain(&a.test_idx).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        assert_eq!(a.test_idx.len(), 40);
    }

    #[test]
    fn generators_reproducible_bit_for_bit() {
        let (t1, d1) = gen_teacher(17, 4, 2, 300);
        let (t2, d2) = gen_teacher(17, 4, 2, 300);
        assert_eq!(t1, t2);
        assert_eq!(d1, d2);
        assert_eq!(gen_imbalance(5), gen_imbalance(5));
        assert_eq!(gen_blobs(5, 100), gen_blobs(5, 100));
        assert_eq!(gen_xor(5, 100), gen_xor(5, 100));
    }

    #[test]
    fn teacher_labels_are_exact_and_in_domain() {
        let (teacher, ds) = gen_teacher(11, 5, 2, 1000);
        let raw = ds.values_raw().unwrap();
        for row in 0..ds.n() {
            let x = ds.x_raw.row(row);
            assert!(x.iter().all(|v| (-1.0..1.0).contains(v)));
            assert_eq!(teacher.predict_reg(x).unwrap(), raw[row]);
        }
    }

    #[test]
    fn teacher_leaf_counts_match_monte_carlo_oracle() {
        let (teacher, ds) = gen_teacher(13, 4, 2, 5000);
        let n_leaves = teacher.topology().n_leaves();
        let mut counts = vec![0usize; n_leaves];
        for row in 0..ds.n() {
            counts[teacher.route(ds.x_raw.row(row)).unwrap()] += 1;
        }
        // Independent Monte-Carlo estimate with a different seed.
        let mut rng = ChaCha8Rng::seed_from_u64(987_654);
        let trials = 50_000usize;
        let mut oracle = vec![0usize; n_leaves];
        for _ in 0..trials {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            oracle[teacher.route(&x).unwrap()] += 1;
        }
        let n = ds.n() as f64;
        for leaf in 0..n_leaves {
            let p = oracle[leaf] as f64 / trials as f64;
            let sigma = (n * p * (1.0 - p)).sqrt().max(1.0);
            // 3 sigma on the dataset counts plus slack for the oracle's own
            // estimation error.
            let slack = 3.0 * sigma + 3.0 * n * (p * (1.0 - p) / trials as f64).sqrt();
            assert!(
                ((counts[leaf] as f64) - n * p).abs() <= slack,
                "leaf {leaf}: count {} vs expected {:.1} (slack {slack:.1})",
                counts[leaf],
                n * p
            );
        }
    }

    #[test]
    fn blobs_have_positive_margin() {
        let ds = gen_blobs(23, 300);
        let (labels, _) = ds.labels().unwrap();
        let mut min_gap = f64::INFINITY;
        for i in 0..ds.n() {
            for j in 0..ds.n() {
                if labels[i] != labels[j] {
                    let dx = ds.x_raw[(i, 0)] - ds.x_raw[(j, 0)];
                    let dy = ds.x_raw[(i, 1)] - ds.x_raw[(j, 1)];
                    min_gap = min_gap.min((dx * dx + dy * dy).sqrt());
                }
            }
        }
        assert!(min_gap > 0.0, "classes overlap");
        // By construction: centers 3*sqrt(2) apart, offsets capped at 0.9.
        assert!(min_gap >= 3.0 * std::f64::consts::SQRT_2 - 1.8 - 1e-9);
    }

    #[test]
    fn xor_not_linearly_separable() {
        let ds = gen_xor(29, 400);
        let (labels, _) = ds.labels().unwrap();
        // Oracle bound: exhaustive search over random hyperplanes.
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let mut best = 0.0f64;
        for _ in 0..10_000 {
            let w = [gauss(&mut rng), gauss(&mut rng)];
            let b = rng.random_range(-2.0..2.0);
            let mut correct = 0usize;
            for i in 0..ds.n() {
                let side = (w[0] * ds.x_raw[(i, 0)] + w[1] * ds.x_raw[(i, 1)] + b) > 0.0;
                if (side as usize) == labels[i] {
                    correct += 1;
                }
            }
            let acc = (correct.max(ds.n() - correct)) as f64 / ds.n() as f64;
            best = best.max(acc);
        }
        assert!(best <= 0.75, "a single hyperplane reached {best}");
    }

    #[test]
    fn imbalance_target_representable_by_its_teacher() {
        let ds = gen_imbalance(31);
        let teacher = imbalance_teacher(31);
        let raw = ds.values_raw().unwrap();
        for row in 0..ds.n() {
            assert_eq!(teacher.predict_reg(ds.x_raw.row(row)).unwrap(), raw[row]);
        }
        // Mass actually is unequal: compare the largest and smallest leaf
        // shares on the training samples.
        let mut counts = vec![0usize; teacher.topology().n_leaves()];
        for &row in &ds.train_idx {
            counts[teacher.route(ds.x_raw.row(row)).unwrap()] += 1;
        }
        let max = counts.iter().max().unwrap();
        let min = counts.iter().min().unwrap();
        assert!(max > &(min * 4), "leaf masses too uniform: {counts:?}");
    }

    #[test]
    fn csv_round_trip_preserves_dataset() {
        let (_, ds) = gen_teacher(37, 3, 2, 150);
        let file = tempfile::NamedTempFile::new().unwrap();
        write_csv(file.path(), &ds).unwrap();
        let reloaded = load_csv(file.path(), "y", Task::Regress, ds.split).unwrap();
        assert_eq!(ds, reloaded);
    }
}
