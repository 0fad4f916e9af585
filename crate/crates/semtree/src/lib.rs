//! Hard oblique decision trees trained by gradient descent.
//!
//! A hard oblique tree routes an input through strict hyperplane tests and
//! answers with the reached leaf's payload (a class label or an affine
//! regressor). That function has no useful gradient, so training happens
//! through a lossless encoding of the tree as a small network whose logit
//! argmax provably reproduces hard routing: tree parameters map one-to-one
//! onto trainable weights, everything else is fixed wiring, and the trained
//! network converts back into a plain tree.
//!
//! Classification descends directly on cross-entropy over max-pooled class
//! logits. Regression additionally needs a leaf selector: `hardmax` (exact,
//! no gradient), a straight-through estimator baseline, and temperature-
//! scaled top-k selection, annealed k -> 1 over training so the final model
//! is an exact hard tree. A greedy axis-aligned CART baseline, synthetic
//! data generators, metrics, and a versioned JSON tree format round out the
//! crate; `semtree-cli` exposes the command-line surface.
//!
//! Batch work is data-parallel under the default `parallel` feature (rayon)
//! with a sequential fallback; results are bit-identical either way because
//! reductions always run in sample order.

pub mod cart;
pub mod data;
mod exec;
pub mod format;
pub mod grad;
pub mod mat;
pub mod metrics;
pub mod optim;
pub mod selectors;
pub mod semnet;
pub mod train;
pub mod tree;

pub use cart::{fit_cart, AxisTree};
pub use data::{gen_blobs, gen_imbalance, gen_teacher, gen_xor, load_csv, Dataset, SplitSpec};
pub use format::{load_tree, save_tree, tree_to_dot};
pub use grad::{RegressorBank, RouterMethod};
pub use selectors::{hardmax, ste, topk, SelectorMode};
pub use semnet::{build_masks, check_theorem1, SemNet};
pub use train::{
    ablation_root_recovery, train_classification, train_regression, train_regression_ste,
    KSchedule, TrainPlan, TrainReport,
};
pub use tree::{LeafPayload, ObliqueTree, Task, TreeTopology};
