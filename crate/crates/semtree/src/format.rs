//! Versioned text format for trained trees, plus Graphviz-DOT export.
//!
//! Trees are stored as JSON with an explicit `format_version` and a
//! `variant` tag ("oblique" or "axis"). Floats round-trip exactly: the
//! writer emits the shortest decimal that parses back to the same bits
//! (at most 17 significant digits). Writes go to a temporary sibling file
//! followed by an atomic rename, so readers never observe partial files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cart::{AxisNode, AxisTree, CartError};
use crate::mat::Mat;
use crate::tree::{LeafPayload, NodeRef, ObliqueTree, Preprocess, Task, TreeError, TreeTopology};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed tree file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported format version {found} (this build reads {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("invalid tree file: {0}")]
    Invalid(String),
    #[error("tree file is variant '{found}', expected '{expected}'")]
    WrongVariant { expected: &'static str, found: String },
    #[error(transparent)]
    Tree(#[from] TreeError),
}

impl From<CartError> for FormatError {
    fn from(e: CartError) -> Self {
        FormatError::Invalid(e.to_string())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum FileLeaf {
    Reg { theta: Vec<f64>, alpha: f64 },
    Class { label: usize },
    Value { value: f64 },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum FileAxisNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf { leaf: usize },
}

#[derive(Debug, Serialize, Deserialize)]
struct FileTopology {
    /// One `[left, right]` pair per internal node; entries are "I<k>" for
    /// internal nodes and "L<k>" for leaves. Internal node 0 is the root.
    children: Vec<(String, String)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TreeFile {
    format_version: u32,
    variant: String,
    task: Task,
    d: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    c: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    topology: Option<FileTopology>,
    #[serde(rename = "A", skip_serializing_if = "Option::is_none", default)]
    a: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    b: Option<Vec<f64>>,
    leaves: Vec<FileLeaf>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    axis_nodes: Option<Vec<FileAxisNode>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    feature_means: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    feature_stds: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    target_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    target_std: Option<f64>,
}

fn node_ref_to_string(node: NodeRef) -> String {
    match node {
        NodeRef::Internal(i) => format!("I{i}"),
        NodeRef::Leaf(l) => format!("L{l}"),
    }
}

fn parse_node_ref(text: &str) -> Result<NodeRef, FormatError> {
    let (kind, index) = text.split_at(1.min(text.len()));
    let index: usize = index
        .parse()
        .map_err(|_| FormatError::Invalid(format!("bad node reference '{text}'")))?;
    match kind {
        "I" => Ok(NodeRef::Internal(index)),
        "L" => Ok(NodeRef::Leaf(index)),
        _ => Err(FormatError::Invalid(format!("bad node reference '{text}'"))),
    }
}

/// Writes `bytes` to a temporary sibling file and renames it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<(), std::io::Error> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    let tmp_name = format!(".{file_name}.tmp");
    let tmp = match dir {
        Some(d) => d.join(&tmp_name),
        None => std::path::PathBuf::from(&tmp_name),
    };
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn tree_to_file(tree: &ObliqueTree) -> TreeFile {
    let leaves = tree
        .leaves()
        .iter()
        .map(|p| match p {
            LeafPayload::Class(label) => FileLeaf::Class { label: *label },
            LeafPayload::Regressor { theta, alpha } => FileLeaf::Reg {
                theta: theta.clone(),
                alpha: *alpha,
            },
        })
        .collect();
    let children = tree
        .topology()
        .children()
        .iter()
        .map(|&(l, r)| (node_ref_to_string(l), node_ref_to_string(r)))
        .collect();
    let pre = tree.preprocess();
    TreeFile {
        format_version: FORMAT_VERSION,
        variant: "oblique".into(),
        task: tree.task(),
        d: tree.dim(),
        c: tree.n_classes(),
        topology: Some(FileTopology { children }),
        a: Some(tree.hyperplanes().as_slice().to_vec()),
        b: Some(tree.biases().to_vec()),
        leaves,
        axis_nodes: None,
        feature_means: pre.map(|p| p.feature_means.clone()),
        feature_stds: pre.map(|p| p.feature_stds.clone()),
        target_mean: pre.and_then(|p| p.target_mean),
        target_std: pre.and_then(|p| p.target_std),
    }
}

fn render(file: &TreeFile) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(file).expect("tree serializes");
    text.push('\n');
    text.into_bytes()
}

/// Saves an oblique tree; see the module docs for the schema.
pub fn save_tree(tree: &ObliqueTree, path: impl AsRef<Path>) -> Result<(), FormatError> {
    Ok(write_atomic(path, &render(&tree_to_file(tree)))?)
}

/// Serialized byte image of the tree file (what `save_tree` writes).
pub fn tree_to_bytes(tree: &ObliqueTree) -> Vec<u8> {
    render(&tree_to_file(tree))
}

fn preprocess_of(file: &TreeFile) -> Option<Preprocess> {
    match (&file.feature_means, &file.feature_stds) {
        (Some(means), Some(stds)) => Some(Preprocess {
            feature_means: means.clone(),
            feature_stds: stds.clone(),
            target_mean: file.target_mean,
            target_std: file.target_std,
        }),
        _ => None,
    }
}

pub fn load_tree(path: impl AsRef<Path>) -> Result<ObliqueTree, FormatError> {
    let text = fs::read_to_string(path)?;
    let file: TreeFile = serde_json::from_str(&text)?;
    if file.format_version != FORMAT_VERSION {
        return Err(FormatError::Version { found: file.format_version });
    }
    if file.variant != "oblique" {
        return Err(FormatError::WrongVariant {
            expected: "oblique",
            found: file.variant,
        });
    }
    let topology = file
        .topology
        .as_ref()
        .ok_or_else(|| FormatError::Invalid("missing topology".into()))?;
    let mut children = Vec::with_capacity(topology.children.len());
    for (l, r) in &topology.children {
        children.push((parse_node_ref(l)?, parse_node_ref(r)?));
    }
    let topology = TreeTopology::new(children)?;
    let m = topology.n_internal();

    let a = file
        .a
        .clone()
        .ok_or_else(|| FormatError::Invalid("missing hyperplane matrix".into()))?;
    if a.len() != m * file.d {
        return Err(FormatError::Invalid(format!(
            "hyperplane matrix holds {} values, expected {} x {}",
            a.len(),
            m,
            file.d
        )));
    }
    let b = file
        .b
        .clone()
        .ok_or_else(|| FormatError::Invalid("missing bias vector".into()))?;

    let leaves = file
        .leaves
        .iter()
        .map(|leaf| match leaf {
            FileLeaf::Class { label } => Ok(LeafPayload::Class(*label)),
            FileLeaf::Reg { theta, alpha } => Ok(LeafPayload::Regressor {
                theta: theta.clone(),
                alpha: *alpha,
            }),
            FileLeaf::Value { .. } => Err(FormatError::Invalid(
                "scalar leaves belong to the axis variant".into(),
            )),
        })
        .collect::<Result<Vec<_>, _>>()?;

    let tree = ObliqueTree::new(topology, Mat::from_vec(m, file.d, a), b, leaves, file.d, file.c)?;
    Ok(match preprocess_of(&file) {
        Some(pre) => tree.with_preprocess(pre),
        None => tree,
    })
}

fn axis_to_file(tree: &AxisTree) -> TreeFile {
    let mut leaves = Vec::new();
    let nodes = tree
        .nodes()
        .iter()
        .map(|node| match node {
            AxisNode::Split { feature, threshold, left, right } => FileAxisNode::Split {
                feature: *feature,
                threshold: *threshold,
                left: *left,
                right: *right,
            },
            AxisNode::LeafClass(label) => {
                leaves.push(FileLeaf::Class { label: *label });
                FileAxisNode::Leaf { leaf: leaves.len() - 1 }
            }
            AxisNode::LeafValue(value) => {
                leaves.push(FileLeaf::Value { value: *value });
                FileAxisNode::Leaf { leaf: leaves.len() - 1 }
            }
        })
        .collect();
    TreeFile {
        format_version: FORMAT_VERSION,
        variant: "axis".into(),
        task: tree.task(),
        d: tree.dim(),
        c: None,
        topology: None,
        a: None,
        b: None,
        leaves,
        axis_nodes: Some(nodes),
        feature_means: None,
        feature_stds: None,
        target_mean: None,
        target_std: None,
    }
}

pub fn save_axis_tree(tree: &AxisTree, path: impl AsRef<Path>) -> Result<(), FormatError> {
    Ok(write_atomic(path, &render(&axis_to_file(tree)))?)
}

pub fn load_axis_tree(path: impl AsRef<Path>) -> Result<AxisTree, FormatError> {
    let text = fs::read_to_string(path)?;
    let file: TreeFile = serde_json::from_str(&text)?;
    if file.format_version != FORMAT_VERSION {
        return Err(FormatError::Version { found: file.format_version });
    }
    if file.variant != "axis" {
        return Err(FormatError::WrongVariant {
            expected: "axis",
            found: file.variant,
        });
    }
    let file_nodes = file
        .axis_nodes
        .as_ref()
        .ok_or_else(|| FormatError::Invalid("missing axis nodes".into()))?;
    let mut nodes = Vec::with_capacity(file_nodes.len());
    for node in file_nodes {
        nodes.push(match node {
            FileAxisNode::Split { feature, threshold, left, right } => {
                if !threshold.is_finite() {
                    return Err(FormatError::Invalid("non-finite threshold".into()));
                }
                if *left >= file_nodes.len() || *right >= file_nodes.len() {
                    return Err(FormatError::Invalid("child index out of range".into()));
                }
                AxisNode::Split {
                    feature: *feature,
                    threshold: *threshold,
                    left: *left,
                    right: *right,
                }
            }
            FileAxisNode::Leaf { leaf } => match file.leaves.get(*leaf) {
                Some(FileLeaf::Class { label }) => AxisNode::LeafClass(*label),
                Some(FileLeaf::Value { value }) => AxisNode::LeafValue(*value),
                Some(FileLeaf::Reg { .. }) => {
                    return Err(FormatError::Invalid(
                        "regressor leaves belong to the oblique variant".into(),
                    ))
                }
                None => return Err(FormatError::Invalid("leaf index out of range".into())),
            },
        });
    }
    Ok(AxisTree::from_parts(nodes, file.d, file.task))
}

fn hyperplane_label(row: &[f64], bias: f64) -> String {
    let mut terms: Vec<String> = Vec::new();
    for (i, w) in row.iter().enumerate() {
        if *w != 0.0 {
            terms.push(format!("{w:.4}*x{i}"));
        }
    }
    if terms.is_empty() {
        terms.push("0".into());
    }
    format!("{} + {bias:.4} > 0", terms.join(" + "))
}

/// Graphviz-DOT rendering with hyperplane expressions at the internal nodes.
pub fn tree_to_dot(tree: &ObliqueTree) -> String {
    let mut out = String::from("digraph oblique_tree {\n  node [shape=box];\n");
    for (i, _) in tree.topology().children().iter().enumerate() {
        out.push_str(&format!(
            "  I{i} [label=\"{}\"];\n",
            hyperplane_label(tree.hyperplanes().row(i), tree.biases()[i])
        ));
    }
    for (l, payload) in tree.leaves().iter().enumerate() {
        let label = match payload {
            LeafPayload::Class(c) => format!("class {c}"),
            LeafPayload::Regressor { theta, alpha } => {
                hyperplane_label(theta, *alpha).replace(" > 0", "")
            }
        };
        out.push_str(&format!("  L{l} [shape=ellipse, label=\"{label}\"];\n"));
    }
    for (i, &(left, right)) in tree.topology().children().iter().enumerate() {
        out.push_str(&format!(
            "  I{i} -> {} [label=\"no\"];\n  I{i} -> {} [label=\"yes\"];\n",
            node_ref_to_string(left),
            node_ref_to_string(right)
        ));
    }
    out.push_str("}\n");
    out
}

/// DOT rendering of an axis-aligned tree.
pub fn axis_tree_to_dot(tree: &AxisTree) -> String {
    let mut out = String::from("digraph axis_tree {\n  node [shape=box];\n");
    for (i, node) in tree.nodes().iter().enumerate() {
        match node {
            AxisNode::Split { feature, threshold, .. } => {
                out.push_str(&format!("  N{i} [label=\"x{feature} > {threshold:.4}\"];\n"));
            }
            AxisNode::LeafClass(c) => {
                out.push_str(&format!("  N{i} [shape=ellipse, label=\"class {c}\"];\n"));
            }
            AxisNode::LeafValue(v) => {
                out.push_str(&format!("  N{i} [shape=ellipse, label=\"{v:.4}\"];\n"));
            }
        }
    }
    for (i, node) in tree.nodes().iter().enumerate() {
        if let AxisNode::Split { left, right, .. } = node {
            out.push_str(&format!(
                "  N{i} -> N{left} [label=\"no\"];\n  N{i} -> N{right} [label=\"yes\"];\n"
            ));
        }
    }
    out.push_str("}\n");
    out
}
