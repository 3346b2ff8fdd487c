//! Heterogeneous graph data model: node attributes plus one symmetric,
//! unweighted adjacency per meta-path.

mod hyperbolicity;
mod io;
mod synth;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sparse::Csr;

pub use hyperbolicity::{gromov_hyperbolicity, gromov_hyperbolicity_capped, Hyperbolicity, DEFAULT_HYPERBOLICITY_CAP};
pub use io::{load_dataset, save_dataset, GraphMeta, MetaPathMeta};
pub use synth::{generate_synthetic, MetaPathSpec, SynthSpec};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("{file}:{line}: endpoint {endpoint} >= num_nodes {num_nodes}")]
    EndpointOutOfRange {
        file: String,
        line: usize,
        endpoint: usize,
        num_nodes: usize,
    },
    #[error("feature row count mismatch: expected {expected}, found {found}")]
    FeatureRowMismatch { expected: usize, found: usize },
    #[error("graph.meta: {0}")]
    Meta(String),
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("component of {size} nodes exceeds hyperbolicity cap {cap}")]
    TooLarge { size: usize, cap: usize },
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Subgraph induced by one meta-path, stored as a symmetric CSR pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaPathSubgraph {
    pub name: String,
    pub relation_id: usize,
    edges: Arc<Csr>,
}

impl MetaPathSubgraph {
    /// Validates that `edges` is symmetric without self-loops.
    pub fn new(name: impl Into<String>, relation_id: usize, edges: Csr) -> Result<Self> {
        let name = name.into();
        if !edges.is_symmetric() {
            return Err(GraphError::Invalid(format!("meta-path `{name}` adjacency is not symmetric")));
        }
        if (0..edges.num_rows()).any(|i| edges.contains(i, i)) {
            return Err(GraphError::Invalid(format!("meta-path `{name}` stores a self-loop")));
        }
        Ok(Self {
            name,
            relation_id,
            edges: Arc::new(edges),
        })
    }

    /// Builds from undirected pairs; self-loops are dropped silently.
    pub fn from_pairs(name: impl Into<String>, relation_id: usize, num_nodes: usize, pairs: &[(usize, usize)]) -> Self {
        let (csr, _) = Csr::symmetric_from_pairs(num_nodes, pairs);
        Self {
            name: name.into(),
            relation_id,
            edges: Arc::new(csr),
        }
    }

    pub fn edges(&self) -> &Csr {
        &self.edges
    }

    pub fn shared_edges(&self) -> Arc<Csr> {
        Arc::clone(&self.edges)
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        self.edges.row(i)
    }

    pub fn degree(&self, i: usize) -> usize {
        self.edges.degree(i)
    }

    pub fn num_edges(&self) -> usize {
        self.edges.nnz() / 2
    }

    pub fn num_nodes(&self) -> usize {
        self.edges.num_rows()
    }
}

/// Node attributes plus one adjacency per meta-path. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroGraph {
    num_nodes: usize,
    feature_dim: usize,
    features: Vec<f64>,
    metapaths: Vec<MetaPathSubgraph>,
    labels: Option<Vec<Option<usize>>>,
    splits: Option<Vec<Option<Split>>>,
    node_ids: Option<Vec<String>>,
}

impl HeteroGraph {
    /// Validates and assembles a graph. Meta-paths are reordered by
    /// relation id, which must be dense `0..|R|`.
    pub fn new(
        num_nodes: usize,
        feature_dim: usize,
        features: Vec<f64>,
        mut metapaths: Vec<MetaPathSubgraph>,
    ) -> Result<Self> {
        if features.len() != num_nodes * feature_dim {
            return Err(GraphError::FeatureRowMismatch {
                expected: num_nodes,
                found: if feature_dim == 0 { 0 } else { features.len() / feature_dim },
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(GraphError::Invalid("feature matrix has non-finite entries".into()));
        }
        metapaths.sort_by_key(|m| m.relation_id);
        for (r, m) in metapaths.iter().enumerate() {
            if m.relation_id != r {
                return Err(GraphError::Invalid(format!(
                    "relation ids must be dense 0..{} with one per meta-path (found {} for `{}`)",
                    metapaths.len(),
                    m.relation_id,
                    m.name
                )));
            }
            if m.num_nodes() != num_nodes {
                return Err(GraphError::Invalid(format!(
                    "meta-path `{}` has {} rows, expected {num_nodes}",
                    m.name,
                    m.num_nodes()
                )));
            }
        }
        Ok(Self {
            num_nodes,
            feature_dim,
            features,
            metapaths,
            labels: None,
            splits: None,
            node_ids: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<Option<usize>>) -> Result<Self> {
        if labels.len() != self.num_nodes {
            return Err(GraphError::Invalid(format!("{} labels for {} nodes", labels.len(), self.num_nodes)));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_splits(mut self, splits: Vec<Option<Split>>) -> Result<Self> {
        if splits.len() != self.num_nodes {
            return Err(GraphError::Invalid(format!("{} splits for {} nodes", splits.len(), self.num_nodes)));
        }
        self.splits = Some(splits);
        Ok(self)
    }

    pub fn with_node_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.num_nodes {
            return Err(GraphError::Invalid(format!("{} node ids for {} nodes", ids.len(), self.num_nodes)));
        }
        self.node_ids = Some(ids);
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Row-major `N x F` attribute matrix.
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Meta-path subgraphs, indexed by relation id.
    pub fn metapaths(&self) -> &[MetaPathSubgraph] {
        &self.metapaths
    }

    pub fn num_relations(&self) -> usize {
        self.metapaths.len()
    }

    pub fn labels(&self) -> Option<&[Option<usize>]> {
        self.labels.as_deref()
    }

    pub fn splits(&self) -> Option<&[Option<Split>]> {
        self.splits.as_deref()
    }

    /// Original identifiers when the source files used sparse ids.
    pub fn node_ids(&self) -> Option<&[String]> {
        self.node_ids.as_deref()
    }

    /// External identifier of node `i` (its original id, or `i`).
    pub fn node_label(&self, i: usize) -> String {
        match &self.node_ids {
            Some(ids) => ids[i].clone(),
            None => i.to_string(),
        }
    }

    /// Number of distinct class ids among labeled nodes.
    pub fn num_classes(&self) -> usize {
        let mut seen: Vec<usize> = self.labels.iter().flatten().flatten().copied().collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }
}
