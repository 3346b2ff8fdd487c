//! Stochastic graph views: attribute masking and edge removal.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hetgraph::{HeteroGraph, MetaPathSubgraph};
use crate::ndtensor::Tensor;
use crate::rng::{derive_seed, purpose, rng_for};
use crate::sparse::Csr;
use crate::Real;

#[derive(Debug, Error, PartialEq)]
#[error("augmentation probability {name}={value} outside [0, 1)")]
pub struct AugmentError {
    pub name: &'static str,
    pub value: f64,
}

/// Drop probabilities for one view.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ViewAugment {
    pub p_a: f64,
    pub p_e: f64,
}

impl ViewAugment {
    pub fn new(p_a: f64, p_e: f64) -> Result<Self, AugmentError> {
        let v = Self { p_a, p_e };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        for (name, value) in [("p_a", self.p_a), ("p_e", self.p_e)] {
            if !(0.0..1.0).contains(&value) {
                return Err(AugmentError { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub views: [ViewAugment; 2],
    pub seed: u64,
}

/// One augmented copy of the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphView {
    pub num_nodes: usize,
    pub feature_dim: usize,
    /// Row-major `N x F`.
    pub features: Vec<f64>,
    /// Adjacency per meta-path, indexed by relation id.
    pub adjacency: Vec<Arc<Csr>>,
}

impl GraphView {
    /// The unaugmented graph as a view.
    pub fn identity(g: &HeteroGraph) -> Self {
        Self {
            num_nodes: g.num_nodes(),
            feature_dim: g.feature_dim(),
            features: g.features().to_vec(),
            adjacency: g.metapaths().iter().map(MetaPathSubgraph::shared_edges).collect(),
        }
    }

    pub fn feature_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.features.iter().map(|&v| T::of(v)).collect();
        Tensor::from_parts(vec![self.num_nodes, self.feature_dim], data).expect("view features are N x F")
    }

    /// Same view with node rows of the feature matrix permuted:
    /// row `i` of the result is row `perm[i]` of `self`.
    pub fn with_shuffled_features(&self, perm: &[usize]) -> Self {
        let f = self.feature_dim;
        let mut features = Vec::with_capacity(self.features.len());
        for &src in perm {
            features.extend_from_slice(&self.features[src * f..(src + 1) * f]);
        }
        Self {
            features,
            ..self.clone()
        }
    }
}

/// Zeroes each feature column with probability `p_a`, using one mask shared
/// by every node.
pub fn mask_attributes(features: &[f64], feature_dim: usize, p_a: f64, seed: u64) -> Result<Vec<f64>, AugmentError> {
    ViewAugment::new(p_a, 0.0)?;
    if p_a == 0.0 || feature_dim == 0 {
        return Ok(features.to_vec());
    }
    let mut rng = rng_for(seed, &[purpose::AUGMENT, 0]);
    let keep: Vec<bool> = (0..feature_dim).map(|_| rng.random::<f64>() >= p_a).collect();
    Ok(features
        .iter()
        .enumerate()
        .map(|(k, &x)| if keep[k % feature_dim] { x } else { 0.0 })
        .collect())
}

/// Drops each undirected edge with probability `p_e` (one coin per pair).
pub fn permute_edges(adj: &Csr, p_e: f64, seed: u64) -> Result<Csr, AugmentError> {
    ViewAugment::new(0.0, p_e)?;
    if p_e == 0.0 {
        return Ok(adj.clone());
    }
    let mut rng = rng_for(seed, &[purpose::AUGMENT, 1]);
    let kept: Vec<(usize, usize)> = adj
        .undirected_edges()
        .into_iter()
        .filter(|_| rng.random::<f64>() >= p_e)
        .collect();
    Ok(Csr::symmetric_from_pairs(adj.num_rows(), &kept).0)
}

/// Seed of view `view` (0 or 1) at `epoch`.
pub fn view_seed(run_seed: u64, epoch: u64, view: usize) -> u64 {
    derive_seed(run_seed, &[purpose::AUGMENT, epoch, view as u64])
}

pub fn make_view(g: &HeteroGraph, aug: &ViewAugment, seed: u64) -> Result<GraphView, AugmentError> {
    let features = mask_attributes(g.features(), g.feature_dim(), aug.p_a, seed)?;
    let adjacency = g
        .metapaths()
        .iter()
        .enumerate()
        .map(|(r, m)| {
            if aug.p_e == 0.0 {
                Ok(m.shared_edges())
            } else {
                permute_edges(m.edges(), aug.p_e, derive_seed(seed, &[r as u64])).map(Arc::new)
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(GraphView {
        num_nodes: g.num_nodes(),
        feature_dim: g.feature_dim(),
        features,
        adjacency,
    })
}

/// The two views for `epoch`, drawn from independent streams.
pub fn make_views(g: &HeteroGraph, cfg: &AugmentConfig, epoch: u64) -> Result<(GraphView, GraphView), AugmentError> {
    let v1 = make_view(g, &cfg.views[0], view_seed(cfg.seed, epoch, 0))?;
    let v2 = make_view(g, &cfg.views[1], view_seed(cfg.seed, epoch, 1))?;
    Ok((v1, v2))
}
