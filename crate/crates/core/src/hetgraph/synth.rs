//! Planted-partition generator for desk-scale heterogeneous graphs.
//!
//! Spec files are JSON:
//!
//! ```json
//! {"num_nodes": 200, "num_classes": 3, "feature_dim": 16, "seed": 7,
//!  "metapaths": [{"name": "a", "p_intra": 0.2, "p_inter": 0.02},
//!                {"name": "t", "tree": true, "branching": 2, "noise": 0.05}]}
//! ```
//!
//! Tree subgraphs are heap-shaped b-ary trees. Nodes sorted by class fill
//! the heap positions in depth-first preorder, so each subtree is mostly one
//! class. `noise` adds `round(noise * N)` uniformly random extra edges.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{GraphError, HeteroGraph, MetaPathSubgraph, Result, Split};
use crate::rng::{purpose, rng_for};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaPathSpec {
    pub name: String,
    #[serde(default)]
    pub p_intra: Option<f64>,
    #[serde(default)]
    pub p_inter: Option<f64>,
    #[serde(default)]
    pub tree: bool,
    #[serde(default = "default_branching")]
    pub branching: usize,
    #[serde(default)]
    pub noise: f64,
}

fn default_branching() -> usize {
    2
}

impl MetaPathSpec {
    pub fn sbm(name: impl Into<String>, p_intra: f64, p_inter: f64) -> Self {
        Self {
            name: name.into(),
            p_intra: Some(p_intra),
            p_inter: Some(p_inter),
            tree: false,
            branching: 2,
            noise: 0.0,
        }
    }

    pub fn tree(name: impl Into<String>, branching: usize, noise: f64) -> Self {
        Self {
            name: name.into(),
            p_intra: None,
            p_inter: None,
            tree: true,
            branching,
            noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    #[serde(default)]
    pub seed: u64,
    pub metapaths: Vec<MetaPathSpec>,
    /// Scale of the per-class mean vectors.
    #[serde(default = "one")]
    pub feature_signal: f64,
    /// Standard deviation of the per-node Gaussian noise.
    #[serde(default = "one")]
    pub feature_noise: f64,
    #[serde(default = "default_train")]
    pub train_fraction: f64,
    #[serde(default = "default_val")]
    pub val_fraction: f64,
}

fn one() -> f64 {
    1.0
}
fn default_train() -> f64 {
    0.2
}
fn default_val() -> f64 {
    0.1
}

impl SynthSpec {
    pub fn new(num_nodes: usize, num_classes: usize, feature_dim: usize, seed: u64, metapaths: Vec<MetaPathSpec>) -> Self {
        Self {
            num_nodes,
            num_classes,
            feature_dim,
            seed,
            metapaths,
            feature_signal: 1.0,
            feature_noise: 1.0,
            train_fraction: default_train(),
            val_fraction: default_val(),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GraphError::Spec(m));
        if self.num_classes < 2 || self.num_nodes < self.num_classes {
            return bad(format!(
                "need num_nodes >= num_classes >= 2 (got {} nodes, {} classes)",
                self.num_nodes, self.num_classes
            ));
        }
        if self.metapaths.is_empty() {
            return bad("at least one meta-path is required".into());
        }
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        for m in &self.metapaths {
            if m.tree {
                if m.branching < 1 {
                    return bad(format!("`{}`: branching must be >= 1", m.name));
                }
                if !(m.noise.is_finite() && m.noise >= 0.0) {
                    return bad(format!("`{}`: noise must be a non-negative fraction", m.name));
                }
            } else {
                match (m.p_intra, m.p_inter) {
                    (Some(a), Some(b)) if prob(a) && prob(b) => {}
                    (Some(_), Some(_)) => return bad(format!("`{}`: probabilities outside [0,1]", m.name)),
                    _ => return bad(format!("`{}`: needs p_intra and p_inter, or tree", m.name)),
                }
            }
        }
        let fracs = [self.train_fraction, self.val_fraction];
        if !fracs.iter().all(|&f| prob(f)) || self.train_fraction + self.val_fraction > 1.0 {
            return bad("split fractions must lie in [0,1] and sum to at most 1".into());
        }
        if !(self.feature_signal.is_finite() && self.feature_noise.is_finite() && self.feature_noise >= 0.0) {
            return bad("feature_signal and feature_noise must be finite, noise non-negative".into());
        }
        Ok(())
    }
}

/// Deterministic for a fixed spec (including its seed).
pub fn generate_synthetic(spec: &SynthSpec) -> Result<HeteroGraph> {
    spec.validate()?;
    let n = spec.num_nodes;
    let k = spec.num_classes;
    let f = spec.feature_dim;
    let stream = |sub: u64| rng_for(spec.seed, &[purpose::SYNTH, sub]);

    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut stream(0));

    let mut rng = stream(1);
    let means: Vec<f64> = (0..k * f)
        .map(|_| spec.feature_signal * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut rng = stream(2);
    let mut features = Vec::with_capacity(n * f);
    for &c in &labels {
        for j in 0..f {
            let eps: f64 = rng.sample(StandardNormal);
            features.push(means[c * f + j] + spec.feature_noise * eps);
        }
    }

    let mut metapaths = Vec::with_capacity(spec.metapaths.len());
    for (r, m) in spec.metapaths.iter().enumerate() {
        let mut rng = stream(100 + r as u64);
        let pairs = if m.tree {
            tree_pairs(&labels, m.branching, m.noise, &mut rng)
        } else {
            let (pi, po) = (m.p_intra.unwrap_or(0.0), m.p_inter.unwrap_or(0.0));
            let mut pairs = Vec::new();
            for u in 0..n {
                for v in u + 1..n {
                    let p = if labels[u] == labels[v] { pi } else { po };
                    if rng.random::<f64>() < p {
                        pairs.push((u, v));
                    }
                }
            }
            pairs
        };
        metapaths.push(MetaPathSubgraph::from_pairs(m.name.clone(), r, n, &pairs));
    }

    let mut splits = vec![Split::Test; n];
    let mut rng = stream(3);
    for c in 0..k {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let m = members.len() as f64;
        let n_train = ((spec.train_fraction * m).round() as usize).max(1).min(members.len());
        let n_val = ((spec.val_fraction * m).round() as usize).min(members.len() - n_train);
        for (idx, &node) in members.iter().enumerate() {
            splits[node] = if idx < n_train {
                Split::Train
            } else if idx < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }

    HeteroGraph::new(n, f, features, metapaths)?
        .with_labels(labels.into_iter().map(Some).collect())?
        .with_splits(splits.into_iter().map(Some).collect())
}

fn tree_pairs(labels: &[usize], b: usize, noise: f64, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (labels[i], i));

    // Preorder walk over heap positions 0..n with children b*p+1..=b*p+b.
    let mut preorder = Vec::with_capacity(n);
    let mut stack = vec![0usize];
    while let Some(p) = stack.pop() {
        preorder.push(p);
        for c in (b * p + 1..=b * p + b).rev() {
            if c < n {
                stack.push(c);
            }
        }
    }
    let mut at = vec![0usize; n];
    for (rank, &p) in preorder.iter().enumerate() {
        at[p] = order[rank];
    }

    let mut pairs: Vec<(usize, usize)> = (1..n).map(|p| (at[(p - 1) / b], at[p])).collect();
    let extra = (noise * n as f64).round() as usize;
    if n >= 2 {
        for _ in 0..extra {
            let u = rng.random_range(0..n);
            let mut v = rng.random_range(0..n - 1);
            if v >= u {
                v += 1;
            }
            pairs.push((u, v));
        }
    }
    pairs
}
