//! Euclidean and hyperbolic meta-path encoders, attention fusion, graph
//! readout, projection head and ultimate embeddings.
//!
//! Parameter names used in a [`ParamSet`]:
//!
//! | name | shape |
//! |---|---|
//! | `euc.W.{m}` / `hyp.W.{m}` | `F x d` (first layer), `d x d` (layer `l > 0`, suffixed `.{l}`) |
//! | `euc.b.{m}` / `hyp.b.{m}` | `1 x d` (hyperbolic bias kept in the tangent space at 0) |
//! | `att.q.{m}` | `d x 1`, shared by both views |
//! | `proj.W1`, `proj.W2` | `d x d` |
//! | `proj.b1`, `proj.b2` | `1 x d` |

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::GraphView;
use crate::hetgraph::HeteroGraph;
use crate::manifold::{self, BallConfig, ManifoldError};
use crate::ndtensor::{Init, ParamSet, ParamSpec, Tape, Tensor, TensorError, Var};
use crate::rng::derive_seed;
use crate::sparse::Csr;
use crate::Real;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error("model config: {0}")]
    Config(String),
    #[error("view does not match the model: {0}")]
    View(String),
}

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub dim: usize,
    pub num_metapaths: usize,
    #[serde(default = "one")]
    pub layers: usize,
    /// Dropout rate on encoder outputs while training.
    pub dropout: f64,
    pub curvature: f64,
    /// Apply the readout sigmoid to the hyperbolic view as well.
    #[serde(default = "yes")]
    pub hyperbolic_readout_sigmoid: bool,
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn new(feature_dim: usize, dim: usize, num_metapaths: usize) -> Self {
        Self {
            feature_dim,
            dim,
            num_metapaths,
            layers: 1,
            dropout: 0.0,
            curvature: 1.0,
            hyperbolic_readout_sigmoid: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EncoderError::Config(m.to_string()));
        if self.dim == 0 || self.feature_dim == 0 {
            return bad("dim and feature_dim must be positive");
        }
        if self.num_metapaths == 0 {
            return bad("at least one meta-path is required");
        }
        if self.layers == 0 {
            return bad("layers must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.curvature.is_finite() && self.curvature > 0.0) {
            return bad("curvature must be positive");
        }
        Ok(())
    }

    /// Every encoder parameter with its shape and initializer.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.dim;
        let mut out = Vec::new();
        for branch in ["euc", "hyp"] {
            for m in 0..self.num_metapaths {
                for l in 0..self.layers {
                    let fan_in = if l == 0 { self.feature_dim } else { d };
                    out.push(ParamSpec::new(layer_name(branch, 'W', m, l), fan_in, d, Init::Glorot));
                    out.push(ParamSpec::new(layer_name(branch, 'b', m, l), 1, d, Init::Zeros));
                }
            }
        }
        for m in 0..self.num_metapaths {
            out.push(ParamSpec::new(format!("att.q.{m}"), d, 1, Init::Uniform(1e-2)));
        }
        out.push(ParamSpec::new("proj.W1", d, d, Init::Glorot));
        out.push(ParamSpec::new("proj.b1", 1, d, Init::Zeros));
        out.push(ParamSpec::new("proj.W2", d, d, Init::Glorot));
        out.push(ParamSpec::new("proj.b2", 1, d, Init::Zeros));
        out
    }
}

fn layer_name(branch: &str, kind: char, m: usize, l: usize) -> String {
    if l == 0 {
        format!("{branch}.{kind}.{m}")
    } else {
        format!("{branch}.{kind}.{m}.{l}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Euclidean,
    Hyperbolic,
}

/// Embeddings of one view, all recorded on the same tape.
#[derive(Debug, Clone)]
pub struct ViewEmbeddings<'t, T: Real> {
    pub branch: Branch,
    /// `H^m`, one `N x d` matrix per meta-path.
    pub per_metapath: Vec<Var<'t, T>>,
    /// `h_g^m`, one `1 x d` row per meta-path.
    pub graph_per_metapath: Vec<Var<'t, T>>,
    /// Fused node matrix `N x d`.
    pub fused: Var<'t, T>,
    /// Fused graph vector `1 x d`.
    pub graph: Var<'t, T>,
    /// Attention weights `N x |M|`.
    pub alpha: Var<'t, T>,
}

/// One Euclidean layer:
/// `h_i = ReLU( sum_{j in {i} + N(i)} (W^T x_j) / (|N(i)| + 1) + b )`.
/// `w` is `F x d`, `b` is `1 x d`.
pub fn euclidean_layer<'t, T: Real>(x: Var<'t, T>, adj: &Arc<Csr>, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let n = x.shape().0;
    if adj.num_rows() != n {
        return Err(EncoderError::View(format!("{} feature rows, {} adjacency rows", n, adj.num_rows())));
    }
    let weights = (0..n).map(|i| T::one() / T::of((adj.degree(i) + 1) as f64)).collect();
    Ok(x.matmul(w)?.aggregate(Arc::clone(adj), weights)?.add_row(b)?.relu())
}

/// One hyperbolic layer in tangential-aggregation form. Inputs are tangent
/// vectors at the origin; each is lifted with `exp0`, transformed by
/// `(W (x)_c x_j) (+)_c exp0(b)`, pulled back with `log0`, summed over
/// `{i} + N(i)`, passed through ReLU, mapped to the ball with `exp0`, and
/// returned as `log0` of that point.
pub fn hyperbolic_layer<'t, T: Real>(
    x: Var<'t, T>,
    adj: &Arc<Csr>,
    w: Var<'t, T>,
    b_raw: Var<'t, T>,
    ball: &BallConfig<T>,
) -> Result<Var<'t, T>> {
    let n = x.shape().0;
    if adj.num_rows() != n {
        return Err(EncoderError::View(format!("{} feature rows, {} adjacency rows", n, adj.num_rows())));
    }
    let xh = manifold::exp0_rows(x, ball)?;
    let wx = manifold::mobius_matvec_rows(xh, w, ball)?;
    let bias = manifold::exp0_rows(b_raw, ball)?.broadcast_rows(n)?;
    let msg = manifold::log0_rows(manifold::mobius_add_rows(wx, bias, ball)?, ball)?;
    let agg = msg.aggregate(Arc::clone(adj), vec![T::one(); n])?.relu();
    Ok(manifold::log0_rows(manifold::exp0_rows(agg, ball)?, ball)?)
}

/// Attention fusion over meta-paths: `alpha_i^m = softmax_m(q_m . h_i^m)`
/// and `h_i = sum_m alpha_i^m h_i^m`. Returns `(H, alpha)`.
pub fn attention_fuse<'t, T: Real>(hs: &[Var<'t, T>], qs: &[Var<'t, T>]) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if hs.is_empty() || hs.len() != qs.len() {
        return Err(EncoderError::View(format!("{} embeddings for {} attention queries", hs.len(), qs.len())));
    }
    let tape = hs[0].tape();
    let scores: Vec<Var<'t, T>> = hs.iter().zip(qs).map(|(h, q)| h.matmul(*q)).collect::<Result<_, _>>()?;
    let alpha = tape.concat_cols(&scores)?.softmax_rows();
    let mut fused = hs[0].mul_col(alpha.column(0)?)?;
    for (m, h) in hs.iter().enumerate().skip(1) {
        fused = fused.add(h.mul_col(alpha.column(m)?)?)?;
    }
    Ok((fused, alpha))
}

/// `sigmoid(mean_i h_i)` as a `1 x d` row (sigmoid optional).
pub fn graph_readout<'t, T: Real>(h: Var<'t, T>, sigmoid: bool) -> Result<Var<'t, T>> {
    let mean = h.col_mean()?;
    Ok(if sigmoid { mean.sigmoid() } else { mean })
}

/// Two-layer projection head `ReLU(H W1 + b1) W2 + b2`.
pub fn project<'t, T: Real>(
    h: Var<'t, T>,
    w1: Var<'t, T>,
    b1: Var<'t, T>,
    w2: Var<'t, T>,
    b2: Var<'t, T>,
) -> Result<Var<'t, T>> {
    Ok(h.matmul(w1)?.add_row(b1)?.relu().matmul(w2)?.add_row(b2)?)
}

/// Elementwise mean of the two views' embeddings.
pub fn ultimate_embeddings<'t, T: Real>(h: Var<'t, T>, h_tilde: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(h.add(h_tilde)?.scalar_mul(T::of(0.5)))
}

/// Model configuration plus its parameters (encoders, attention, projection
/// and, when present, the discriminators used in training).
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f64> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    ball: BallConfig<T>,
}

impl<T: Real> Model<T> {
    /// Wraps `params`, checking that every encoder parameter exists with
    /// the expected shape.
    pub fn new(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        for spec in config.param_specs() {
            let t = params
                .get(&spec.name)
                .ok_or_else(|| EncoderError::Config(format!("missing parameter `{}`", spec.name)))?;
            if t.rows() != spec.rows || t.cols() != spec.cols {
                return Err(EncoderError::Config(format!(
                    "parameter `{}` has shape {:?}, expected [{}, {}]",
                    spec.name,
                    t.shape(),
                    spec.rows,
                    spec.cols
                )));
            }
        }
        let ball = BallConfig::with_curvature(T::of(config.curvature))?;
        Ok(Self { config, params, ball })
    }

    pub fn ball(&self) -> &BallConfig<T> {
        &self.ball
    }

    /// Encodes one view with the given branch. `dropout_seed = None` turns
    /// dropout off (evaluation).
    pub fn encode_view<'t>(
        &self,
        tape: &'t Tape<T>,
        view: &GraphView,
        branch: Branch,
        dropout_seed: Option<u64>,
    ) -> Result<ViewEmbeddings<'t, T>> {
        let cfg = &self.config;
        if view.feature_dim != cfg.feature_dim || view.adjacency.len() != cfg.num_metapaths {
            return Err(EncoderError::View(format!(
                "view has F={} and {} meta-paths, model expects F={} and {}",
                view.feature_dim,
                view.adjacency.len(),
                cfg.feature_dim,
                cfg.num_metapaths
            )));
        }
        let x = tape.constant(view.feature_tensor());
        let prefix = match branch {
            Branch::Euclidean => "euc",
            Branch::Hyperbolic => "hyp",
        };
        let mut per_metapath = Vec::with_capacity(cfg.num_metapaths);
        for (m, adj) in view.adjacency.iter().enumerate() {
            let mut h = x;
            for l in 0..cfg.layers {
                let w = self.params.bind(tape, &layer_name(prefix, 'W', m, l))?;
                let b = self.params.bind(tape, &layer_name(prefix, 'b', m, l))?;
                h = match branch {
                    Branch::Euclidean => euclidean_layer(h, adj, w, b)?,
                    Branch::Hyperbolic => hyperbolic_layer(h, adj, w, b, &self.ball)?,
                };
                if let Some(seed) = dropout_seed {
                    if cfg.dropout > 0.0 {
                        let s = derive_seed(seed, &[branch as u64, m as u64, l as u64]);
                        h = h.dropout(cfg.dropout, s)?;
                    }
                }
            }
            per_metapath.push(h);
        }
        let sigmoid = branch == Branch::Euclidean || cfg.hyperbolic_readout_sigmoid;
        let graph_per_metapath: Vec<_> = per_metapath
            .iter()
            .map(|h| graph_readout(*h, sigmoid))
            .collect::<Result<_>>()?;
        let qs: Vec<_> = (0..cfg.num_metapaths)
            .map(|m| self.params.bind(tape, &format!("att.q.{m}")))
            .collect::<Result<_, _>>()?;
        let (fused, alpha) = attention_fuse(&per_metapath, &qs)?;
        let (graph, _) = attention_fuse(&graph_per_metapath, &qs)?;
        Ok(ViewEmbeddings {
            branch,
            per_metapath,
            graph_per_metapath,
            fused,
            graph,
            alpha,
        })
    }

    /// Applies the shared projection head.
    pub fn project<'t>(&self, tape: &'t Tape<T>, h: Var<'t, T>) -> Result<Var<'t, T>> {
        let p = |n: &str| self.params.bind(tape, n);
        project(h, p("proj.W1")?, p("proj.b1")?, p("proj.W2")?, p("proj.b2")?)
    }

    /// `H_ult` of the unaugmented graph without dropout: the mean of the
    /// Euclidean and hyperbolic fused embeddings.
    pub fn embed(&self, g: &HeteroGraph) -> Result<Tensor<T>> {
        self.embed_view(&GraphView::identity(g))
    }

    pub fn embed_view(&self, view: &GraphView) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let e = self.encode_view(&tape, view, Branch::Euclidean, None)?;
        let h = self.encode_view(&tape, view, Branch::Hyperbolic, None)?;
        Ok(ultimate_embeddings(e.fused, h.fused)?.value())
    }
}

/// Writes `node_id<TAB>v_1<TAB>...<TAB>v_d` lines. Values use the shortest
/// representation that round-trips, so equal matrices give equal bytes.
pub fn embeddings_to_tsv<T: Real>(ids: &[String], h: &Tensor<T>) -> String {
    let mut out = String::new();
    for (i, id) in ids.iter().enumerate() {
        out.push_str(id);
        for &v in h.row(i) {
            let _ = write!(out, "\t{}", v.as_f64());
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Error)]
pub enum TsvError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Parsed embedding file: node ids in file order and an `N x d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub ids: Vec<String>,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl EmbeddingTable {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn read_embeddings(reader: impl Read) -> Result<EmbeddingTable, TsvError> {
    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut dim = None;
    for (k, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let mut toks = line.split_whitespace();
        let Some(id) = toks.next() else { continue };
        let row: Vec<f64> = toks
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| TsvError::Parse {
                line: k + 1,
                msg: e.to_string(),
            })?;
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(TsvError::Parse {
                    line: k + 1,
                    msg: format!("expected {d} values, found {}", row.len()),
                })
            }
            _ => {}
        }
        ids.push(id.to_string());
        values.extend(row);
    }
    Ok(EmbeddingTable {
        ids,
        dim: dim.unwrap_or(0),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn isolated_node_identity_weights_is_relu() {
        let tape = Tape::new();
        let x = tape.constant(tensor(&[vec![1.0, -2.0]]));
        let adj = Arc::new(Csr::empty(1));
        let w = tape.constant(Tensor::identity(2));
        let b = tape.constant(Tensor::zeros(1, 2));
        let h = euclidean_layer(x, &adj, w, b).unwrap().value();
        assert_eq!(h.data(), &[1.0, 0.0]);
    }

    #[test]
    fn hyperbolic_layer_collapses_with_zero_weights() {
        let tape = Tape::new();
        let x = tape.constant(tensor(&[vec![0.3, 0.1], vec![-0.2, 0.4]]));
        let adj = Arc::new(Csr::symmetric_from_pairs(2, &[(0, 1)]).0);
        let w = tape.constant(Tensor::zeros(2, 2));
        let b = tape.constant(Tensor::zeros(1, 2));
        let ball = BallConfig::default();
        let h = hyperbolic_layer(x, &adj, w, b, &ball).unwrap().value();
        assert!(h.data().iter().all(|v| v.abs() < 1e-12), "{h:?}");
    }

    #[test]
    fn attention_identical_inputs_split_evenly() {
        let tape = Tape::new();
        let h = tape.constant(tensor(&[vec![1.0, 2.0], vec![3.0, -1.0]]));
        let q1 = tape.constant(tensor(&[vec![0.5], vec![0.1]]));
        let (fused, alpha) = attention_fuse(&[h, h], &[q1, q1]).unwrap();
        assert!(alpha.value().data().iter().all(|a| (a - 0.5).abs() < 1e-15));
        assert!(fused.value().max_abs_diff(&h.value()) < 1e-15);
        let (single, a1) = attention_fuse(&[h], &[q1]).unwrap();
        assert_eq!(a1.value().data(), &[1.0, 1.0]);
        assert_eq!(single.value(), h.value());
    }

    #[test]
    fn readout_examples() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(3, 2));
        assert_eq!(graph_readout(z, true).unwrap().value().data(), &[0.5, 0.5]);
        let pm = tape.constant(tensor(&[vec![1.5, -2.0], vec![-1.5, 2.0]]));
        assert_eq!(graph_readout(pm, true).unwrap().value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn projection_and_ultimate_examples() {
        let tape = Tape::new();
        let h = tape.constant(tensor(&[vec![1.0, -1.0]]));
        let i = tape.constant(Tensor::identity(2));
        let zero = tape.constant(Tensor::zeros(1, 2));
        assert_eq!(project(h, i, zero, i, zero).unwrap().value().data(), &[1.0, 0.0]);
        let w0 = tape.constant(Tensor::zeros(2, 2));
        let b2 = tape.constant(tensor(&[vec![0.25, 7.0]]));
        assert_eq!(project(h, i, zero, w0, b2).unwrap().value().data(), &[0.25, 7.0]);
        let a = tape.constant(tensor(&[vec![2.0]]));
        let b = tape.constant(tensor(&[vec![4.0]]));
        assert_eq!(ultimate_embeddings(a, b).unwrap().value().data(), &[3.0]);
    }

    #[test]
    fn tsv_round_trip() {
        let h = tensor(&[vec![0.1, -2.5e-7], vec![3.0, 1.0 / 3.0]]);
        let text = embeddings_to_tsv(&["a".into(), "b".into()], &h);
        let back = read_embeddings(text.as_bytes()).unwrap();
        assert_eq!(back.ids, vec!["a", "b"]);
        assert_eq!(back.values, h.data());
        assert!(read_embeddings("a 1 2\nb 3\n".as_bytes()).is_err());
    }
}
