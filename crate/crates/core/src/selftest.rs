//! Built-in invariant suite, run by `gcl selftest`.
//!
//! Each check is small enough to finish in well under a second except the
//! gradient checks, which differentiate every core op and the full training
//! objective on a six-node graph.

use std::error::Error;
use std::sync::Arc;

use rand::Rng;

use crate::augment::{mask_attributes, permute_edges};
use crate::encoders::{attention_fuse, euclidean_layer, graph_readout, hyperbolic_layer, project, Model};
use crate::evalkit::{ari, nmi, probe_indices, similarity_search, Rows};
use crate::hetgraph::{generate_synthetic, gromov_hyperbolicity, HeteroGraph, MetaPathSpec, MetaPathSubgraph, SynthSpec};
use crate::manifold::{self, BallConfig, PoincarePoint};
use crate::ndtensor::{gradcheck, ParamSet, Tape, Tensor, Var};
use crate::rng::rng_for;
use crate::sparse::Csr;
use crate::trainer::{self, TrainConfig};

type BoxError = Box<dyn Error + Send + Sync>;
type CheckResult = Result<String, String>;

/// Result of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Gradient checks must agree to this relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Finite-difference step.
pub const GRAD_STEP: f64 = 1e-5;

pub fn checks() -> Vec<(&'static str, fn() -> CheckResult)> {
    vec![
        ("manifold identities", manifold_identities as fn() -> CheckResult),
        ("euclidean limit", euclidean_limit),
        ("core op gradients", op_gradients),
        ("objective gradient", objective_gradient),
        ("bce fixed point", bce_fixed_point),
        ("hyperbolicity", hyperbolicity),
        ("augmentation", augmentation),
        ("training determinism", training_determinism),
        ("evaluation", evaluation),
    ]
}

pub fn run_all() -> Vec<CheckOutcome> {
    checks()
        .into_iter()
        .map(|(name, f)| match f() {
            Ok(detail) => CheckOutcome {
                name,
                passed: true,
                detail,
            },
            Err(detail) => CheckOutcome {
                name,
                passed: false,
                detail,
            },
        })
        .collect()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_point(rng: &mut impl Rng, d: usize, radius: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let r = radius * rng.random::<f64>();
    v.iter().map(|x| x * r / n).collect()
}

fn manifold_identities() -> CheckResult {
    let cfg = BallConfig::default();
    let mut rng = rng_for(1, &[0]);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x = PoincarePoint::new(random_point(&mut rng, 4, 0.95), &cfg);
        let zero = PoincarePoint::origin(4);
        let right = manifold::mobius_add(&x, &zero, &cfg).map_err(err)?;
        let inverse = manifold::mobius_add(&x.neg(), &x, &cfg).map_err(err)?;
        let v = random_point(&mut rng, 4, 2.0);
        let back = manifold::log0(&manifold::exp0(&v, &cfg), &cfg);
        let y = PoincarePoint::new(random_point(&mut rng, 4, 0.9), &cfg);
        let u = manifold::log_map(&x, &y, &cfg).map_err(err)?;
        let y2 = manifold::exp_map(&x, &u, &cfg).map_err(err)?;
        worst = worst
            .max(max_diff(right.coords(), x.coords()))
            .max(max_diff(inverse.coords(), &[0.0; 4]))
            .max(max_diff(&back, &v))
            .max(max_diff(y2.coords(), y.coords()));
    }
    ensure(worst <= 1e-8, || format!("max deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:.1e} over 1000 points"))
}

fn euclidean_limit() -> CheckResult {
    let cfg = BallConfig::with_curvature(1e-6).map_err(err)?;
    let mut rng = rng_for(2, &[0]);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let v = random_point(&mut rng, 3, 1.0);
        let x = random_point(&mut rng, 3, 1.0);
        let y = random_point(&mut rng, 3, 1.0);
        let e = manifold::exp0(&v, &cfg);
        let s = manifold::mobius_add(&PoincarePoint::new(x.clone(), &cfg), &PoincarePoint::new(y.clone(), &cfg), &cfg)
            .map_err(err)?;
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        worst = worst.max(max_diff(e.coords(), &v)).max(max_diff(s.coords(), &sum));
    }
    ensure(worst <= 1e-4, || format!("max deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:.1e} at c=1e-6"))
}

type OpCase = for<'t> fn(&'t Tape<f64>, &ParamSet<f64>) -> Result<Var<'t, f64>, BoxError>;

/// Weighted sum with fixed, non-uniform weights so every output entry
/// contributes a distinct amount to the scalar.
fn reduce<'t>(v: Var<'t, f64>) -> Result<Var<'t, f64>, BoxError> {
    let (r, c) = v.shape();
    let w: Vec<f64> = (0..r * c).map(|k| ((k + 1) as f64).sin()).collect();
    let w = v.tape().constant(Tensor::matrix(r, c, w)?);
    Ok(v.hadamard(w)?.sum())
}

/// Inputs for the op catalogue: `a`, `c` are `3x4`, `b` is `4x3`, `r` is
/// `1x4`, `s` is `3x1`, `p` is positive `3x4`, `u` lies in `(-0.8, 0.8)`.
pub fn op_inputs(seed: u64) -> ParamSet<f64> {
    let mut rng = rng_for(seed, &[0]);
    let mut m = |rows: usize, cols: usize, lo: f64, hi: f64| {
        let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::matrix(rows, cols, data).expect("shape")
    };
    let mut ps = ParamSet::new();
    ps.insert("a", m(3, 4, -1.0, 1.0));
    ps.insert("b", m(4, 3, -1.0, 1.0));
    ps.insert("c", m(3, 4, -1.0, 1.0));
    ps.insert("r", m(1, 4, -1.0, 1.0));
    ps.insert("s", m(3, 1, 0.5, 1.5));
    ps.insert("p", m(3, 4, 0.5, 1.5));
    ps.insert("u", m(3, 4, -0.8, 0.8));
    ps
}

fn path3() -> Arc<Csr> {
    Arc::new(Csr::symmetric_from_pairs(3, &[(0, 1), (1, 2)]).0)
}

/// One differentiable case per core op (plus the manifold and encoder
/// kernels built on them).
pub fn op_cases() -> Vec<(&'static str, OpCase)> {
    vec![
        ("matmul", |t, p| reduce(p.bind(t, "a")?.matmul(p.bind(t, "b")?)?)),
        ("add", |t, p| reduce(p.bind(t, "a")?.add(p.bind(t, "c")?)?.tanh())),
        ("sub", |t, p| reduce(p.bind(t, "a")?.sub(p.bind(t, "c")?)?.tanh())),
        ("hadamard", |t, p| reduce(p.bind(t, "a")?.hadamard(p.bind(t, "c")?)?)),
        ("add_row", |t, p| reduce(p.bind(t, "a")?.add_row(p.bind(t, "r")?)?.tanh())),
        ("mul_col", |t, p| reduce(p.bind(t, "a")?.mul_col(p.bind(t, "s")?)?)),
        ("div_col", |t, p| reduce(p.bind(t, "a")?.div_col(p.bind(t, "s")?)?)),
        ("scalar_mul", |t, p| reduce(p.bind(t, "a")?.scalar_mul(-1.7).tanh())),
        ("add_scalar", |t, p| reduce(p.bind(t, "a")?.add_scalar(0.3).tanh())),
        ("neg", |t, p| reduce(p.bind(t, "a")?.neg().tanh())),
        ("sum", |t, p| Ok(p.bind(t, "a")?.tanh().sum())),
        ("mean", |t, p| Ok(p.bind(t, "a")?.tanh().mean())),
        ("rowsum", |t, p| reduce(p.bind(t, "a")?.tanh().rowsum())),
        ("row_dot", |t, p| reduce(p.bind(t, "a")?.row_dot(p.bind(t, "c")?)?)),
        ("col_mean", |t, p| reduce(p.bind(t, "a")?.tanh().col_mean()?)),
        ("column", |t, p| reduce(p.bind(t, "a")?.tanh().column(2)?)),
        ("transpose", |t, p| reduce(p.bind(t, "a")?.tanh().transpose())),
        ("broadcast_rows", |t, p| reduce(p.bind(t, "r")?.broadcast_rows(3)?.tanh())),
        ("gather_rows", |t, p| reduce(p.bind(t, "a")?.gather_rows(&[2, 0, 2, 1])?.tanh())),
        ("concat_rows", |t, p| reduce(t.concat_rows(&[p.bind(t, "a")?, p.bind(t, "r")?])?.tanh())),
        ("concat_cols", |t, p| reduce(t.concat_cols(&[p.bind(t, "a")?, p.bind(t, "s")?])?.tanh())),
        ("aggregate", |t, p| {
            reduce(p.bind(t, "a")?.aggregate(path3(), vec![0.5, 1.0 / 3.0, 0.5])?.tanh())
        }),
        ("relu", |t, p| reduce(p.bind(t, "a")?.relu())),
        ("sigmoid", |t, p| reduce(p.bind(t, "a")?.sigmoid())),
        ("tanh", |t, p| reduce(p.bind(t, "a")?.tanh())),
        ("artanh", |t, p| reduce(p.bind(t, "u")?.artanh()?)),
        ("exp", |t, p| reduce(p.bind(t, "a")?.exp())),
        ("log", |t, p| reduce(p.bind(t, "p")?.log()?)),
        ("recip", |t, p| reduce(p.bind(t, "p")?.recip()?)),
        ("l2_norm_rows", |t, p| reduce(p.bind(t, "a")?.l2_norm_rows())),
        ("clamp_min", |t, p| reduce(p.bind(t, "a")?.clamp_min(0.1))),
        ("clip_row_norm", |t, p| reduce(p.bind(t, "a")?.clip_row_norm(1.0))),
        ("softmax_rows", |t, p| reduce(p.bind(t, "a")?.softmax_rows())),
        ("dropout", |t, p| reduce(p.bind(t, "a")?.dropout(0.5, 9)?.tanh())),
        ("bce_with_logits", |t, p| {
            let logits = p.bind(t, "a")?.matmul(p.bind(t, "b")?)?.column(0)?;
            Ok(logits.bce_with_logits(&[1.0, 0.0, 1.0])?)
        }),
        ("bce_with_logits_weighted", |t, p| {
            let logits = p.bind(t, "s")?.add_scalar(-1.0);
            Ok(logits.bce_with_logits_weighted(&[0.0, 1.0, 1.0], &[0.5, 1.0, 2.0])?)
        }),
        ("exp0_rows", |t, p| reduce(manifold::exp0_rows(p.bind(t, "a")?, &BallConfig::default())?)),
        ("log0_rows", |t, p| {
            reduce(manifold::log0_rows(p.bind(t, "u")?.scalar_mul(0.5), &BallConfig::default())?)
        }),
        ("mobius_add_rows", |t, p| {
            let cfg = BallConfig::default();
            let x = manifold::exp0_rows(p.bind(t, "a")?, &cfg)?;
            let y = manifold::exp0_rows(p.bind(t, "c")?, &cfg)?;
            reduce(manifold::mobius_add_rows(x, y, &cfg)?)
        }),
        ("mobius_matvec_rows", |t, p| {
            let cfg = BallConfig::default();
            let x = manifold::exp0_rows(p.bind(t, "a")?, &cfg)?;
            reduce(manifold::mobius_matvec_rows(x, p.bind(t, "b")?.scalar_mul(0.5), &cfg)?)
        }),
        ("euclidean_layer", |t, p| {
            let h = euclidean_layer(p.bind(t, "a")?, &path3(), p.bind(t, "b")?, p.bind(t, "s")?.transpose())?;
            reduce(h)
        }),
        ("hyperbolic_layer", |t, p| {
            let cfg = BallConfig::default();
            let b = p.bind(t, "s")?.transpose().scalar_mul(0.2);
            reduce(hyperbolic_layer(p.bind(t, "a")?, &path3(), p.bind(t, "b")?, b, &cfg)?)
        }),
        ("attention_fuse", |t, p| {
            let q = p.bind(t, "b")?;
            let (h, _) = attention_fuse(&[p.bind(t, "a")?, p.bind(t, "c")?], &[q.column(0)?, q.column(1)?])?;
            reduce(h)
        }),
        ("graph_readout", |t, p| reduce(graph_readout(p.bind(t, "a")?, true)?)),
        ("project", |t, p| {
            let w = p.bind(t, "b")?;
            let h = project(p.bind(t, "a")?, w, p.bind(t, "s")?.transpose(), w.transpose(), p.bind(t, "r")?)?;
            reduce(h)
        }),
    ]
}

/// Largest relative error over all op cases, with the offending case.
pub fn op_gradient_report() -> Result<Vec<(&'static str, f64)>, BoxError> {
    let mut out = Vec::new();
    for (name, f) in op_cases() {
        let mut ps = op_inputs(3);
        let r = gradcheck(&mut ps, f, GRAD_STEP)?;
        out.push((name, r.max_rel_error));
    }
    Ok(out)
}

fn op_gradients() -> CheckResult {
    let report = op_gradient_report().map_err(err)?;
    let (name, worst) = report
        .iter()
        .copied()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or(("", 0.0));
    ensure(worst <= GRAD_TOLERANCE, || format!("{name}: relative error {worst:e}"))?;
    Ok(format!("{} ops, worst {name} {worst:.1e}", report.len()))
}

/// Six nodes, three features, two meta-paths with labels in two classes.
pub fn six_node_graph() -> HeteroGraph {
    let features = vec![
        0.9, 0.1, -0.3, //
        0.8, -0.2, 0.1, //
        1.1, 0.3, -0.5, //
        -0.7, 0.6, 0.2, //
        -0.9, 0.4, 0.7, //
        -0.6, 0.9, -0.1,
    ];
    let m0 = MetaPathSubgraph::from_pairs("a", 0, 6, &[(0, 1), (1, 2), (3, 4), (4, 5), (2, 3)]);
    let m1 = MetaPathSubgraph::from_pairs("b", 1, 6, &[(0, 2), (3, 5), (1, 4), (0, 5)]);
    HeteroGraph::new(6, 3, features, vec![m0, m1])
        .and_then(|g| g.with_labels(vec![Some(0), Some(0), Some(0), Some(1), Some(1), Some(1)]))
        .expect("valid graph")
}

/// Config with every loss term active and small enough for finite
/// differences.
pub fn six_node_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        dim: 4,
        beta: 0.5,
        lambda: 0.5,
        gamma: 0.5,
        sample_size: 6,
        seed: 11,
        ..TrainConfig::default()
    };
    for v in &mut cfg.views {
        v.p_a = 0.2;
        v.p_e = 0.2;
    }
    cfg
}

/// Gradient check of the full objective on [`six_node_graph`].
pub fn objective_gradcheck() -> Result<crate::ndtensor::GradCheck, BoxError> {
    let g = six_node_graph();
    let cfg = six_node_config();
    let mc = cfg.model_config(&g);
    let model: Model<f64> = trainer::init_model(mc.clone(), g.num_relations(), cfg.seed)?;
    let inputs = trainer::epoch_inputs(&g, &cfg, 0)?;
    let weights = cfg.weights();
    // Zero-initialized biases put ReLU inputs exactly on the kink; move
    // every parameter to a generic nearby point.
    let mut params = model.params.clone();
    let mut rng = rng_for(cfg.seed, &[1]);
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    let r = gradcheck(
        &mut params,
        |tape, ps| -> Result<Var<'_, f64>, BoxError> {
            let m = Model::new(mc.clone(), ps.clone())?;
            let (loss, _) = trainer::objective(tape, &m, &inputs, &weights)?;
            // `loss` is recorded on `tape`; `m` only lends parameter values.
            Ok(loss)
        },
        GRAD_STEP,
    )?;
    Ok(r)
}

fn objective_gradient() -> CheckResult {
    let r = objective_gradcheck().map_err(err)?;
    ensure(r.max_rel_error <= GRAD_TOLERANCE, || {
        format!("{}: relative error {:e}", r.worst, r.max_rel_error)
    })?;
    Ok(format!("{} entries, worst {:.1e}", r.checked, r.max_rel_error))
}

fn bce_fixed_point() -> CheckResult {
    let g = six_node_graph();
    let cfg = six_node_config();
    let mut model: Model<f64> = trainer::init_model(cfg.model_config(&g), g.num_relations(), cfg.seed).map_err(err)?;
    for (name, t) in model.params.iter_mut() {
        if name.starts_with("disc.") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let inputs = trainer::epoch_inputs(&g, &cfg, 0).map_err(err)?;
    let tape = Tape::new();
    let (_, parts) = trainer::objective(&tape, &model, &inputs, &cfg.weights()).map_err(err)?;
    let ln2 = std::f64::consts::LN_2;
    let worst = [parts.lg, parts.node, parts.rel]
        .iter()
        .map(|v| (v - ln2).abs())
        .fold(0.0, f64::max);
    ensure(worst <= 1e-12, || format!("deviation from ln 2: {worst:e}"))?;
    Ok(format!("lg, node, rel within {worst:.1e} of ln 2"))
}

fn hyperbolicity() -> CheckResult {
    let tree = generate_synthetic(&SynthSpec::new(15, 2, 2, 0, vec![MetaPathSpec::tree("tree", 2, 0.0)]))
        .map_err(err)?;
    let d_tree = gromov_hyperbolicity(&tree.metapaths()[0]).map_err(err)?.delta;
    let c4 = MetaPathSubgraph::from_pairs("c4", 0, 4, &[(0, 1), (1, 2), (2, 3), (3, 0)]);
    let d_c4 = gromov_hyperbolicity(&c4).map_err(err)?.delta;
    ensure(d_tree == 0.0 && d_c4 == 1.0, || format!("tree {d_tree}, C4 {d_c4}"))?;
    Ok("tree 0, C4 1".into())
}

fn augmentation() -> CheckResult {
    let g = generate_synthetic(&SynthSpec::new(40, 2, 5, 3, vec![MetaPathSpec::sbm("m", 0.3, 0.05)])).map_err(err)?;
    let adj = g.metapaths()[0].edges();
    for seed in 0..50 {
        let a = permute_edges(adj, 0.4, seed).map_err(err)?;
        ensure(a.is_symmetric(), || format!("asymmetric view for seed {seed}"))?;
        let subset = a.undirected_edges().iter().all(|&(u, v)| adj.contains(u, v));
        ensure(subset, || format!("edge added for seed {seed}"))?;
        let x = mask_attributes(g.features(), g.feature_dim(), 0.4, seed).map_err(err)?;
        let ok = x
            .iter()
            .zip(g.features())
            .all(|(m, o)| *m == *o || *m == 0.0);
        ensure(ok, || format!("mask altered a kept entry for seed {seed}"))?;
    }
    Ok("50 seeds symmetric, subset, column-masked".into())
}

fn training_determinism() -> CheckResult {
    let g = six_node_graph();
    let cfg = TrainConfig {
        epochs_max: 5,
        ..six_node_config()
    };
    let a = trainer::train::<f64>(&g, &cfg).map_err(err)?;
    let b = trainer::train::<f64>(&g, &cfg).map_err(err)?;
    let same_losses = a.report.losses_tsv() == b.report.losses_tsv();
    let same_embeddings = a.embeddings.data() == b.embeddings.data();
    ensure(same_losses && same_embeddings, || "runs diverged".into())?;
    Ok(format!("{} epochs bit-identical", a.report.epochs.len()))
}

fn evaluation() -> CheckResult {
    let x: Vec<f64> = (0..40).flat_map(|i| if i < 20 { [1.0, 0.1] } else { [-1.0, 0.1] }).collect();
    let labels: Vec<Option<usize>> = (0..40).map(|i| Some(usize::from(i >= 20))).collect();
    let rows = Rows::new(&x, 2).map_err(err)?;
    let train: Vec<usize> = (0..40).filter(|i| i % 4 == 0).collect();
    let test: Vec<usize> = (0..40).filter(|i| i % 4 != 0).collect();
    let p = probe_indices(rows, &labels, &train, &test, 3, 0).map_err(err)?;
    ensure(p.macro_f1 == 1.0 && p.micro_f1 == 1.0, || format!("separable probe {p:?}"))?;
    let truth: Vec<usize> = labels.iter().flatten().copied().collect();
    let flipped: Vec<usize> = truth.iter().map(|c| 1 - c).collect();
    let (n, a) = (nmi(&truth, &flipped), ari(&truth, &flipped));
    ensure((n - 1.0).abs() < 1e-12 && (a - 1.0).abs() < 1e-12, || format!("nmi {n}, ari {a}"))?;
    let sim = similarity_search(rows, &labels, &[5]).map_err(err)?;
    ensure(sim[0] == 1.0, || format!("sim@5 {}", sim[0]))?;
    Ok("probe, nmi/ari, sim@k on separable data".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for o in run_all() {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
    }
}
