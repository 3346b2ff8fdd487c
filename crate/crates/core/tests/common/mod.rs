//! Independent reference computations shared by the integration tests and
//! the acceptance run. Nothing here calls library math.

#![allow(dead_code)]

use std::sync::Arc;

use gcl_core::contrast::{loss_lg, loss_node, loss_reg, loss_rel, Projected, Triple, TripleBatch};
use gcl_core::encoders::euclidean_layer;
use gcl_core::ndtensor::{ParamSet, Tape, Tensor, Var};
use gcl_core::sparse::Csr;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;
pub type M = Vec<Vec<f64>>;

pub fn rand_m(rng: &mut ChaCha8Rng, r: usize, c: usize, a: f64) -> M {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(-a..a)).collect()).collect()
}

pub fn t(m: &M) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn bilinear(u: &[f64], w: &M, v: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..u.len() {
        for j in 0..v.len() {
            s += u[i] * w[i][j] * v[j];
        }
    }
    s
}

/// `-log sigmoid(s)` and `-log(1 - sigmoid(s))`, computed the long way.
pub fn nll(s: f64, positive: bool) -> f64 {
    let p = 1.0 / (1.0 + (-s).exp());
    if positive {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn four(z: &M, zt: &M, w: &M, u: usize, v: usize) -> [f64; 4] {
    [
        bilinear(&z[u], w, &z[v]),
        bilinear(&z[u], w, &zt[v]),
        bilinear(&zt[u], w, &zt[v]),
        bilinear(&zt[u], w, &z[v]),
    ]
}

pub struct Fixture {
    pub z: M,
    pub zt: M,
    pub params: ParamSet,
    pub w_node: M,
    pub w_rel: Vec<M>,
    pub w_lg: M,
    pub batch: TripleBatch,
}

pub fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (8, 3);
    let z = rand_m(&mut rng, n, d, 1.0);
    let zt = rand_m(&mut rng, n, d, 1.0);
    let w_node = rand_m(&mut rng, d, d, 1.0);
    let w_rel: Vec<M> = (0..3).map(|_| rand_m(&mut rng, d, d, 1.0)).collect();
    let w_lg = rand_m(&mut rng, d, d, 1.0);
    let mut params = ParamSet::new();
    params.insert("disc.node", t(&w_node));
    for (r, w) in w_rel.iter().enumerate() {
        params.insert(format!("disc.rel.{r}"), t(w));
    }
    params.insert("disc.lg", t(&w_lg));
    let mut batch = TripleBatch::default();
    for _ in 0..7 {
        let u = rng.random_range(0..n);
        let v = (u + 1 + rng.random_range(0..n - 1)) % n;
        let r = rng.random_range(0..3);
        batch.positives.push(Triple { u, r, v });
        batch.node_negatives.push(Triple {
            u,
            r,
            v: rng.random_range(0..n),
        });
        batch.rel_negatives.push((r + 1 + rng.random_range(0..2)) % 3);
    }
    batch.node_negatives.pop();
    batch.skipped = 1;
    Fixture {
        z,
        zt,
        params,
        w_node,
        w_rel,
        w_lg,
        batch,
    }
}

/// `(library, oracle)` for the node-level loss.
pub fn node_case(seed: u64) -> (f64, f64) {
    let f = fixture(seed);
    let mut sum = 0.0;
    let mut count = 0;
    for p in &f.batch.positives {
        for s in four(&f.z, &f.zt, &f.w_node, p.u, p.v) {
            sum += nll(s, true);
            count += 1;
        }
    }
    for q in &f.batch.node_negatives {
        for s in four(&f.z, &f.zt, &f.w_node, q.u, q.v) {
            sum += nll(s, false);
            count += 1;
        }
    }
    let tape = Tape::new();
    let got = loss_node(&f.params, &f.batch, tape.constant(t(&f.z)), tape.constant(t(&f.zt)))
        .unwrap()
        .item();
    (got, sum / count as f64)
}

pub fn rel_case(seed: u64) -> (f64, f64) {
    let f = fixture(seed);
    let mut sum = 0.0;
    let mut count = 0;
    for (p, &rn) in f.batch.positives.iter().zip(&f.batch.rel_negatives) {
        for s in four(&f.z, &f.zt, &f.w_rel[p.r], p.u, p.v) {
            sum += nll(s, true);
            count += 1;
        }
        for s in four(&f.z, &f.zt, &f.w_rel[rn], p.u, p.v) {
            sum += nll(s, false);
            count += 1;
        }
    }
    let tape = Tape::new();
    let got = loss_rel(&f.params, &f.batch, tape.constant(t(&f.z)), tape.constant(t(&f.zt)))
        .unwrap()
        .item();
    (got, sum / count as f64)
}

struct ViewData {
    per_m: Vec<M>,
    graph_m: Vec<Vec<f64>>,
    fused: M,
    graph: Vec<f64>,
}

fn view_data(rng: &mut ChaCha8Rng, n: usize, d: usize, m: usize) -> ViewData {
    ViewData {
        per_m: (0..m).map(|_| rand_m(rng, n, d, 1.0)).collect(),
        graph_m: (0..m).map(|_| rand_m(rng, 1, d, 1.0).remove(0)).collect(),
        fused: rand_m(rng, n, d, 1.0),
        graph: rand_m(rng, 1, d, 1.0).remove(0),
    }
}

fn projected<'t>(tape: &'t Tape, v: &ViewData) -> Projected<'t, f64> {
    Projected {
        per_metapath: v.per_m.iter().map(|x| tape.constant(t(x))).collect(),
        graph_per_metapath: v.graph_m.iter().map(|g| tape.constant(Tensor::row_vector(g.clone()))).collect(),
        fused: tape.constant(t(&v.fused)),
        graph: tape.constant(Tensor::row_vector(v.graph.clone())),
    }
}

pub fn lg_case(seed: u64) -> (f64, f64) {
    let f = fixture(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let (n, d, m) = (7, 3, 2);
    let [v1, v2, n1, n2] = [0; 4].map(|_| view_data(&mut rng, n, d, m));
    let (mut num, mut den) = (0.0, 0.0);
    let mut add = |nodes: &M, g: &[f64], positive: bool, w: f64| {
        for z in nodes {
            num += w * nll(bilinear(z, &f.w_lg, g), positive);
            den += w;
        }
    };
    for k in 0..m {
        let w = 1.0 / m as f64;
        add(&v1.per_m[k], &v2.graph_m[k], true, w);
        add(&v2.per_m[k], &v1.graph_m[k], true, w);
        add(&n1.per_m[k], &v2.graph_m[k], false, w);
        add(&n2.per_m[k], &v1.graph_m[k], false, w);
    }
    add(&v1.fused, &v2.graph, true, 1.0);
    add(&v2.fused, &v1.graph, true, 1.0);
    add(&n1.fused, &v2.graph, false, 1.0);
    add(&n2.fused, &v1.graph, false, 1.0);
    let tape = Tape::new();
    let [p1, p2, q1, q2] = [&v1, &v2, &n1, &n2].map(|v| projected(&tape, v));
    let got = loss_lg(&f.params, &p1, &p2, &q1, &q2).unwrap().item();
    (got, num / den)
}

pub fn reg_case(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, m) = (6, 4, 3);
    let h = rand_m(&mut rng, n, d, 2.0);
    let pos: Vec<M> = (0..m).map(|_| rand_m(&mut rng, n, d, 2.0)).collect();
    let neg: Vec<M> = (0..m).map(|_| rand_m(&mut rng, n, d, 2.0)).collect();
    let mut total = 0.0;
    for k in 0..m {
        for i in 0..n {
            for j in 0..d {
                total += (h[i][j] - pos[k][i][j]).powi(2) - (h[i][j] - neg[k][i][j]).powi(2);
            }
        }
    }
    let tape = Tape::new();
    let pv: Vec<_> = pos.iter().map(|x| tape.constant(t(x))).collect();
    let nv: Vec<_> = neg.iter().map(|x| tape.constant(t(x))).collect();
    let got = loss_reg(tape.constant(t(&h)), &pv, &nv).unwrap().item();
    (got, total / (n * d) as f64)
}

/// Largest entrywise gap between the Euclidean layer and
/// `ReLU(D^-1 (A + I) X W + b)` built densely.
pub fn euclidean_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, f, d) = (9, 5, 4);
    let pairs = [(0, 1), (1, 2), (2, 3), (0, 4), (5, 6), (6, 7), (7, 5), (3, 8)];
    let x = rand_m(&mut rng, n, f, 1.0);
    let w = rand_m(&mut rng, f, d, 1.0);
    let b = rand_m(&mut rng, 1, d, 0.5);
    let mut a = vec![vec![0.0; n]; n];
    for &(u, v) in &pairs {
        a[u][v] = 1.0;
        a[v][u] = 1.0;
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
        let deg: f64 = row.iter().sum();
        row.iter_mut().for_each(|e| *e /= deg);
    }
    let adj = Arc::new(Csr::symmetric_from_pairs(n, &pairs).0);
    let tape = Tape::new();
    let h = euclidean_layer(tape.constant(t(&x)), &adj, tape.constant(t(&w)), tape.constant(t(&b)))
        .unwrap()
        .value();
    let mut gap: f64 = 0.0;
    for i in 0..n {
        for k in 0..d {
            let mut s = b[0][k];
            for j in 0..n {
                for l in 0..f {
                    s += a[i][j] * x[j][l] * w[l][k];
                }
            }
            gap = gap.max((h.get(i, k) - s.max(0.0)).abs());
        }
    }
    gap
}

pub mod scalar {
    //! Point-level Poincaré formulas written out independently.

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn norm(a: &[f64]) -> f64 {
        dot(a, a).sqrt()
    }

    pub fn scale(a: &[f64], k: f64) -> Vec<f64> {
        a.iter().map(|x| x * k).collect()
    }

    pub fn project(a: &[f64], c: f64) -> Vec<f64> {
        let max = (1.0 - 1e-5) / c.sqrt();
        let n = norm(a);
        if n > max {
            scale(a, max / n)
        } else {
            a.to_vec()
        }
    }

    pub fn exp0(v: &[f64], c: f64) -> Vec<f64> {
        let n = norm(v);
        if n == 0.0 {
            return v.to_vec();
        }
        project(&scale(v, (c.sqrt() * n).tanh() / (c.sqrt() * n)), c)
    }

    pub fn log0(y: &[f64], c: f64) -> Vec<f64> {
        let y = project(y, c);
        let n = norm(&y);
        if n == 0.0 {
            return y;
        }
        scale(&y, (c.sqrt() * n).atanh() / (c.sqrt() * n))
    }

    pub fn add(x: &[f64], y: &[f64], c: f64) -> Vec<f64> {
        let (xy, x2, y2) = (dot(x, y), dot(x, x), dot(y, y));
        let den = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
        let a = (1.0 + 2.0 * c * xy + c * y2) / den;
        let b = (1.0 - c * x2) / den;
        project(&x.iter().zip(y).map(|(p, q)| a * p + b * q).collect::<Vec<_>>(), c)
    }

    /// `W^T (x)_c x` for `w` stored `[in][out]`.
    pub fn matvec(w: &[Vec<f64>], x: &[f64], c: f64) -> Vec<f64> {
        let x = project(x, c);
        let out = w[0].len();
        let mx: Vec<f64> = (0..out).map(|k| (0..x.len()).map(|l| x[l] * w[l][k]).sum()).collect();
        let (xn, mxn) = (norm(&x), norm(&mx));
        if xn == 0.0 || mxn == 0.0 {
            return vec![0.0; out];
        }
        let r = (mxn / xn * (c.sqrt() * xn).atanh()).tanh() / c.sqrt();
        project(&scale(&mx, r / mxn), c)
    }
}

pub const FD_STEP: f64 = 1e-5;

fn tape_grads<F>(ps: &mut ParamSet, f: &F) -> Vec<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, &ParamSet) -> Result<Var<'t, f64>, BoxError>,
{
    ps.zero_grad();
    let tape = Tape::new();
    let loss = f(&tape, ps).unwrap();
    tape.backward(loss, ps).unwrap();
    let out = (0..ps.len())
        .map(|i| {
            let p = ps.by_index(i);
            p.grad().map_or(vec![0.0; p.numel()], <[f64]>::to_vec)
        })
        .collect();
    ps.zero_grad();
    out
}

/// Worst `|a - n| / max(|a|, |n|, 1e-6)` over every parameter entry, with
/// `n` from central differences.
pub fn worst_rel_error<F>(ps: &mut ParamSet, f: F) -> (f64, String)
where
    F: for<'t> Fn(&'t Tape, &ParamSet) -> Result<Var<'t, f64>, BoxError>,
{
    let analytic = tape_grads(ps, &f);
    let value = |ps: &ParamSet| {
        let tape = Tape::new();
        f(&tape, ps).unwrap().item()
    };
    let mut worst = (0.0, String::new());
    for i in 0..ps.len() {
        for k in 0..ps.by_index(i).numel() {
            let x = ps.by_index(i).data()[k];
            ps.by_index_mut(i).data_mut()[k] = x + FD_STEP;
            let up = value(ps);
            ps.by_index_mut(i).data_mut()[k] = x - FD_STEP;
            let down = value(ps);
            ps.by_index_mut(i).data_mut()[k] = x;
            let num = (up - down) / (2.0 * FD_STEP);
            let a = analytic[i][k];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{}[{k}]", ps.name_of(i)));
            }
        }
    }
    worst
}

/// Worst relative error of the full objective on the six-node graph, at
/// the given epochs' inputs with parameters nudged off their init.
pub fn objective_error(epochs: std::ops::Range<usize>) -> (f64, String) {
    use gcl_core::encoders::Model;
    use gcl_core::selftest::{six_node_config, six_node_graph};
    use gcl_core::trainer;

    let g = six_node_graph();
    let cfg = six_node_config();
    let mc = cfg.model_config(&g);
    let model: Model = trainer::init_model(mc.clone(), g.num_relations(), cfg.seed).unwrap();
    let weights = cfg.weights();
    let mut worst = (0.0, String::new());
    for epoch in epochs {
        let inputs = trainer::epoch_inputs(&g, &cfg, epoch).unwrap();
        let mut ps = model.params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch as u64);
        for (_, t) in ps.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        let (err, at) = worst_rel_error(&mut ps, |tape, ps| -> Result<Var<'_, f64>, BoxError> {
            let m = Model::new(mc.clone(), ps.clone())?;
            let (loss, parts) = trainer::objective(tape, &m, &inputs, &weights)?;
            assert!(parts.node > 0.0 && parts.rel > 0.0 && parts.reg != 0.0);
            Ok(loss)
        });
        if err >= worst.0 {
            worst = (err, format!("epoch {epoch} {at}"));
        }
    }
    worst
}
