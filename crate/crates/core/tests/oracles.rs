//! Library results against fully unrolled scalar re-implementations.

mod common;

use std::sync::Arc;

use common::{euclidean_gap, lg_case, node_case, rand_m, reg_case, rel_case, scalar, t, M};
use gcl_core::encoders::hyperbolic_layer;
use gcl_core::manifold::{self, BallConfig, PoincarePoint};
use gcl_core::ndtensor::{Tape, Tensor};
use gcl_core::sparse::Csr;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn check(name: &str, case: fn(u64) -> (f64, f64)) {
    for seed in 0..5 {
        let (got, oracle) = case(seed);
        assert!((got - oracle).abs() <= 1e-12, "{name} seed {seed}: {got} vs {oracle}");
    }
}

#[test]
fn loss_node_matches_scalar_oracle() {
    check("node", node_case);
}

#[test]
fn loss_rel_matches_scalar_oracle() {
    check("rel", rel_case);
}

#[test]
fn loss_lg_matches_scalar_oracle() {
    check("lg", lg_case);
}

#[test]
fn loss_reg_matches_scalar_oracle() {
    check("reg", reg_case);
}

#[test]
fn euclidean_layer_matches_dense_oracle() {
    for seed in 0..5 {
        let gap = euclidean_gap(seed);
        assert!(gap <= 1e-10, "seed {seed}: {gap:e}");
    }
}

#[test]
fn hyperbolic_layer_matches_stepwise_oracle() {
    for &c in &[1.0, 0.5] {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, f, d) = (7, 4, 3);
        let pairs = [(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 6)];
        let x = rand_m(&mut rng, n, f, 0.8);
        let w = rand_m(&mut rng, f, d, 0.8);
        let b = rand_m(&mut rng, 1, d, 0.3);
        let mut nbrs = vec![vec![]; n];
        for &(u, v) in &pairs {
            nbrs[u].push(v);
            nbrs[v].push(u);
        }
        let bias = scalar::exp0(&b[0], c);
        let msg: M = x
            .iter()
            .map(|xi| scalar::log0(&scalar::add(&scalar::matvec(&w, &scalar::exp0(xi, c), c), &bias, c), c))
            .collect();
        let cfg = BallConfig::new(c, 1e-5).unwrap();
        let tape = Tape::new();
        let got = hyperbolic_layer(
            tape.constant(t(&x)),
            &Arc::new(Csr::symmetric_from_pairs(n, &pairs).0),
            tape.constant(t(&w)),
            tape.constant(t(&b)),
            &cfg,
        )
        .unwrap()
        .value();
        for i in 0..n {
            let mut agg = msg[i].clone();
            for &j in &nbrs[i] {
                agg.iter_mut().zip(&msg[j]).for_each(|(a, m)| *a += m);
            }
            let relu: Vec<f64> = agg.iter().map(|v| v.max(0.0)).collect();
            let out = scalar::log0(&scalar::exp0(&relu, c), c);
            for k in 0..d {
                assert!((got.get(i, k) - out[k]).abs() <= 1e-8, "c={c} row {i}: {:?} vs {out:?}", got.row(i));
            }
        }
    }
}

#[test]
fn hyperbolic_layer_at_tiny_curvature_is_euclidean_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, f, d) = (5, 3, 2);
    let pairs = [(0, 1), (1, 2), (3, 4)];
    let x = rand_m(&mut rng, n, f, 0.5);
    let w = rand_m(&mut rng, f, d, 0.5);
    let b = rand_m(&mut rng, 1, d, 0.2);
    let cfg = BallConfig::new(1e-6, 1e-5).unwrap();
    let tape = Tape::new();
    let adj = Arc::new(Csr::symmetric_from_pairs(n, &pairs).0);
    let got = hyperbolic_layer(tape.constant(t(&x)), &adj, tape.constant(t(&w)), tape.constant(t(&b)), &cfg)
        .unwrap()
        .value();
    for i in 0..n {
        for k in 0..d {
            let msg = |j: usize| (0..f).map(|l| x[j][l] * w[l][k]).sum::<f64>() + b[0][k];
            let s: f64 = msg(i) + adj.row(i).iter().map(|&j| msg(j)).sum::<f64>();
            assert!((got.get(i, k) - s.max(0.0)).abs() <= 1e-4);
        }
    }
}

#[test]
fn worked_point_examples() {
    let cfg: BallConfig = BallConfig::default();
    let p = |v: Vec<f64>| PoincarePoint::new(v, &cfg);
    let s = manifold::mobius_add(&p(vec![0.3, 0.0]), &p(vec![0.4, 0.0]), &cfg).unwrap();
    // Collinear reduction (x + y) / (1 + xy).
    assert!((s.coords()[0] - 0.7 / 1.12).abs() < 1e-12 && s.coords()[1] == 0.0);
    assert!((s.coords()[0] - 0.625).abs() < 1e-12);
    let e = manifold::exp0(&[0.5, 0.0], &cfg);
    assert!((e.coords()[0] - 0.5f64.tanh()).abs() < 1e-12);
    assert!((e.coords()[0] - 0.46212).abs() < 1e-5);
    let two = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap();
    let m = manifold::mobius_matvec(&two, &p(vec![0.3, 0.0]), &cfg).unwrap();
    let expected = (2.0 * 0.3f64.atanh()).tanh();
    assert!((m.coords()[0] - expected).abs() < 1e-12);
    assert!((m.coords()[0] - 0.550459).abs() < 1e-6);
}

#[test]
fn projection_rescale_rule() {
    let cfg: BallConfig = BallConfig::default();
    let q = manifold::project_to_ball(&[2.0, 0.0], &cfg);
    assert!((q.norm() - 0.99999).abs() < 1e-12);
    let inside = manifold::project_to_ball(&[0.1, -0.2], &cfg);
    assert_eq!(inside.coords(), &[0.1, -0.2]);
}

#[test]
fn noncommutative_witness() {
    let cfg: BallConfig = BallConfig::default();
    let x = PoincarePoint::new(vec![0.5, 0.1], &cfg);
    let y = PoincarePoint::new(vec![-0.2, 0.6], &cfg);
    let xy = manifold::mobius_add(&x, &y, &cfg).unwrap();
    let yx = manifold::mobius_add(&y, &x, &cfg).unwrap();
    let gap = scalar::norm(&xy.coords().iter().zip(yx.coords()).map(|(a, b)| a - b).collect::<Vec<_>>());
    assert!(gap > 1e-3, "{gap}");
}
