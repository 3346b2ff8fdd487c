use gcl_core::augment::{mask_attributes, permute_edges};
use gcl_core::contrast::sample_triples;
use gcl_core::encoders::attention_fuse;
use gcl_core::evalkit::{ari, kmeans, macro_f1, micro_f1, nmi, similarity_search, Rows};
use gcl_core::hetgraph::{
    generate_synthetic, gromov_hyperbolicity, load_dataset, save_dataset, MetaPathSpec, MetaPathSubgraph, SynthSpec,
};
use gcl_core::manifold::{self, BallConfig, PoincarePoint};
use gcl_core::ndtensor::{Tape, Tensor};
use gcl_core::sparse::Csr;
use proptest::prelude::*;

fn vec_in_ball(d: usize, radius: f64) -> impl Strategy<Value = Vec<f64>> {
    (prop::collection::vec(-1.0f64..1.0, d), 0.0f64..1.0).prop_map(move |(v, r)| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            v
        } else {
            v.iter().map(|x| x * radius * r / n).collect()
        }
    })
}

fn edge_list(n: usize) -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0..n, 0..n), 0..3 * n)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ball_identities(x in vec_in_ball(5, 0.95), y in vec_in_ball(5, 0.95), v in vec_in_ball(5, 2.0)) {
        let cfg: BallConfig = BallConfig::default();
        let x = PoincarePoint::new(x, &cfg);
        let y = PoincarePoint::new(y, &cfg);
        let r = manifold::mobius_add(&x, &PoincarePoint::origin(5), &cfg).unwrap();
        prop_assert!(max_diff(r.coords(), x.coords()) <= 1e-8);
        let z = manifold::mobius_add(&x.neg(), &x, &cfg).unwrap();
        prop_assert!(z.norm() <= 1e-8);
        prop_assert!(max_diff(&manifold::log0(&manifold::exp0(&v, &cfg), &cfg), &v) <= 1e-8);
        let u = manifold::log_map(&x, &y, &cfg).unwrap();
        prop_assert!(max_diff(manifold::exp_map(&x, &u, &cfg).unwrap().coords(), y.coords()) <= 1e-8);
        let s = manifold::mobius_add(&x, &y, &cfg).unwrap();
        prop_assert!(s.norm() <= cfg.max_norm() + 1e-15);
        prop_assert!(s.coords().iter().all(|c| c.is_finite()));
    }

    #[test]
    fn outputs_stay_in_ball(x in prop::collection::vec(-5.0f64..5.0, 3), w in prop::collection::vec(-3.0f64..3.0, 9)) {
        let cfg: BallConfig = BallConfig::default();
        let p = manifold::project_to_ball(&x, &cfg);
        prop_assert!(p.norm() <= cfg.max_norm() + 1e-15);
        let m = Tensor::matrix(3, 3, w).unwrap();
        let q = manifold::mobius_matvec(&m, &p, &cfg).unwrap();
        prop_assert!(q.norm() <= cfg.max_norm() + 1e-15);
        prop_assert!(q.coords().iter().all(|c| c.is_finite()));
        let e = manifold::exp0(&x, &cfg);
        prop_assert!(e.norm() <= cfg.max_norm() + 1e-15);
    }

    #[test]
    fn edge_permutation_is_symmetric_subset(pairs in edge_list(12), p in 0.0f64..0.99, seed in any::<u64>()) {
        let (adj, _) = Csr::symmetric_from_pairs(12, &pairs);
        let out = permute_edges(&adj, p, seed).unwrap();
        prop_assert!(out.is_symmetric());
        for (u, v) in out.undirected_edges() {
            prop_assert!(adj.contains(u, v));
        }
        prop_assert_eq!(out.clone(), permute_edges(&adj, p, seed).unwrap());
    }

    #[test]
    fn masking_only_zeroes_whole_columns(x in prop::collection::vec(0.5f64..2.0, 24), p in 0.0f64..0.99, seed in any::<u64>()) {
        let f = 6;
        let m = mask_attributes(&x, f, p, seed).unwrap();
        for col in 0..f {
            let zeroed: Vec<bool> = (0..4).map(|r| m[r * f + col] == 0.0).collect();
            prop_assert!(zeroed.iter().all(|&z| z == zeroed[0]));
            if !zeroed[0] {
                for r in 0..4 {
                    prop_assert_eq!(m[r * f + col], x[r * f + col]);
                }
            }
        }
    }

    #[test]
    fn attention_weights_on_simplex(h in prop::collection::vec(-3.0f64..3.0, 3 * 5 * 4), q in prop::collection::vec(-1.0f64..1.0, 3 * 4)) {
        let tape = Tape::new();
        let hs: Vec<_> = (0..3).map(|m| tape.constant(Tensor::matrix(5, 4, h[m * 20..(m + 1) * 20].to_vec()).unwrap())).collect();
        let qs: Vec<_> = (0..3).map(|m| tape.constant(Tensor::matrix(4, 1, q[m * 4..(m + 1) * 4].to_vec()).unwrap())).collect();
        let (_, alpha) = attention_fuse(&hs, &qs).unwrap();
        let a = alpha.value();
        prop_assert_eq!(a.shape(), &[5, 3]);
        for i in 0..5 {
            let row = a.row(i);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_relabel_invariant(pairs in edge_list(9), perm in Just((0..9).collect::<Vec<usize>>()).prop_shuffle()) {
        let sub = MetaPathSubgraph::from_pairs("g", 0, 9, &pairs);
        let relabeled: Vec<(usize, usize)> = pairs.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let sub2 = MetaPathSubgraph::from_pairs("g", 0, 9, &relabeled);
        let a = gromov_hyperbolicity(&sub).unwrap();
        let b = gromov_hyperbolicity(&sub2).unwrap();
        prop_assert_eq!(a.delta, b.delta);
        prop_assert_eq!(a.component_size, b.component_size);
        prop_assert!(a.delta >= 0.0);
        prop_assert_eq!((a.delta * 2.0).fract(), 0.0);
    }

    #[test]
    fn generated_trees_are_zero_hyperbolic(n in 4usize..60, b in 1usize..4, seed in any::<u64>()) {
        let g = generate_synthetic(&SynthSpec::new(n, 2, 2, seed, vec![MetaPathSpec::tree("t", b, 0.0)])).unwrap();
        let t = &g.metapaths()[0];
        prop_assert_eq!(t.num_edges(), n - 1);
        prop_assert_eq!(gromov_hyperbolicity(t).unwrap().delta, 0.0);
    }

    #[test]
    fn triples_are_edges(seed in any::<u64>()) {
        let g = generate_synthetic(&SynthSpec::new(30, 2, 3, 5, vec![
            MetaPathSpec::sbm("a", 0.3, 0.05),
            MetaPathSpec::sbm("b", 0.2, 0.1),
        ])).unwrap();
        let batch = sample_triples(&g, 40, seed);
        prop_assert_eq!(batch.positives.len(), 40);
        prop_assert_eq!(batch.node_negatives.len() + batch.skipped, 40);
        for (t, &rn) in batch.positives.iter().zip(&batch.rel_negatives) {
            prop_assert!(g.metapaths()[t.r].edges().contains(t.u, t.v));
            prop_assert!(rn != t.r);
        }
        for t in &batch.node_negatives {
            prop_assert!(t.u != t.v && !g.metapaths()[t.r].edges().contains(t.u, t.v));
        }
    }

    #[test]
    fn partition_scores_are_symmetric(a in prop::collection::vec(0usize..4, 30), b in prop::collection::vec(0usize..3, 30)) {
        prop_assert!((nmi(&a, &b) - nmi(&b, &a)).abs() < 1e-12);
        prop_assert!((ari(&a, &b) - ari(&b, &a)).abs() < 1e-12);
        let n = nmi(&a, &b);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&n));
        prop_assert!(ari(&a, &b) <= 1.0 + 1e-12);
        prop_assert!(macro_f1(&a, &b) <= 1.0);
        prop_assert!(micro_f1(&a, &b) <= 1.0);
    }

    #[test]
    fn cosine_scores_scale_invariant(x in prop::collection::vec(-1.0f64..1.0, 30 * 3), k in 0.1f64..50.0) {
        let labels: Vec<Option<usize>> = (0..30).map(|i| Some(i % 3)).collect();
        let scaled: Vec<f64> = x.iter().map(|v| v * k).collect();
        let a = similarity_search(Rows::new(&x, 3).unwrap(), &labels, &[5, 10, 20]).unwrap();
        let b = similarity_search(Rows::new(&scaled, 3).unwrap(), &labels, &[5, 10, 20]).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn kmeans_assignment_scale_invariant(x in prop::collection::vec(-1.0f64..1.0, 40 * 2), seed in any::<u64>()) {
        let scaled: Vec<f64> = x.iter().map(|v| v * 4.0).collect();
        let a = kmeans(Rows::new(&x, 2).unwrap(), 3, seed).unwrap();
        let b = kmeans(Rows::new(&scaled, 2).unwrap(), 3, seed).unwrap();
        prop_assert_eq!(a.assignment, b.assignment);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn load_save_roundtrip(n in 6usize..40, k in 2usize..4, f in 1usize..5, seed in any::<u64>(), pi in 0.0f64..1.0, po in 0.0f64..0.3) {
        let spec = SynthSpec::new(n.max(k), k, f, seed, vec![MetaPathSpec::sbm("s", pi, po), MetaPathSpec::tree("t", 2, 0.1)]);
        let g = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&g, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        prop_assert_eq!(back, g);
    }
}
