use gcl_core::hetgraph::{generate_synthetic, HeteroGraph, MetaPathSpec, MetaPathSubgraph, SynthSpec};
use gcl_core::encoders::Model;
use gcl_core::ndtensor::{adam_step, load_checkpoint, AdamConfig, AdamState, Tape};
use gcl_core::trainer::{
    epoch_inputs, init_model, model_from_checkpoint, objective, run_training, train, Monitor, TrainConfig, TrainError,
};

fn small_graph(seed: u64) -> HeteroGraph {
    let spec = SynthSpec::new(
        20,
        2,
        4,
        seed,
        vec![MetaPathSpec::sbm("a", 0.4, 0.05), MetaPathSpec::tree("t", 2, 0.0)],
    );
    generate_synthetic(&spec).unwrap()
}

fn lg_only_config() -> TrainConfig {
    TrainConfig {
        beta: 0.0,
        lambda: 0.0,
        gamma: 0.0,
        epochs_max: 30,
        dim: 16,
        ..TrainConfig::default()
    }
}

/// Adam on one epoch's frozen inputs: the objective itself must go down
/// at every step.
#[test]
fn lg_only_loss_descends_on_fixed_inputs() {
    let g = small_graph(1);
    let cfg = lg_only_config();
    let mut model: Model = init_model(cfg.model_config(&g), g.num_relations(), cfg.seed).unwrap();
    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &model.params);
    let inputs = epoch_inputs(&g, &cfg, 0).unwrap();
    let mut lg = Vec::new();
    for _ in 0..10 {
        let tape = Tape::new();
        let (loss, parts) = objective(&tape, &model, &inputs, &cfg.weights()).unwrap();
        assert_eq!(parts.total, parts.lg);
        lg.push(parts.lg);
        model.params.zero_grad();
        tape.backward(loss, &mut model.params).unwrap();
        adam_step(&mut model.params, &mut adam).unwrap();
    }
    for w in lg.windows(2) {
        assert!(w[1] < w[0], "{lg:?}");
    }
}

/// With fresh views, negatives and dropout each epoch the logged loss is
/// noisy, but it trends down.
#[test]
fn lg_only_training_trends_down() {
    let g = small_graph(1);
    let out = train::<f64>(&g, &lg_only_config()).unwrap();
    let lg: Vec<f64> = out.report.epochs.iter().map(|e| e.losses.lg).collect();
    assert_eq!(lg.len(), 30);
    let head = lg[..10].iter().sum::<f64>() / 10.0;
    let tail = lg[20..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "{lg:?}");
    assert!(out.report.epochs.iter().all(|e| e.losses.node == 0.0 && e.losses.rel == 0.0));
}

#[test]
fn total_is_weighted_sum_of_parts() {
    let g = small_graph(2);
    let cfg = TrainConfig {
        gamma: 0.7,
        beta: 0.3,
        lambda: 0.2,
        sample_size: 30,
        epochs_max: 8,
        dim: 8,
        ..TrainConfig::default()
    };
    let out = train::<f64>(&g, &cfg).unwrap();
    for e in &out.report.epochs {
        let l = &e.losses;
        let combo = l.lg + cfg.beta * l.node + cfg.lambda * l.rel + cfg.gamma * l.reg;
        assert!((combo - l.total).abs() <= 1e-12, "{e:?}");
    }
}

#[test]
fn early_stopping_keeps_best() {
    let g = small_graph(3);
    let cfg = TrainConfig {
        epochs_max: 400,
        patience: 3,
        lr: 0.05,
        dim: 8,
        sample_size: 20,
        ..TrainConfig::default()
    };
    let out = train::<f64>(&g, &cfg).unwrap();
    let r = &out.report;
    assert_eq!(r.monitor, Monitor::TrainLoss);
    assert!(r.epochs.len() <= cfg.epochs_max);
    let min = r.epochs.iter().map(|e| e.losses.total).fold(f64::INFINITY, f64::min);
    assert_eq!(r.best_value, min);
    assert_eq!(r.epochs[r.best_epoch].losses.total, min);
    if r.stopped_early {
        assert_eq!(r.epochs.len(), r.best_epoch + cfg.patience + 1);
    }
}

#[test]
fn validation_monitor_uses_probe() {
    let g = small_graph(4);
    let cfg = TrainConfig {
        epochs_max: 6,
        eval_every: 2,
        dim: 8,
        sample_size: 20,
        ..TrainConfig::default()
    };
    let out = train::<f64>(&g, &cfg).unwrap();
    assert_eq!(out.report.monitor, Monitor::ValMacroF1);
    let measured: Vec<usize> = out
        .report
        .epochs
        .iter()
        .filter(|e| e.val_macro_f1.is_some())
        .map(|e| e.epoch)
        .collect();
    assert_eq!(measured, vec![0, 2, 4]);
    let best = out.report.epochs[out.report.best_epoch].val_macro_f1.unwrap();
    assert!(measured
        .iter()
        .all(|&e| out.report.epochs[e].val_macro_f1.unwrap() <= best));
}

#[test]
fn acm_preset_runs() {
    let g = small_graph(5);
    let cfg = TrainConfig {
        epochs_max: 3,
        ..TrainConfig::preset("acm").unwrap()
    };
    assert_eq!(cfg.sample_size, 2000);
    let out = train::<f64>(&g, &cfg).unwrap();
    assert_eq!(out.report.epochs.len(), 3);
    assert!(out.report.epochs.iter().all(|e| e.losses.total.is_finite() && e.losses.reg != 0.0));
}

#[test]
fn identical_seeds_identical_runs() {
    let g = small_graph(6);
    let cfg = TrainConfig {
        epochs_max: 5,
        dim: 8,
        gamma: 0.5,
        sample_size: 25,
        seed: 17,
        ..TrainConfig::default()
    };
    let a = train::<f64>(&g, &cfg).unwrap();
    let b = train::<f64>(&g, &cfg).unwrap();
    assert_eq!(a.report.losses_tsv(), b.report.losses_tsv());
    assert_eq!(a.embeddings, b.embeddings);
    let c = train::<f64>(&g, &TrainConfig { seed: 18, ..cfg }).unwrap();
    assert_ne!(a.report.losses_tsv(), c.report.losses_tsv());
}

#[test]
fn single_precision_trains() {
    let g = small_graph(7);
    let cfg = TrainConfig {
        epochs_max: 4,
        dim: 8,
        sample_size: 20,
        ..TrainConfig::default()
    };
    let out = train::<f32>(&g, &cfg).unwrap();
    assert!(out.embeddings.data().iter().all(|v| v.is_finite()));
}

#[test]
fn empty_metapath_rejected() {
    let m0 = MetaPathSubgraph::from_pairs("a", 0, 4, &[(0, 1)]);
    let m1 = MetaPathSubgraph::from_pairs("empty", 1, 4, &[]);
    let g = HeteroGraph::new(4, 1, vec![0.0; 4], vec![m0, m1]).unwrap();
    let e = train::<f64>(&g, &TrainConfig::default()).unwrap_err();
    assert!(e.to_string().contains("empty"), "{e}");
}

#[test]
fn divergence_aborts_with_checkpoint() {
    let g = small_graph(8);
    let cfg = TrainConfig {
        epochs_max: 50,
        lr: 1e300,
        dim: 8,
        sample_size: 20,
        gamma: 1.0,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    match run_training(&g, &cfg, dir.path()) {
        Err(TrainError::NonFinite { .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
    let ckpt = load_checkpoint::<f64>(&dir.path().join("checkpoint.bin")).unwrap();
    let model = model_from_checkpoint(ckpt).unwrap();
    assert!(model.params.iter().all(|(_, t)| t.is_finite()));
}

#[test]
fn outputs_round_trip_through_checkpoint() {
    let g = small_graph(9);
    let cfg = TrainConfig {
        epochs_max: 4,
        dim: 8,
        sample_size: 20,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let report = run_training(&g, &cfg, dir.path()).unwrap();
    assert_eq!(report.checkpoint.as_deref(), Some("checkpoint.bin"));
    for f in ["checkpoint.bin", "embeddings.tsv", "losses.tsv", "report.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let model = model_from_checkpoint(load_checkpoint::<f64>(&dir.path().join("checkpoint.bin")).unwrap()).unwrap();
    let h = model.embed(&g).unwrap();
    let out = train::<f64>(&g, &cfg).unwrap();
    assert_eq!(h, out.embeddings);
    let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    assert!(!json.contains("wall_time"));
}
