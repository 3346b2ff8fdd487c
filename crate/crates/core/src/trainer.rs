//! Training loop: per-epoch views, encoding, the combined contrastive
//! objective, Adam updates, early stopping and output files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{make_views, AugmentConfig, AugmentError, GraphView, ViewAugment};
use crate::contrast::{self, LossParts, LossWeights, ObjectiveInputs, Projected, TripleBatch};
use crate::encoders::{embeddings_to_tsv, Branch, EncoderError, Model, ModelConfig, ViewEmbeddings};
use crate::evalkit::{self, EvalError, Rows};
use crate::hetgraph::{GraphError, HeteroGraph, Split};
use crate::ndtensor::{
    adam_step, save_checkpoint, AdamConfig, AdamState, Checkpoint, CheckpointError, Init, ParamSet, ParamSpec, Tape,
    Tensor, TensorError, Var,
};
use crate::rng::{derive_seed, purpose, rng_for};
use crate::Real;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("training diverged at epoch {epoch}: {reason}")]
    NonFinite { epoch: usize, reason: String },
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Encoder(e.into())
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub dim: usize,
    pub epochs_max: usize,
    pub patience: usize,
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub sample_size: usize,
    pub views: [ViewAugment; 2],
    pub dropout: f64,
    pub curvature: f64,
    pub seed: u64,
    /// 0: early-stop on training loss; k > 0: on validation Macro-F1
    /// measured every k epochs.
    pub eval_every: usize,
    pub dataset_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.0,
            dim: 64,
            epochs_max: 500,
            patience: 20,
            beta: 0.01,
            lambda: 0.01,
            gamma: 0.0,
            sample_size: 1000,
            views: [ViewAugment { p_a: 0.1, p_e: 0.1 }; 2],
            dropout: 0.5,
            curvature: 1.0,
            seed: 0,
            eval_every: 0,
            dataset_dir: None,
            out_dir: None,
        }
    }
}

pub const PRESETS: [&str; 4] = ["acm", "imdb", "amazon", "dblp"];

impl TrainConfig {
    /// Per-dataset settings from the published hyper-parameter and
    /// augmentation tables (lr 0.001, d 64, dropout 0.5, patience 20).
    pub fn preset(name: &str) -> Option<Self> {
        let v = |p_a, p_e| ViewAugment { p_a, p_e };
        let (wd, gamma, beta, lambda, s, views) = match name.to_ascii_lowercase().as_str() {
            "acm" => (1e-4, 1.0, 0.01, 0.01, 2000, [v(0.1, 0.1), v(0.1, 0.2)]),
            "imdb" => (5e-4, 0.001, 0.0, 0.1, 1000, [v(0.0, 0.0), v(0.0, 0.0)]),
            "amazon" => (1e-4, 0.01, 0.001, 0.0, 1000, [v(0.1, 0.4), v(0.1, 0.4)]),
            "dblp" => (5e-4, 0.001, 0.001, 0.01, 2000, [v(0.0, 0.0), v(0.1, 0.1)]),
            _ => return None,
        };
        Some(Self {
            weight_decay: wd,
            gamma,
            beta,
            lambda,
            sample_size: s,
            views,
            ..Self::default()
        })
    }

    /// Parses `key = value` lines (`#` starts a comment) on top of `self`.
    pub fn apply_text(mut self, text: &str) -> Result<Self> {
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| TrainError::ConfigLine {
                line,
                msg: format!("expected key=value, found `{body}`"),
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|msg| TrainError::ConfigLine { line, msg })?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::default().apply_text(text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<X: std::str::FromStr>(key: &str, v: &str) -> Result<X, String> {
            v.parse().map_err(|_| format!("bad value for {key}: `{v}`"))
        }
        match key {
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "epochs_max" => self.epochs_max = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "sample_size" => self.sample_size = num(key, value)?,
            "view1.p_a" => self.views[0].p_a = num(key, value)?,
            "view1.p_e" => self.views[0].p_e = num(key, value)?,
            "view2.p_a" => self.views[1].p_a = num(key, value)?,
            "view2.p_e" => self.views[1].p_e = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "curvature" => self.curvature = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "dataset_dir" => self.dataset_dir = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive (got {})", self.lr));
        }
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0 (got {v})"));
            }
        }
        for v in &self.views {
            v.validate()?;
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1) (got {})", self.dropout));
        }
        if !(self.curvature.is_finite() && self.curvature > 0.0) {
            return bad(format!("curvature must be positive (got {})", self.curvature));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            beta: self.beta,
            lambda: self.lambda,
            gamma: self.gamma,
        }
    }

    pub fn model_config(&self, g: &HeteroGraph) -> ModelConfig {
        ModelConfig {
            dropout: self.dropout,
            curvature: self.curvature,
            ..ModelConfig::new(g.feature_dim(), self.dim, g.num_relations())
        }
    }
}

/// Draws every parameter in `specs` order from one seeded stream.
pub fn init_params<T: Real>(specs: &[ParamSpec], seed: u64) -> ParamSet<T> {
    let mut rng = rng_for(seed, &[purpose::INIT]);
    let mut out = ParamSet::new();
    for s in specs {
        let n = s.rows * s.cols;
        let data: Vec<T> = match s.init {
            Init::Zeros => vec![T::zero(); n],
            Init::Glorot => {
                let bound = (6.0 / (s.rows + s.cols) as f64).sqrt();
                (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect()
            }
            Init::Uniform(a) => (0..n).map(|_| T::of(rng.random_range(-a..=a))).collect(),
        };
        out.insert(s.name.clone(), Tensor::from_parts(vec![s.rows, s.cols], data).expect("spec shape"));
    }
    out
}

/// All parameters (encoders and discriminators) of a fresh model.
pub fn init_model<T: Real>(mc: ModelConfig, num_relations: usize, seed: u64) -> Result<Model<T>> {
    let mut specs = mc.param_specs();
    specs.extend(contrast::param_specs(mc.dim, num_relations));
    Ok(Model::new(mc, init_params(&specs, seed))?)
}

/// Random inputs of one epoch: two augmented views, their row-shuffled
/// negatives (one permutation shared by both), the triple batch, and the
/// dropout seed.
#[derive(Debug, Clone)]
pub struct EpochInputs {
    pub view1: GraphView,
    pub view2: GraphView,
    pub neg1: GraphView,
    pub neg2: GraphView,
    pub batch: Option<TripleBatch>,
    pub dropout_seed: Option<u64>,
}

pub fn epoch_inputs(g: &HeteroGraph, cfg: &TrainConfig, epoch: usize) -> Result<EpochInputs> {
    let e = epoch as u64;
    let aug = AugmentConfig {
        views: cfg.views,
        seed: cfg.seed,
    };
    let (view1, view2) = make_views(g, &aug, e)?;
    let mut perm: Vec<usize> = (0..g.num_nodes()).collect();
    perm.shuffle(&mut rng_for(cfg.seed, &[purpose::SHUFFLE, e]));
    let neg1 = view1.with_shuffled_features(&perm);
    let neg2 = view2.with_shuffled_features(&perm);
    let batch = (cfg.beta > 0.0 || cfg.lambda > 0.0)
        .then(|| contrast::sample_triples(g, cfg.sample_size, derive_seed(cfg.seed, &[e])));
    Ok(EpochInputs {
        view1,
        view2,
        neg1,
        neg2,
        batch,
        dropout_seed: Some(derive_seed(cfg.seed, &[purpose::DROPOUT, e])),
    })
}

fn projected<'t, T: Real>(model: &Model<T>, tape: &'t Tape<T>, v: &ViewEmbeddings<'t, T>) -> Result<Projected<'t, T>> {
    let p = |x: Var<'t, T>| model.project(tape, x);
    Ok(Projected {
        per_metapath: v.per_metapath.iter().map(|h| p(*h)).collect::<Result<_, _>>()?,
        graph_per_metapath: v.graph_per_metapath.iter().map(|h| p(*h)).collect::<Result<_, _>>()?,
        fused: p(v.fused)?,
        graph: p(v.graph)?,
    })
}

/// Records the full objective for one epoch's inputs on `tape`.
pub fn objective<'t, T: Real>(
    tape: &'t Tape<T>,
    model: &Model<T>,
    inp: &EpochInputs,
    weights: &LossWeights,
) -> Result<(Var<'t, T>, LossParts)> {
    let seed = |k: u64| inp.dropout_seed.map(|s| derive_seed(s, &[k]));
    let raw1 = model.encode_view(tape, &inp.view1, Branch::Euclidean, seed(0))?;
    let raw2 = model.encode_view(tape, &inp.view2, Branch::Hyperbolic, seed(1))?;
    let raw_neg1 = model.encode_view(tape, &inp.neg1, Branch::Euclidean, seed(2))?;
    let raw_neg2 = model.encode_view(tape, &inp.neg2, Branch::Hyperbolic, seed(3))?;
    let (p1, p2) = (projected(model, tape, &raw1)?, projected(model, tape, &raw2)?);
    let (n1, n2) = (projected(model, tape, &raw_neg1)?, projected(model, tape, &raw_neg2)?);
    let inputs = ObjectiveInputs {
        params: &model.params,
        view1: &p1,
        view2: &p2,
        neg1: &n1,
        neg2: &n2,
        raw1: &raw1,
        raw2: &raw2,
        raw_neg1: &raw_neg1,
        raw_neg2: &raw_neg2,
        batch: inp.batch.as_ref(),
    };
    Ok(contrast::total_loss(&inputs, weights)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossParts,
    /// Node negatives that could not be sampled this epoch.
    pub skipped_negatives: usize,
    /// Validation Macro-F1 when measured this epoch.
    pub val_macro_f1: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    TrainLoss,
    ValMacroF1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub monitor: Monitor,
    pub best_epoch: usize,
    pub best_value: f64,
    pub stopped_early: bool,
    /// Seconds; kept out of the JSON so reports are reproducible.
    #[serde(skip)]
    pub wall_time: f64,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    /// Tab-separated per-epoch loss log with a header row.
    pub fn losses_tsv(&self) -> String {
        let mut s = String::from("epoch\ttotal\tlg\tnode\trel\treg\n");
        for e in &self.epochs {
            let l = &e.losses;
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}", e.epoch, l.total, l.lg, l.node, l.rel, l.reg);
        }
        s
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real = f64> {
    /// Parameters of the best epoch (or the last finite ones when aborted).
    pub model: Model<T>,
    pub adam: AdamState<T>,
    /// `H_ult` of the best model on the unaugmented graph.
    pub embeddings: Tensor<T>,
    pub report: TrainReport,
    /// Set when a non-finite loss or gradient stopped training.
    pub aborted: Option<(usize, String)>,
}

fn val_macro_f1<T: Real>(model: &Model<T>, g: &HeteroGraph, seed: u64) -> Result<Option<f64>> {
    let (Some(labels), Some(splits)) = (g.labels(), g.splits()) else {
        return Ok(None);
    };
    let pick = |s: Split| -> Vec<usize> { (0..g.num_nodes()).filter(|&i| splits[i] == Some(s)).collect() };
    let val = pick(Split::Val);
    if val.iter().all(|&i| labels[i].is_none()) {
        return Ok(None);
    }
    let h = model.embed(g)?;
    let data: Vec<f64> = h.data().iter().map(|v| v.as_f64()).collect();
    let r = evalkit::probe_indices(Rows::new(&data, h.cols())?, labels, &pick(Split::Train), &val, 1, seed)?;
    Ok(Some(r.macro_f1))
}

/// Runs training until `epochs_max` or early stopping.
pub fn train<T: Real>(g: &HeteroGraph, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if let Some(m) = g.metapaths().iter().find(|m| m.num_edges() == 0) {
        return Err(TrainError::Config(format!("meta-path `{}` has no edges", m.name)));
    }
    let started = Instant::now();
    let mut model: Model<T> = init_model(cfg.model_config(g), g.num_relations(), cfg.seed)?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let weights = cfg.weights();
    let probe_mode = cfg.eval_every > 0 && g.labels().is_some() && g.splits().is_some();
    let monitor = if probe_mode { Monitor::ValMacroF1 } else { Monitor::TrainLoss };
    if cfg.eval_every > 0 && !probe_mode {
        warn!("eval_every set but the graph has no labels/splits; monitoring training loss");
    }

    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, ParamSet<T>)> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;
    let mut aborted = None;
    // Parameters of the most recent epoch whose loss was finite.
    let mut last_good: Option<ParamSet<T>> = None;

    for epoch in 0..cfg.epochs_max {
        let inp = epoch_inputs(g, cfg, epoch)?;
        let tape = Tape::new();
        let (loss, parts) = match objective(&tape, &model, &inp, &weights) {
            Ok(v) => v,
            Err(TrainError::Encoder(EncoderError::Tensor(e))) => {
                aborted = Some((epoch, e.to_string()));
                break;
            }
            Err(e) => return Err(e),
        };
        if !parts.total.is_finite() {
            aborted = Some((epoch, format!("loss is {}", parts.total)));
            break;
        }
        last_good = Some(model.params.clone());
        let mut log = EpochLog {
            epoch,
            losses: parts,
            skipped_negatives: inp.batch.as_ref().map_or(0, |b| b.skipped),
            val_macro_f1: None,
        };

        // The monitored value belongs to the parameters before this step.
        let observed = match monitor {
            Monitor::TrainLoss => Some(-parts.total),
            Monitor::ValMacroF1 if epoch % cfg.eval_every == 0 => {
                let f1 = val_macro_f1(&model, g, derive_seed(cfg.seed, &[purpose::PROBE, epoch as u64]))?;
                log.val_macro_f1 = f1;
                f1
            }
            Monitor::ValMacroF1 => None,
        };
        if let Some(score) = observed {
            if best.as_ref().is_none_or(|b| score > b.1) {
                best = Some((epoch, score, model.params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        info!(
            "epoch {epoch}: total {:.6} lg {:.6} node {:.6} rel {:.6} reg {:.6}",
            parts.total, parts.lg, parts.node, parts.rel, parts.reg
        );
        epochs.push(log);
        if since_best >= cfg.patience {
            stopped_early = true;
            break;
        }

        model.params.zero_grad();
        tape.backward(loss, &mut model.params)?;
        if let Err(e) = adam_step(&mut model.params, &mut adam) {
            aborted = Some((epoch, e.to_string()));
            break;
        }
    }

    let (best_epoch, best_value) = match &best {
        Some((e, v, _)) => (*e, if monitor == Monitor::TrainLoss { -*v } else { *v }),
        None => (0, f64::NAN),
    };
    if aborted.is_some() {
        if let Some(params) = last_good {
            model.params = params;
        }
    } else if let Some((_, _, params)) = best {
        model.params = params;
    }
    model.params.zero_grad();
    let embeddings = model.embed(g)?;
    let wall_time = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        model,
        adam,
        embeddings,
        report: TrainReport {
            epochs,
            monitor,
            best_epoch,
            best_value,
            stopped_early,
            wall_time,
            checkpoint: None,
        },
        aborted,
    })
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Metadata keys stored with every checkpoint so `embed` can rebuild the
/// model.
pub fn checkpoint_for<T: Real>(out: &TrainOutcome<T>) -> Checkpoint<T> {
    let mc = &out.model.config;
    let mut meta = indexmap::IndexMap::new();
    meta.insert("feature_dim".into(), mc.feature_dim as f64);
    meta.insert("dim".into(), mc.dim as f64);
    meta.insert("num_metapaths".into(), mc.num_metapaths as f64);
    meta.insert("layers".into(), mc.layers as f64);
    meta.insert("dropout".into(), mc.dropout);
    meta.insert("curvature".into(), mc.curvature);
    meta.insert("hyperbolic_readout_sigmoid".into(), f64::from(u8::from(mc.hyperbolic_readout_sigmoid)));
    meta.insert("best_epoch".into(), out.report.best_epoch as f64);
    Checkpoint {
        params: out.model.params.clone(),
        adam: Some(out.adam.clone()),
        meta,
    }
}

/// Rebuilds a model from a checkpoint written by [`run_training`].
pub fn model_from_checkpoint<T: Real>(ckpt: Checkpoint<T>) -> Result<Model<T>> {
    let get = |k: &str| {
        ckpt.meta
            .get(k)
            .copied()
            .ok_or_else(|| TrainError::Config(format!("checkpoint lacks `{k}`")))
    };
    let mc = ModelConfig {
        feature_dim: get("feature_dim")? as usize,
        dim: get("dim")? as usize,
        num_metapaths: get("num_metapaths")? as usize,
        layers: get("layers")? as usize,
        dropout: get("dropout")?,
        curvature: get("curvature")?,
        hyperbolic_readout_sigmoid: get("hyperbolic_readout_sigmoid")? != 0.0,
    };
    Ok(Model::new(mc, ckpt.params)?)
}

/// Trains and writes `checkpoint.bin`, `embeddings.tsv`, `report.json` and
/// `losses.tsv` into `out_dir`. On divergence only the last finite
/// checkpoint is written and an error is returned.
pub fn run_training(g: &HeteroGraph, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainReport> {
    std::fs::create_dir_all(out_dir).map_err(|source| TrainError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut out = train::<f64>(g, cfg)?;
    let ckpt_path = out_dir.join("checkpoint.bin");
    save_checkpoint(&ckpt_path, &checkpoint_for(&out))?;
    if let Some((epoch, reason)) = out.aborted.take() {
        return Err(TrainError::NonFinite { epoch, reason });
    }
    out.report.checkpoint = Some("checkpoint.bin".into());
    let ids: Vec<String> = (0..g.num_nodes()).map(|i| g.node_label(i)).collect();
    write(&out_dir.join("embeddings.tsv"), embeddings_to_tsv(&ids, &out.embeddings).as_bytes())?;
    write(&out_dir.join("losses.tsv"), out.report.losses_tsv().as_bytes())?;
    let json = serde_json::to_string_pretty(&out.report).expect("report serializes");
    write(&out_dir.join("report.json"), (json + "\n").as_bytes())?;
    Ok(out.report)
}
