//! Downstream evaluation of frozen embeddings: logistic-regression probe
//! (Macro/Micro-F1), k-means clustering (NMI, ARI) and cosine similarity
//! search (Sim@k).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hetgraph::{HeteroGraph, Split};
use crate::rng::{purpose, rng_for};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("class {0} has no training node")]
    ClassMissingFromTrain(usize),
    #[error("graph has no {0}")]
    Missing(&'static str),
    #[error("need more than {k} labeled nodes for sim@{k} (have {n})")]
    TooFewForSim { k: usize, n: usize },
    #[error("k-means needs k >= 2 (got {0})")]
    BadK(usize),
    #[error("embedding matrix: {0}")]
    Shape(String),
    #[error("no embedding for node `{0}`")]
    UnknownNode(String),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Fixed probe schedule.
pub const PROBE_ITERS: usize = 300;
pub const PROBE_LR: f64 = 0.1;
pub const PROBE_L2: f64 = 1e-4;
pub const DEFAULT_RUNS: usize = 50;
pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;
pub const SIM_KS: [usize; 3] = [5, 10, 20];

/// Row-major `n x d` view of an embedding matrix.
#[derive(Debug, Clone, Copy)]
pub struct Rows<'a> {
    pub data: &'a [f64],
    pub dim: usize,
}

impl<'a> Rows<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(EvalError::Shape(format!("{} values do not form rows of width {dim}", data.len())));
        }
        Ok(Self { data, dim })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

// ---------------------------------------------------------------------------
// Classification metrics

/// Macro-F1 over the classes appearing in `truth` or `pred`.
pub fn macro_f1(truth: &[usize], pred: &[usize]) -> f64 {
    let k = truth.iter().chain(pred).max().map_or(0, |m| m + 1);
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fnc = vec![0usize; k];
    for (&t, &p) in truth.iter().zip(pred) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fnc[t] += 1;
        }
    }
    let mut sum = 0.0;
    let mut classes = 0;
    for c in 0..k {
        if tp[c] + fp[c] + fnc[c] == 0 {
            continue;
        }
        classes += 1;
        sum += 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fnc[c]) as f64;
    }
    if classes == 0 {
        0.0
    } else {
        sum / classes as f64
    }
}

/// Micro-F1; for single-label multi-class prediction this is accuracy.
pub fn micro_f1(truth: &[usize], pred: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

// ---------------------------------------------------------------------------
// Logistic probe

/// Multinomial logistic regression trained by full-batch gradient descent
/// on standardized features.
#[derive(Debug, Clone)]
pub struct LogisticModel {
    dim: usize,
    classes: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `classes x (dim + 1)`, bias last.
    weights: Vec<f64>,
}

impl LogisticModel {
    pub fn fit(x: Rows<'_>, y: &[usize], classes: usize, seed: u64) -> Self {
        let (n, d) = (x.len(), x.dim);
        let mut mean = vec![0.0; d];
        for i in 0..n {
            mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut scale = vec![0.0; d];
        for i in 0..n {
            for (j, v) in x.row(i).iter().enumerate() {
                scale[j] += (v - mean[j]).powi(2) / n as f64;
            }
        }
        scale.iter_mut().for_each(|s| *s = if *s > 1e-24 { 1.0 / s.sqrt() } else { 1.0 });

        let z: Vec<f64> = (0..n)
            .flat_map(|i| x.row(i).iter().enumerate().map(|(j, v)| (v - mean[j]) * scale[j]).collect::<Vec<_>>())
            .collect();
        let stride = d + 1;
        let mut rng = rng_for(seed, &[purpose::PROBE]);
        let mut w: Vec<f64> = (0..classes * stride)
            .map(|k| {
                if k % stride == d {
                    0.0
                } else {
                    0.01 * rng.sample::<f64, _>(StandardNormal)
                }
            })
            .collect();
        let mut grad = vec![0.0; w.len()];
        let mut p = vec![0.0; classes];
        for _ in 0..PROBE_ITERS {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for i in 0..n {
                let zi = &z[i * d..(i + 1) * d];
                softmax_scores(&w, zi, classes, &mut p);
                for c in 0..classes {
                    let e = (p[c] - if y[i] == c { 1.0 } else { 0.0 }) / n as f64;
                    let g = &mut grad[c * stride..(c + 1) * stride];
                    g.iter_mut().zip(zi).for_each(|(gj, v)| *gj += e * v);
                    g[d] += e;
                }
            }
            for k in 0..w.len() {
                let reg = if k % stride == d { 0.0 } else { PROBE_L2 * w[k] };
                w[k] -= PROBE_LR * (grad[k] + reg);
            }
        }
        Self {
            dim: d,
            classes,
            mean,
            scale,
            weights: w,
        }
    }

    pub fn predict(&self, v: &[f64]) -> usize {
        let z: Vec<f64> = v
            .iter()
            .enumerate()
            .map(|(j, x)| (x - self.mean[j]) * self.scale[j])
            .collect();
        let mut p = vec![0.0; self.classes];
        softmax_scores(&self.weights, &z, self.classes, &mut p);
        // first maximum wins
        let mut best = 0;
        for c in 1..self.classes {
            if p[c] > p[best] {
                best = c;
            }
        }
        best
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

fn softmax_scores(w: &[f64], z: &[f64], classes: usize, out: &mut [f64]) {
    let stride = z.len() + 1;
    for c in 0..classes {
        let row = &w[c * stride..(c + 1) * stride];
        out[c] = row[..z.len()].iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + row[z.len()];
    }
    let m = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    out.iter_mut().for_each(|o| {
        *o = (*o - m).exp();
        s += *o;
    });
    out.iter_mut().for_each(|o| *o /= s);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub macro_f1: f64,
    pub macro_f1_std: f64,
    pub micro_f1: f64,
    pub micro_f1_std: f64,
}

/// Trains on `train` nodes and scores on `test` nodes, `runs` times with
/// different initializations. Every labeled class must occur in `train`.
pub fn probe_indices(
    x: Rows<'_>,
    labels: &[Option<usize>],
    train: &[usize],
    test: &[usize],
    runs: usize,
    seed: u64,
) -> Result<ProbeResult> {
    let classes = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let train: Vec<usize> = train.iter().copied().filter(|&i| labels[i].is_some()).collect();
    let test: Vec<usize> = test.iter().copied().filter(|&i| labels[i].is_some()).collect();
    let mut present = vec![false; classes];
    train.iter().for_each(|&i| present[labels[i].unwrap()] = true);
    for c in labels.iter().flatten() {
        if !present[*c] {
            return Err(EvalError::ClassMissingFromTrain(*c));
        }
    }
    if test.is_empty() {
        return Err(EvalError::Missing("labeled test nodes"));
    }
    let xt: Vec<f64> = train.iter().flat_map(|&i| x.row(i).to_vec()).collect();
    let yt: Vec<usize> = train.iter().map(|&i| labels[i].unwrap()).collect();
    let truth: Vec<usize> = test.iter().map(|&i| labels[i].unwrap()).collect();
    let mut macs = Vec::with_capacity(runs);
    let mut mics = Vec::with_capacity(runs);
    for run in 0..runs.max(1) {
        let model = LogisticModel::fit(Rows::new(&xt, x.dim)?, &yt, classes, crate::rng::derive_seed(seed, &[run as u64]));
        let pred: Vec<usize> = test.iter().map(|&i| model.predict(x.row(i))).collect();
        macs.push(macro_f1(&truth, &pred));
        mics.push(micro_f1(&truth, &pred));
    }
    let (macro_f1, macro_f1_std) = mean_std(&macs);
    let (micro_f1, micro_f1_std) = mean_std(&mics);
    Ok(ProbeResult {
        macro_f1,
        macro_f1_std,
        micro_f1,
        micro_f1_std,
    })
}

/// Probe with train/test taken from the split column.
pub fn logistic_probe(
    x: Rows<'_>,
    labels: &[Option<usize>],
    splits: &[Option<Split>],
    runs: usize,
    seed: u64,
) -> Result<ProbeResult> {
    let pick = |s: Split| -> Vec<usize> { (0..splits.len()).filter(|&i| splits[i] == Some(s)).collect() };
    probe_indices(x, labels, &pick(Split::Train), &pick(Split::Test), runs, seed)
}

// ---------------------------------------------------------------------------
// Clustering

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Fewer distinct points than clusters.
    pub degenerate: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(x: Rows<'_>, k: usize, seed: u64) -> Result<KMeansResult> {
    let (n, d) = (x.len(), x.dim);
    if k < 2 {
        return Err(EvalError::BadK(k));
    }
    if n < k {
        return Err(EvalError::Shape(format!("{n} points for {k} clusters")));
    }
    let mut rng = rng_for(seed, &[purpose::KMEANS]);
    let mut centers: Vec<f64> = Vec::with_capacity(k * d);
    centers.extend_from_slice(x.row(rng.random_range(0..n)));
    let mut closest: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centers[..d])).collect();
    let mut degenerate = false;
    for _ in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &c) in closest.iter().enumerate() {
                if t < c {
                    chosen = i;
                    break;
                }
                t -= c;
            }
            chosen
        } else {
            degenerate = true;
            rng.random_range(0..n)
        };
        let start = centers.len();
        centers.extend_from_slice(x.row(pick));
        for i in 0..n {
            closest[i] = closest[i].min(sq_dist(x.row(i), &centers[start..start + d]));
        }
    }

    let mut assignment = vec![0usize; n];
    let mut iterations = 0;
    for it in 0..KMEANS_MAX_ITERS {
        iterations = it + 1;
        for i in 0..n {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for c in 0..k {
                let dist = sq_dist(x.row(i), &centers[c * d..(c + 1) * d]);
                if dist < bd {
                    bd = dist;
                    best = c;
                }
            }
            assignment[i] = best;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignment[i];
            counts[c] += 1;
            sums[c * d..(c + 1) * d].iter_mut().zip(x.row(i)).for_each(|(s, v)| *s += v);
        }
        let mut shift = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for j in 0..d {
                let v = sums[c * d + j] / counts[c] as f64;
                shift += (v - centers[c * d + j]).powi(2);
                centers[c * d + j] = v;
            }
        }
        if shift <= KMEANS_TOL {
            break;
        }
    }
    let inertia = (0..n)
        .map(|i| sq_dist(x.row(i), &centers[assignment[i] * d..(assignment[i] + 1) * d]))
        .sum();
    Ok(KMeansResult {
        assignment,
        inertia,
        iterations,
        degenerate,
    })
}

fn contingency(a: &[usize], b: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut t = vec![vec![0.0; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        t[x][y] += 1.0;
    }
    let ra = t.iter().map(|r| r.iter().sum()).collect();
    let rb = (0..kb).map(|j| t.iter().map(|r| r[j]).sum()).collect();
    (t, ra, rb)
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization.
/// Two single-cluster partitions score 1; one single-cluster partition
/// against a non-trivial one scores 0.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let (t, ra, rb) = contingency(a, b);
    let (ha, hb) = (entropy(&ra, n), entropy(&rb, n));
    if ha == 0.0 && hb == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for (i, row) in t.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0.0 {
                mi += c / n * (n * c / (ra[i] * rb[j])).ln();
            }
        }
    }
    (mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0)
}

/// Adjusted Rand index (permutation model).
pub fn ari(a: &[usize], b: &[usize]) -> f64 {
    let comb2 = |x: f64| x * (x - 1.0) / 2.0;
    let (t, ra, rb) = contingency(a, b);
    let index: f64 = t.iter().flatten().map(|&c| comb2(c)).sum();
    let sa: f64 = ra.iter().map(|&c| comb2(c)).sum();
    let sb: f64 = rb.iter().map(|&c| comb2(c)).sum();
    let total = comb2(a.len() as f64);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sa * sb / total;
    let max = (sa + sb) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub nmi: f64,
    pub ari: f64,
    pub degenerate: bool,
}

/// k-means on the labeled rows with `k` = number of classes, averaged
/// over `runs` seeds.
pub fn kmeans_eval(x: Rows<'_>, labels: &[Option<usize>], runs: usize, seed: u64) -> Result<ClusterResult> {
    let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    let truth: Vec<usize> = idx.iter().map(|&i| labels[i].unwrap()).collect();
    let mut classes = truth.clone();
    classes.sort_unstable();
    classes.dedup();
    let k = classes.len();
    let sub: Vec<f64> = idx.iter().flat_map(|&i| x.row(i).to_vec()).collect();
    let rows = Rows::new(&sub, x.dim)?;
    let runs = runs.max(1);
    let (mut n_sum, mut a_sum, mut degenerate) = (0.0, 0.0, false);
    for run in 0..runs {
        let r = kmeans(rows, k, crate::rng::derive_seed(seed, &[run as u64]))?;
        degenerate |= r.degenerate;
        n_sum += nmi(&truth, &r.assignment);
        a_sum += ari(&truth, &r.assignment);
    }
    Ok(ClusterResult {
        nmi: n_sum / runs as f64,
        ari: a_sum / runs as f64,
        degenerate,
    })
}

// ---------------------------------------------------------------------------
// Similarity search

/// Sim@k for each `k` over labeled nodes: mean fraction of a node's top-k
/// cosine neighbours (self excluded, ties by ascending node id) sharing
/// its class.
pub fn similarity_search(x: Rows<'_>, labels: &[Option<usize>], ks: &[usize]) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    let n = idx.len();
    if let Some(&k) = ks.iter().find(|&&k| n <= k) {
        return Err(EvalError::TooFewForSim { k, n });
    }
    let unit: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| {
            let r = x.row(i);
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                r.iter().map(|v| v / norm).collect()
            } else {
                vec![0.0; r.len()]
            }
        })
        .collect();
    let kmax = ks.iter().copied().max().unwrap_or(0);
    let mut hits = vec![0.0; ks.len()];
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for a in 0..n {
        order.clear();
        for b in 0..n {
            if a != b {
                let s: f64 = unit[a].iter().zip(&unit[b]).map(|(p, q)| p * q).sum();
                order.push((s, b));
            }
        }
        order.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)));
        let la = labels[idx[a]];
        let mut same = 0usize;
        let mut cum = Vec::with_capacity(kmax);
        for &(_, b) in order.iter().take(kmax) {
            same += usize::from(labels[idx[b]] == la);
            cum.push(same);
        }
        for (h, &k) in hits.iter_mut().zip(ks) {
            *h += cum[k - 1] as f64 / k as f64;
        }
    }
    Ok(hits.into_iter().map(|h| h / n as f64).collect())
}

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub macro_f1: f64,
    pub macro_f1_std: f64,
    pub micro_f1: f64,
    pub micro_f1_std: f64,
    pub nmi: f64,
    pub ari: f64,
    #[serde(rename = "sim@5")]
    pub sim_at_5: f64,
    #[serde(rename = "sim@10")]
    pub sim_at_10: f64,
    #[serde(rename = "sim@20")]
    pub sim_at_20: f64,
    pub kmeans_degenerate: bool,
}

/// All three protocols on embeddings aligned with the graph's nodes.
pub fn evaluate(x: Rows<'_>, g: &HeteroGraph, runs: usize, seed: u64) -> Result<EvalReport> {
    if x.len() != g.num_nodes() {
        return Err(EvalError::Shape(format!("{} rows for {} nodes", x.len(), g.num_nodes())));
    }
    let labels = g.labels().ok_or(EvalError::Missing("labels"))?;
    let splits = g.splits().ok_or(EvalError::Missing("splits"))?;
    let probe = logistic_probe(x, labels, splits, runs, seed)?;
    let cl = kmeans_eval(x, labels, runs, seed)?;
    let sim = similarity_search(x, labels, &SIM_KS)?;
    Ok(EvalReport {
        macro_f1: probe.macro_f1,
        macro_f1_std: probe.macro_f1_std,
        micro_f1: probe.micro_f1,
        micro_f1_std: probe.micro_f1_std,
        nmi: cl.nmi,
        ari: cl.ari,
        sim_at_5: sim[0],
        sim_at_10: sim[1],
        sim_at_20: sim[2],
        kmeans_degenerate: cl.degenerate,
    })
}

/// Reorders an embedding table so row `i` belongs to graph node `i`.
pub fn align_to_graph(table: &crate::encoders::EmbeddingTable, g: &HeteroGraph) -> Result<Vec<f64>> {
    let pos: std::collections::HashMap<&str, usize> =
        table.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut out = Vec::with_capacity(g.num_nodes() * table.dim);
    for i in 0..g.num_nodes() {
        let id = g.node_label(i);
        let &r = pos.get(id.as_str()).ok_or(EvalError::UnknownNode(id))?;
        out.extend_from_slice(table.row(r));
    }
    Ok(out)
}
