//! Negative sampling, bilinear discriminators and the contrastive losses.
//!
//! Discriminator parameters live in the same [`ParamSet`] as the encoders:
//! `disc.node` (`d x d`), `disc.rel.{r}` (`d x d` per relation) and
//! `disc.lg` (`d x d`, shared by every local-global pair).

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{ultimate_embeddings, EncoderError, ViewEmbeddings};
use crate::hetgraph::HeteroGraph;
use crate::ndtensor::{Init, ParamSet, ParamSpec, Tape, TensorError, Var};
use crate::rng::{purpose, rng_for};
use crate::Real;

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

/// Rejection-sampling attempts per node negative before giving up.
pub const NODE_NEGATIVE_TRIES: usize = 100;

pub fn param_specs(dim: usize, num_relations: usize) -> Vec<ParamSpec> {
    let mut out = vec![ParamSpec::new("disc.node", dim, dim, Init::Glorot)];
    for r in 0..num_relations {
        out.push(ParamSpec::new(format!("disc.rel.{r}"), dim, dim, Init::Glorot));
    }
    out.push(ParamSpec::new("disc.lg", dim, dim, Init::Glorot));
    out
}

/// A relation triple `(u, r, v)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triple {
    pub u: usize,
    pub r: usize,
    pub v: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripleBatch {
    pub positives: Vec<Triple>,
    /// `(u, r, v_neg)` with `(u, v_neg)` absent from relation `r`. One per
    /// positive, minus those whose sampling gave up.
    pub node_negatives: Vec<Triple>,
    /// `r_neg` for each positive (same index); empty when `|R| = 1`.
    pub rel_negatives: Vec<usize>,
    /// Positives for which no node negative was found.
    pub skipped: usize,
}

/// Draws `s` positives (relation uniform among non-empty ones, then a
/// uniform stored edge), one node negative per positive by rejection, and
/// one relation negative uniform on `R \ {r}`.
pub fn sample_triples(g: &HeteroGraph, s: usize, seed: u64) -> TripleBatch {
    let mut rng = rng_for(seed, &[purpose::TRIPLES]);
    let n = g.num_nodes();
    let num_rel = g.num_relations();
    let live: Vec<usize> = (0..num_rel).filter(|&r| g.metapaths()[r].num_edges() > 0).collect();
    let mut batch = TripleBatch::default();
    if live.is_empty() || n == 0 {
        return batch;
    }
    for _ in 0..s {
        let r = live[rng.random_range(0..live.len())];
        let adj = g.metapaths()[r].edges();
        let k = rng.random_range(0..adj.nnz());
        let u = adj.offsets().partition_point(|&o| o <= k) - 1;
        let v = adj.indices()[k];
        batch.positives.push(Triple { u, r, v });

        let mut found = None;
        for _ in 0..NODE_NEGATIVE_TRIES {
            let cand = rng.random_range(0..n);
            if cand != u && !adj.contains(u, cand) {
                found = Some(cand);
                break;
            }
        }
        match found {
            Some(v_neg) => batch.node_negatives.push(Triple { u, r, v: v_neg }),
            None => batch.skipped += 1,
        }

        if num_rel > 1 {
            let mut r_neg = rng.random_range(0..num_rel - 1);
            if r_neg >= r {
                r_neg += 1;
            }
            batch.rel_negatives.push(r_neg);
        }
    }
    if batch.skipped > 0 {
        warn!(
            "no node negative found for {} of {} positives (neighborhood covers the sampled nodes)",
            batch.skipped, s
        );
    }
    batch
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `sigmoid(z_u^T W z_v)` for plain vectors.
pub fn discriminate<T: Real>(zu: &[T], w: &crate::ndtensor::Tensor<T>, zv: &[T]) -> Result<T> {
    if w.rows() != zu.len() || w.cols() != zv.len() {
        return Err(TensorError::ShapeMismatch {
            op: "discriminate",
            left: vec![zu.len(), zv.len()],
            right: w.shape().to_vec(),
        }
        .into());
    }
    let mut s = T::zero();
    for (i, &a) in zu.iter().enumerate() {
        for (j, &b) in zv.iter().enumerate() {
            s = s + a * w.get(i, j) * b;
        }
    }
    Ok(sigmoid(s))
}

/// `D_node(z_u, z_v)`.
pub fn d_node<T: Real>(params: &ParamSet<T>, zu: &[T], zv: &[T]) -> Result<T> {
    let w = params.get("disc.node").ok_or_else(|| TensorError::UnknownParam("disc.node".into()))?;
    discriminate(zu, w, zv)
}

/// `D_rel(z_u, r, z_v)`; unknown `r` is an error.
pub fn d_rel<T: Real>(params: &ParamSet<T>, zu: &[T], r: usize, zv: &[T]) -> Result<T> {
    let name = format!("disc.rel.{r}");
    let w = params.get(&name).ok_or(TensorError::UnknownParam(name))?;
    discriminate(zu, w, zv)
}

/// `D_lg(z_i, z_g)`.
pub fn d_lg<T: Real>(params: &ParamSet<T>, zi: &[T], zg: &[T]) -> Result<T> {
    let w = params.get("disc.lg").ok_or_else(|| TensorError::UnknownParam("disc.lg".into()))?;
    discriminate(zi, w, zg)
}

/// Logits of the four cross-view pairings of `(u, v)` rows:
/// `(z_u, z_v)`, `(z_u, z~_v)`, `(z~_u, z~_v)`, `(z~_u, z_v)`.
/// `zw = Z W` and `ztw = Z~ W` are computed once per matrix, so the cost
/// is `O(N d^2 + s d)` rather than `O(s d^2)`.
fn four_pairings<'t, T: Real>(
    (z, zw): (Var<'t, T>, Var<'t, T>),
    (zt, ztw): (Var<'t, T>, Var<'t, T>),
    us: &[usize],
    vs: &[usize],
) -> Result<Vec<Var<'t, T>>> {
    let (zwu, ztwu) = (zw.gather_rows(us)?, ztw.gather_rows(us)?);
    let (zv, ztv) = (z.gather_rows(vs)?, zt.gather_rows(vs)?);
    Ok(vec![
        zwu.row_dot(zv)?,
        zwu.row_dot(ztv)?,
        ztwu.row_dot(ztv)?,
        ztwu.row_dot(zv)?,
    ])
}

fn bce<'t, T: Real>(tape: &'t Tape<T>, pos: Vec<Var<'t, T>>, neg: Vec<Var<'t, T>>) -> Result<Var<'t, T>> {
    let n_pos: usize = pos.iter().map(|v| v.shape().0).sum();
    let n_neg: usize = neg.iter().map(|v| v.shape().0).sum();
    let mut targets = vec![T::one(); n_pos];
    targets.resize(n_pos + n_neg, T::zero());
    let all: Vec<_> = pos.into_iter().chain(neg).collect();
    Ok(tape.concat_rows(&all)?.bce_with_logits(&targets)?)
}

/// Intra- and inter-view node MI estimate over the batch. `z`, `zt` are the
/// projected node matrices of the two views.
pub fn loss_node<'t, T: Real>(
    params: &ParamSet<T>,
    batch: &TripleBatch,
    z: Var<'t, T>,
    zt: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let tape = z.tape();
    if batch.positives.is_empty() {
        return Err(TensorError::Invalid("loss_node: empty triple batch".into()).into());
    }
    let w = params.bind(tape, "disc.node")?;
    let (a, b) = ((z, z.matmul(w)?), (zt, zt.matmul(w)?));
    let (pu, pv): (Vec<_>, Vec<_>) = batch.positives.iter().map(|t| (t.u, t.v)).unzip();
    let pos = four_pairings(a, b, &pu, &pv)?;
    let neg = if batch.node_negatives.is_empty() {
        Vec::new()
    } else {
        let (nu, nv): (Vec<_>, Vec<_>) = batch.node_negatives.iter().map(|t| (t.u, t.v)).unzip();
        four_pairings(a, b, &nu, &nv)?
    };
    bce(tape, pos, neg)
}

/// Relation MI estimate: positives scored with their own relation's
/// matrix, negatives (same node pair) with `r_neg`'s.
pub fn loss_rel<'t, T: Real>(
    params: &ParamSet<T>,
    batch: &TripleBatch,
    z: Var<'t, T>,
    zt: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let tape = z.tape();
    if batch.positives.is_empty() || batch.rel_negatives.len() != batch.positives.len() {
        return Err(TensorError::Invalid("loss_rel: needs positives with one relation negative each".into()).into());
    }
    let num_rel = batch
        .positives
        .iter()
        .map(|t| t.r)
        .chain(batch.rel_negatives.iter().copied())
        .max()
        .unwrap_or(0)
        + 1;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for r in 0..num_rel {
        let p: Vec<&Triple> = batch.positives.iter().filter(|t| t.r == r).collect();
        let q: Vec<&Triple> = batch
            .positives
            .iter()
            .zip(&batch.rel_negatives)
            .filter(|(_, &rn)| rn == r)
            .map(|(t, _)| t)
            .collect();
        if p.is_empty() && q.is_empty() {
            continue;
        }
        let w = params.bind(tape, &format!("disc.rel.{r}"))?;
        let (a, b) = ((z, z.matmul(w)?), (zt, zt.matmul(w)?));
        if !p.is_empty() {
            let (us, vs): (Vec<_>, Vec<_>) = p.iter().map(|t| (t.u, t.v)).unzip();
            pos.extend(four_pairings(a, b, &us, &vs)?);
        }
        if !q.is_empty() {
            let (us, vs): (Vec<_>, Vec<_>) = q.iter().map(|t| (t.u, t.v)).unzip();
            neg.extend(four_pairings(a, b, &us, &vs)?);
        }
    }
    bce(tape, pos, neg)
}

/// Projected embeddings of one view needed by the local-global loss.
#[derive(Debug, Clone)]
pub struct Projected<'t, T: Real> {
    /// `z_i^m` per meta-path.
    pub per_metapath: Vec<Var<'t, T>>,
    /// `z_g^m` per meta-path (`1 x d`).
    pub graph_per_metapath: Vec<Var<'t, T>>,
    pub fused: Var<'t, T>,
    pub graph: Var<'t, T>,
}

/// Local-global MI estimate. Positives pair each view's node embeddings
/// (per meta-path, weight `1/|M|`, and fused, weight 1) with the other
/// view's graph vectors; negatives pair the shuffled-feature node
/// embeddings with the same true graph vectors.
pub fn loss_lg<'t, T: Real>(
    params: &ParamSet<T>,
    view1: &Projected<'t, T>,
    view2: &Projected<'t, T>,
    neg1: &Projected<'t, T>,
    neg2: &Projected<'t, T>,
) -> Result<Var<'t, T>> {
    let tape = view1.fused.tape();
    let w = params.bind(tape, "disc.lg")?;
    let m = view1.per_metapath.len();
    if m == 0 || [view2, neg1, neg2].iter().any(|p| p.per_metapath.len() != m) {
        return Err(TensorError::Invalid("loss_lg: views disagree on the number of meta-paths".into()).into());
    }
    let per_m = T::one() / T::of(m as f64);
    let score = |zi: Var<'t, T>, zg: Var<'t, T>| -> Result<Var<'t, T>> { Ok(zi.matmul(w)?.matmul(zg.transpose())?) };

    let mut logits = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    let mut push = |v: Var<'t, T>, t: T, wt: T| {
        let n = v.shape().0;
        logits.push(v);
        targets.extend(std::iter::repeat_n(t, n));
        weights.extend(std::iter::repeat_n(wt, n));
    };
    for k in 0..m {
        let g1 = view1.graph_per_metapath[k];
        let g2 = view2.graph_per_metapath[k];
        push(score(view1.per_metapath[k], g2)?, T::one(), per_m);
        push(score(view2.per_metapath[k], g1)?, T::one(), per_m);
        push(score(neg1.per_metapath[k], g2)?, T::zero(), per_m);
        push(score(neg2.per_metapath[k], g1)?, T::zero(), per_m);
    }
    push(score(view1.fused, view2.graph)?, T::one(), T::one());
    push(score(view2.fused, view1.graph)?, T::one(), T::one());
    push(score(neg1.fused, view2.graph)?, T::zero(), T::one());
    push(score(neg2.fused, view1.graph)?, T::zero(), T::one());
    Ok(tape.concat_rows(&logits)?.bce_with_logits_weighted(&targets, &weights)?)
}

/// `sum_m (|H_ult - H_ult^m|^2 - |H_ult - H_neg^m|^2) / (N d)`.
pub fn loss_reg<'t, T: Real>(h_ult: Var<'t, T>, h_ult_m: &[Var<'t, T>], h_neg_m: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    if h_ult_m.len() != h_neg_m.len() || h_ult_m.is_empty() {
        return Err(TensorError::Invalid("loss_reg: need one negative per meta-path".into()).into());
    }
    let (n, d) = h_ult.shape();
    let mut acc: Option<Var<'t, T>> = None;
    for (p, q) in h_ult_m.iter().zip(h_neg_m) {
        let dp = h_ult.sub(*p)?;
        let dq = h_ult.sub(*q)?;
        let term = dp.hadamard(dp)?.sum().sub(dq.hadamard(dq)?.sum())?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term)?,
        });
    }
    Ok(acc.expect("non-empty").scalar_mul(T::one() / T::of((n * d) as f64)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
}

/// Values of the loss terms of one evaluation (skipped terms are 0).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub lg: f64,
    pub node: f64,
    pub rel: f64,
    pub reg: f64,
}

/// Everything the objective needs from one forward pass.
pub struct ObjectiveInputs<'a, 't, T: Real> {
    pub params: &'a ParamSet<T>,
    pub view1: &'a Projected<'t, T>,
    pub view2: &'a Projected<'t, T>,
    pub neg1: &'a Projected<'t, T>,
    pub neg2: &'a Projected<'t, T>,
    /// Unprojected embeddings for the regularizer.
    pub raw1: &'a ViewEmbeddings<'t, T>,
    pub raw2: &'a ViewEmbeddings<'t, T>,
    pub raw_neg1: &'a ViewEmbeddings<'t, T>,
    pub raw_neg2: &'a ViewEmbeddings<'t, T>,
    pub batch: Option<&'a TripleBatch>,
}

/// `L = L_lg + beta L_node + lambda L_rel + gamma L_reg`. Terms with zero
/// weight are not computed; `L_rel` is skipped when there are no relation
/// negatives.
pub fn total_loss<'t, T: Real>(inp: &ObjectiveInputs<'_, 't, T>, w: &LossWeights) -> Result<(Var<'t, T>, LossParts)> {
    for (name, v) in [("beta", w.beta), ("lambda", w.lambda), ("gamma", w.gamma)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(TensorError::Invalid(format!("loss weight {name}={v} must be finite and >= 0")).into());
        }
    }
    let lg = loss_lg(inp.params, inp.view1, inp.view2, inp.neg1, inp.neg2)?;
    let mut parts = LossParts {
        lg: lg.item().as_f64(),
        ..LossParts::default()
    };
    let mut total = lg;
    let batch = inp.batch.filter(|b| !b.positives.is_empty());
    if w.beta > 0.0 {
        if let Some(b) = batch {
            let l = loss_node(inp.params, b, inp.view1.fused, inp.view2.fused)?;
            parts.node = l.item().as_f64();
            total = total.add(l.scalar_mul(T::of(w.beta)))?;
        }
    }
    if w.lambda > 0.0 {
        if let Some(b) = batch.filter(|b| !b.rel_negatives.is_empty()) {
            let l = loss_rel(inp.params, b, inp.view1.fused, inp.view2.fused)?;
            parts.rel = l.item().as_f64();
            total = total.add(l.scalar_mul(T::of(w.lambda)))?;
        }
    }
    if w.gamma > 0.0 {
        let h_ult = ultimate_embeddings(inp.raw1.fused, inp.raw2.fused)?;
        let pos: Vec<_> = inp
            .raw1
            .per_metapath
            .iter()
            .zip(&inp.raw2.per_metapath)
            .map(|(a, b)| ultimate_embeddings(*a, *b))
            .collect::<Result<_>>()?;
        let neg: Vec<_> = inp
            .raw_neg1
            .per_metapath
            .iter()
            .zip(&inp.raw_neg2.per_metapath)
            .map(|(a, b)| ultimate_embeddings(*a, *b))
            .collect::<Result<_>>()?;
        let l = loss_reg(h_ult, &pos, &neg)?;
        parts.reg = l.item().as_f64();
        total = total.add(l.scalar_mul(T::of(w.gamma)))?;
    }
    parts.total = total.item().as_f64();
    Ok((total, parts))
}
