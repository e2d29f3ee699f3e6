//! Reverse-mode gradients of the regularised BCE loss through routing, time
//! attention, fusion and scoring.

use crate::error::{Error, Result};
use crate::interaction::ItemId;
use crate::matrix::{axpy, dot, Matrix};
use crate::model::{
    attention_keys, decay_logit_slope, fuse, pool, softmax_in_place, time_weights, ModelParams,
    SeqItem, MASS_EPS, TENSOR_NAMES,
};

/// One scored (user, item) pair. `time` is relative to the same origin as
/// the user's sequences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub item: ItemId,
    pub time: f64,
    pub label: f64,
}

/// Everything needed to score one user's samples. Sequences are ordered by
/// time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UserExample {
    pub pos_history: Vec<SeqItem>,
    pub pos_future: Vec<SeqItem>,
    pub neg_history: Vec<SeqItem>,
    pub neg_future: Vec<SeqItem>,
    pub samples: Vec<Sample>,
    /// When set, a sample only sees history entries strictly earlier than
    /// its own time; otherwise every sample sees the whole history.
    pub causal: bool,
}

impl UserExample {
    pub fn has_positive_rep(&self) -> bool {
        !(self.pos_history.is_empty() && self.pos_future.is_empty())
    }

    pub fn has_negative_rep(&self) -> bool {
        !(self.neg_history.is_empty() && self.neg_future.is_empty())
    }

    /// Lengths of the positive and negative history prefixes a sample at
    /// `time` may read.
    pub fn history_cuts(&self, time: f64) -> (usize, usize) {
        if self.causal {
            (
                self.pos_history.partition_point(|x| x.time < time),
                self.neg_history.partition_point(|x| x.time < time),
            )
        } else {
            (self.pos_history.len(), self.neg_history.len())
        }
    }

    fn sequences(&self) -> [&[SeqItem]; 4] {
        [
            &self.pos_history,
            &self.pos_future,
            &self.neg_history,
            &self.neg_future,
        ]
    }

    /// Whether a sample has any positive sequence to be scored against.
    pub fn can_score(&self, sample: &Sample) -> bool {
        self.history_cuts(sample.time).0 > 0 || !self.pos_future.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub item_embeddings: Matrix,
    pub trend_init: Matrix,
    pub coattention: Matrix,
    pub fusion: Matrix,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            item_embeddings: z(&params.item_embeddings),
            trend_init: z(&params.trend_init),
            coattention: z(&params.coattention),
            fusion: z(&params.fusion),
        }
    }

    pub fn clear(&mut self) {
        self.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
    }

    pub fn tensors(&self) -> [&Matrix; 4] {
        [
            &self.item_embeddings,
            &self.trend_init,
            &self.coattention,
            &self.fusion,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 4] {
        [
            &mut self.item_embeddings,
            &mut self.trend_init,
            &mut self.coattention,
            &mut self.fusion,
        ]
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in TENSOR_NAMES.iter().zip(self.tensors()) {
            if !t.is_finite() {
                return Err(Error::NonFinite {
                    tensor: format!("grad:{name}"),
                });
            }
        }
        Ok(())
    }
}

/// Numerically stable `-[y log σ(z) + (1-y) log(1-σ(z))]`.
pub fn bce_term(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - label * logit + (-logit.abs()).exp().ln_1p()
}

/// A routed prefix `seq[..cut]` of one of the four sequences.
///
/// Routing keys depend only on the parameters, so every item's assignment
/// weights are independent of the rest of the sequence and each prefix is
/// a snapshot of running sums over the items.
struct Group {
    seq: usize,
    cut: usize,
    mass: Vec<f64>,
    attended: Matrix,
    trends: Matrix,
    mean_times: Vec<Option<f64>>,
}

struct SampleCache {
    /// Groups read by this sample: positive history, positive future,
    /// negative history, negative future. The negative pair is unused when
    /// `z_neg` is `None`.
    groups: [usize; 4],
    /// Time weights for the four groups; `true` marks the unit-weight fallback.
    weights: [(Vec<f64>, bool); 4],
    z_pos: Vec<f64>,
    z_neg: Option<Vec<f64>>,
    fused_pos: Vec<f64>,
    fused_neg: Option<Vec<f64>>,
    logit: f64,
}

struct UserForward {
    keys: Matrix,
    /// Per sequence, `n x s` assignment weights of the items any group reads.
    assignments: [Matrix; 4],
    groups: Vec<Group>,
    /// `None` for samples without a positive sequence.
    samples: Vec<Option<SampleCache>>,
}

fn assign(params: &ModelParams, keys: &Matrix, seq: &[SeqItem]) -> Result<Matrix> {
    let s = params.config.trends;
    let mut w = Matrix::zeros(seq.len(), s);
    for (n, x) in seq.iter().enumerate() {
        let e = params.embedding(x.item)?;
        let row = w.row_mut(n);
        for (j, wj) in row.iter_mut().enumerate() {
            *wj = dot(e, keys.row(j));
        }
        softmax_in_place(row);
    }
    Ok(w)
}

/// Routes every requested prefix of `seq` in one pass. `cuts` must be
/// sorted ascending; returns one group per cut.
fn route_prefixes(
    params: &ModelParams,
    seq_id: usize,
    seq: &[SeqItem],
    w: &Matrix,
    cuts: &[usize],
) -> Vec<Group> {
    let d = params.dim();
    let s = params.config.trends;
    let mut sums = Matrix::zeros(s, d);
    let mut mass = vec![0.0; s];
    let mut time_mass = vec![0.0; s];
    let mut out = Vec::with_capacity(cuts.len());
    let mut next = 0;
    let snapshot = |cut: usize, sums: &Matrix, mass: &[f64], time_mass: &[f64]| {
        let mut attended = sums.clone();
        let mut trends = params.trend_init.clone();
        let mut mean_times = vec![None; s];
        for j in 0..s {
            let denom = mass[j].max(MASS_EPS);
            attended.row_mut(j).iter_mut().for_each(|v| *v /= denom);
            axpy(1.0, attended.row(j), trends.row_mut(j));
            if mass[j] >= MASS_EPS {
                mean_times[j] = Some(time_mass[j] / mass[j]);
            }
        }
        Group {
            seq: seq_id,
            cut,
            mass: mass.to_vec(),
            attended,
            trends,
            mean_times,
        }
    };
    for n in 0..=seq.len() {
        while next < cuts.len() && cuts[next] == n {
            out.push(snapshot(n, &sums, &mass, &time_mass));
            next += 1;
        }
        if next == cuts.len() || n == seq.len() {
            break;
        }
        let x = params.item_embeddings.row(seq[n].item.index());
        for j in 0..s {
            let wj = w.get(n, j);
            axpy(wj, x, sums.row_mut(j));
            mass[j] += wj;
            time_mass[j] += wj * seq[n].time;
        }
    }
    out
}

fn forward_user(params: &ModelParams, ex: &UserExample) -> Result<Option<UserForward>> {
    if !ex.has_positive_rep() {
        return Ok(None);
    }
    let seqs = ex.sequences();
    // which (sequence, cut) each sample reads
    let plans: Vec<Option<([usize; 4], bool)>> = ex
        .samples
        .iter()
        .map(|s| {
            let (pos_cut, neg_cut) = ex.history_cuts(s.time);
            if pos_cut == 0 && ex.pos_future.is_empty() {
                return None;
            }
            let has_neg = neg_cut > 0 || !ex.neg_future.is_empty();
            Some(([pos_cut, seqs[1].len(), neg_cut, seqs[3].len()], has_neg))
        })
        .collect();
    let mut wanted: [Vec<usize>; 4] = Default::default();
    for (cuts, has_neg) in plans.iter().flatten() {
        let used = if *has_neg { 4 } else { 2 };
        for q in 0..used {
            wanted[q].push(cuts[q]);
        }
    }
    let keys = attention_keys(params);
    let mut groups = Vec::new();
    let mut index = std::collections::BTreeMap::new();
    let mut assignments: [Matrix; 4] =
        std::array::from_fn(|_| Matrix::zeros(0, params.config.trends));
    for q in 0..4 {
        wanted[q].sort_unstable();
        wanted[q].dedup();
        let Some(&max_cut) = wanted[q].last() else {
            continue;
        };
        assignments[q] = assign(params, &keys, &seqs[q][..max_cut])?;
        for g in route_prefixes(params, q, seqs[q], &assignments[q], &wanted[q]) {
            index.insert((q, g.cut), groups.len());
            groups.push(g);
        }
    }
    let cfg = &params.config;
    let mut samples = Vec::with_capacity(ex.samples.len());
    for (s, plan) in ex.samples.iter().zip(&plans) {
        let Some((cuts, has_neg)) = plan else {
            samples.push(None);
            continue;
        };
        let ids: [usize; 4] = std::array::from_fn(|q| {
            if q < 2 || *has_neg {
                index[&(q, cuts[q])]
            } else {
                usize::MAX
            }
        });
        let weights: [(Vec<f64>, bool); 4] = std::array::from_fn(|g| {
            if ids[g] == usize::MAX {
                (Vec::new(), false)
            } else {
                time_weights(&groups[ids[g]].mean_times, s.time, cfg)
            }
        });
        let vec_of = |g: usize| pool(&groups[ids[g]].trends, &weights[g].0);
        let (h, f) = (vec_of(0), vec_of(1));
        let fused_pos = fuse(params, &h, &f);
        let z_pos = [h, f].concat();
        let item = params.embedding(s.item)?;
        let mut logit = dot(&fused_pos, item);
        let (z_neg, fused_neg) = if *has_neg {
            let (h, f) = (vec_of(2), vec_of(3));
            let fused = fuse(params, &h, &f);
            logit -= cfg.neg_weight * dot(&fused, item);
            (Some([h, f].concat()), Some(fused))
        } else {
            (None, None)
        };
        if !logit.is_finite() {
            return Err(Error::NonFinite {
                tensor: "logit".into(),
            });
        }
        samples.push(Some(SampleCache {
            groups: ids,
            weights,
            z_pos,
            z_neg,
            fused_pos,
            fused_neg,
            logit,
        }));
    }
    Ok(Some(UserForward {
        keys,
        assignments,
        groups,
        samples,
    }))
}

/// Upstream gradients collected for one routed group.
struct GroupGrad {
    trends: Matrix,
    mean_times: Vec<f64>,
}

fn time_attention_backward(
    group: &Group,
    weights: &[f64],
    fallback: bool,
    query: f64,
    params: &ModelParams,
    d_pooled: &[f64],
    acc: &mut GroupGrad,
) {
    let s = weights.len();
    if fallback {
        for j in 0..s {
            axpy(1.0, d_pooled, acc.trends.row_mut(j));
        }
        return;
    }
    let mut d_alpha = vec![0.0; s];
    for j in 0..s {
        if weights[j] != 0.0 {
            axpy(weights[j], d_pooled, acc.trends.row_mut(j));
        }
        d_alpha[j] = dot(d_pooled, group.trends.row(j));
    }
    let inner: f64 = weights.iter().zip(&d_alpha).map(|(a, b)| a * b).sum();
    for j in 0..s {
        if let Some(m) = group.mean_times[j] {
            let d_logit = weights[j] * (d_alpha[j] - inner);
            acc.mean_times[j] += d_logit * decay_logit_slope(query, m, &params.config);
        }
    }
}

/// Gradients with respect to a group's running sums: weighted item sum,
/// weight mass and time-weighted mass.
struct SumGrad {
    sums: Matrix,
    mass: Vec<f64>,
    time_mass: Vec<f64>,
}

fn group_sum_grad(
    params: &ModelParams,
    group: &Group,
    acc: &GroupGrad,
    grads: &mut Gradients,
) -> SumGrad {
    let d = params.dim();
    let s = params.config.trends;
    let mut out = SumGrad {
        sums: Matrix::zeros(s, d),
        mass: vec![0.0; s],
        time_mass: vec![0.0; s],
    };
    for j in 0..s {
        let d_trend = acc.trends.row(j);
        axpy(1.0, d_trend, grads.trend_init.row_mut(j));
        let denom = group.mass[j].max(MASS_EPS);
        for (o, &v) in out.sums.row_mut(j).iter_mut().zip(d_trend) {
            *o = v / denom;
        }
        if group.mass[j] >= MASS_EPS {
            out.mass[j] -= dot(d_trend, group.attended.row(j)) / denom;
        }
        if let Some(m) = group.mean_times[j] {
            out.time_mass[j] = acc.mean_times[j] / group.mass[j];
            out.mass[j] -= acc.mean_times[j] * m / group.mass[j];
        }
    }
    out
}

/// Pushes the gradients of every prefix of one sequence back to its items.
/// Item `n` sits in every prefix longer than `n`, so it sees the suffix sum
/// of the prefix gradients.
fn sequence_backward(
    params: &ModelParams,
    keys: &Matrix,
    seq: &[SeqItem],
    w: &Matrix,
    mut prefixes: Vec<(usize, SumGrad)>,
    d_keys: &mut Matrix,
    grads: &mut Gradients,
) {
    let d = params.dim();
    let s = params.config.trends;
    prefixes.sort_by_key(|p| std::cmp::Reverse(p.0));
    let mut run = SumGrad {
        sums: Matrix::zeros(s, d),
        mass: vec![0.0; s],
        time_mass: vec![0.0; s],
    };
    let mut next = 0;
    let mut d_w = vec![0.0; s];
    let top = prefixes.first().map_or(0, |p| p.0);
    for n in (0..top).rev() {
        while next < prefixes.len() && prefixes[next].0 > n {
            let g = &prefixes[next].1;
            axpy(1.0, g.sums.as_slice(), run.sums.as_mut_slice());
            axpy(1.0, &g.mass, &mut run.mass);
            axpy(1.0, &g.time_mass, &mut run.time_mass);
            next += 1;
        }
        let item = seq[n].item.index();
        let x = params.item_embeddings.row(item);
        let wn = w.row(n);
        for (j, dw) in d_w.iter_mut().enumerate() {
            *dw = dot(run.sums.row(j), x) + run.mass[j] + run.time_mass[j] * seq[n].time;
        }
        let inner: f64 = wn.iter().zip(&d_w).map(|(a, b)| a * b).sum();
        for j in 0..s {
            let d_logit = wn[j] * (d_w[j] - inner);
            axpy(d_logit, x, d_keys.row_mut(j));
        }
        let d_x = grads.item_embeddings.row_mut(item);
        for j in 0..s {
            let d_logit = wn[j] * (d_w[j] - inner);
            axpy(wn[j], run.sums.row(j), d_x);
            axpy(d_logit, keys.row(j), d_x);
        }
    }
}

/// `keys_j = C t_j / sqrt(d)`
fn keys_backward(params: &ModelParams, d_keys: &Matrix, grads: &mut Gradients) {
    let d = params.dim();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    for j in 0..params.config.trends {
        let t = params.trend_init.row(j);
        for (a, &dka) in d_keys.row(j).iter().enumerate() {
            if dka == 0.0 {
                continue;
            }
            let scaled = dka * inv_sqrt_d;
            axpy(scaled, t, grads.coattention.row_mut(a));
            axpy(
                scaled,
                params.coattention.row(a),
                grads.trend_init.row_mut(j),
            );
        }
    }
}

fn backward_user(params: &ModelParams, ex: &UserExample, fwd: &UserForward, grads: &mut Gradients) {
    let d = params.dim();
    let s = params.config.trends;
    let lambda = params.config.neg_weight;
    let mut accs: Vec<GroupGrad> = (0..fwd.groups.len())
        .map(|_| GroupGrad {
            trends: Matrix::zeros(s, d),
            mean_times: vec![0.0; s],
        })
        .collect();
    let mut d_fused = vec![0.0; d];
    let mut d_z = vec![0.0; 2 * d];
    for (sample, cache) in ex.samples.iter().zip(&fwd.samples) {
        let Some(cache) = cache else { continue };
        let g = crate::model::sigmoid(cache.logit) - sample.label;
        let item = sample.item.index();
        let e_i = params.item_embeddings.row(item).to_vec();

        let d_item = grads.item_embeddings.row_mut(item);
        axpy(g, &cache.fused_pos, d_item);
        if let Some(fneg) = &cache.fused_neg {
            axpy(-lambda * g, fneg, d_item);
        }

        let sides: [(f64, Option<&Vec<f64>>, usize); 2] = [
            (g, Some(&cache.z_pos), 0),
            (-lambda * g, cache.z_neg.as_ref(), 2),
        ];
        for (coef, z, first_slot) in sides {
            let Some(z) = z else { continue };
            d_fused
                .iter_mut()
                .zip(&e_i)
                .for_each(|(o, &e)| *o = coef * e);
            for (i, &zi) in z.iter().enumerate() {
                axpy(zi, &d_fused, grads.fusion.row_mut(i));
                d_z[i] = dot(params.fusion.row(i), &d_fused);
            }
            for half in 0..2 {
                let slot = first_slot + half;
                let gi = cache.groups[slot];
                let (w, fallback) = &cache.weights[slot];
                time_attention_backward(
                    &fwd.groups[gi],
                    w,
                    *fallback,
                    sample.time,
                    params,
                    &d_z[half * d..(half + 1) * d],
                    &mut accs[gi],
                );
            }
        }
    }
    let mut per_seq: [Vec<(usize, SumGrad)>; 4] = Default::default();
    for (group, acc) in fwd.groups.iter().zip(&accs) {
        per_seq[group.seq].push((group.cut, group_sum_grad(params, group, acc, grads)));
    }
    let mut d_keys = Matrix::zeros(s, d);
    for (q, prefixes) in per_seq.into_iter().enumerate() {
        sequence_backward(
            params,
            &fwd.keys,
            ex.sequences()[q],
            &fwd.assignments[q],
            prefixes,
            &mut d_keys,
            grads,
        );
    }
    keys_backward(params, &d_keys, grads);
}

/// Sum of BCE terms over a batch plus `l2_reg * ||θ||²`.
pub fn batch_loss(params: &ModelParams, batch: &[UserExample], l2_reg: f64) -> Result<f64> {
    let mut loss = 0.0;
    for ex in batch {
        if let Some(fwd) = forward_user(params, ex)? {
            for (s, c) in ex.samples.iter().zip(&fwd.samples) {
                if let Some(c) = c {
                    loss += bce_term(c.logit, s.label);
                }
            }
        }
    }
    Ok(loss + l2_reg * params.squared_norm())
}

/// Loss and exact gradients for a batch of users.
///
/// Users without any positive sequence contribute nothing. The time-decay
/// constants and the negative weight are treated as fixed.
pub fn backward(
    params: &ModelParams,
    batch: &[UserExample],
    l2_reg: f64,
) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros_like(params);
    let mut loss = accumulate_data_grads(params, batch, &mut grads)?;
    if l2_reg != 0.0 {
        loss += l2_reg * params.squared_norm();
        for (g, p) in grads.tensors_mut().into_iter().zip(params.tensors()) {
            axpy(2.0 * l2_reg, p.as_slice(), g.as_mut_slice());
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            tensor: "loss".into(),
        });
    }
    grads.check_finite()?;
    Ok((loss, grads))
}

/// Adds the data-term gradients of `batch` into `grads` and returns the
/// summed BCE. No regularisation; the training loop folds that into the
/// optimizer step so the dense tensors are walked once.
pub(crate) fn accumulate_data_grads(
    params: &ModelParams,
    batch: &[UserExample],
    grads: &mut Gradients,
) -> Result<f64> {
    let mut loss = 0.0;
    for ex in batch {
        let Some(fwd) = forward_user(params, ex)? else {
            continue;
        };
        for (s, c) in ex.samples.iter().zip(&fwd.samples) {
            if let Some(c) = c {
                loss += bce_term(c.logit, s.label);
            }
        }
        backward_user(params, ex, &fwd, grads);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            tensor: "loss".into(),
        });
    }
    Ok(loss)
}

/// Number of samples that actually contribute to the loss.
pub fn scored_samples(batch: &[UserExample]) -> usize {
    batch
        .iter()
        .map(|ex| ex.samples.iter().filter(|s| ex.can_score(s)).count())
        .sum()
}
