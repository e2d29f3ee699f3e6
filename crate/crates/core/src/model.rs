//! Multi-trend scoring model.
//!
//! A sequence of (item, time) pairs is softly assigned to `s` trends through a
//! bilinear co-attention against shared initial trend rows. Each trend is then
//! shifted by the weighted mean of the items routed to it and tagged with the
//! weighted mean time of those items. At scoring time the trends are combined
//! by a time-decay attention keyed on the distance between the query time and
//! each trend's mean time. History and future sequences go through the same
//! routing with the same parameters; the two pooled vectors are concatenated
//! and projected back to `d` dimensions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::interaction::ItemId;
use crate::matrix::{axpy, dot, Matrix};

/// Trends whose routed mass falls below this have no mean time.
pub const MASS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub trends: usize,
    /// Exponent of the time-decay logit.
    pub time_power: f64,
    /// Time unit of the decay, in seconds.
    pub time_scale: f64,
    /// Weight of the negative-sequence score.
    pub neg_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            trends: 6,
            time_power: 1.0,
            time_scale: 1.0,
            neg_weight: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.trends == 0 {
            return Err(Error::InvalidArgument(
                "dim and trend count must be >= 1".into(),
            ));
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "time scale must be positive, got {}",
                self.time_scale
            )));
        }
        if !(self.time_power > 0.0 && self.time_power.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "time power must be positive, got {}",
                self.time_power
            )));
        }
        if !(self.neg_weight >= 0.0 && self.neg_weight.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "negative weight must be >= 0, got {}",
                self.neg_weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `|V| x d`
    pub item_embeddings: Matrix,
    /// `s x d`, shared by every user.
    pub trend_init: Matrix,
    /// `d x d` co-attention matrix.
    pub coattention: Matrix,
    /// `2d x d`; maps the concatenated history/future vector to `d`.
    pub fusion: Matrix,
}

pub const TENSOR_NAMES: [&str; 4] = ["item_embeddings", "trend_init", "coattention", "fusion"];

impl ModelParams {
    /// Random initialisation. Embeddings, trend rows and the co-attention
    /// matrix are uniform in `±1/sqrt(d)`; the fusion starts near the average
    /// of the two halves.
    pub fn init<R: Rng + ?Sized>(
        config: ModelConfig,
        num_items: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let scale = 1.0 / (d as f64).sqrt();
        let item_embeddings = Matrix::uniform(num_items, d, scale, rng);
        let trend_init = Matrix::uniform(config.trends, d, scale, rng);
        let coattention = Matrix::uniform(d, d, scale, rng);
        let mut fusion = Matrix::uniform(2 * d, d, 0.1 * scale, rng);
        for k in 0..d {
            fusion.set(k, k, fusion.get(k, k) + 0.5);
            fusion.set(d + k, k, fusion.get(d + k, k) + 0.5);
        }
        Ok(Self {
            config,
            item_embeddings,
            trend_init,
            coattention,
            fusion,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn num_items(&self) -> usize {
        self.item_embeddings.rows()
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

    /// Checks every tensor, naming the first one holding NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in TENSOR_NAMES.iter().zip(self.tensors()) {
            if !t.is_finite() {
                return Err(Error::NonFinite {
                    tensor: (*name).to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.squared_norm()).sum()
    }

    pub fn embedding(&self, item: ItemId) -> Result<&[f64]> {
        if item.index() >= self.num_items() {
            return Err(Error::Data(format!(
                "item {item} outside the embedding table of {} rows",
                self.num_items()
            )));
        }
        Ok(self.item_embeddings.row(item.index()))
    }

    pub fn check_shapes(&self) -> Result<()> {
        let d = self.dim();
        let s = self.config.trends;
        let expect = [
            (self.item_embeddings.cols(), d),
            (self.trend_init.rows(), s),
            (self.trend_init.cols(), d),
            (self.coattention.rows(), d),
            (self.coattention.cols(), d),
            (self.fusion.rows(), 2 * d),
            (self.fusion.cols(), d),
        ];
        for (actual, expected) in expect {
            if actual != expected {
                return Err(Error::DimensionMismatch { expected, actual });
            }
        }
        Ok(())
    }
}

/// An item placed at a time, relative to some per-user origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeqItem {
    pub item: ItemId,
    pub time: f64,
}

/// One routed group (history or future): `s x d` trend rows plus the mean
/// time of each trend, `None` when nothing was routed to it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendGroup {
    pub rows: Matrix,
    pub mean_times: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendMemory {
    pub history: TrendGroup,
    pub future: TrendGroup,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserRepresentation {
    pub history_vec: Vec<f64>,
    pub future_vec: Vec<f64>,
    pub fused: Vec<f64>,
}

/// Result of one routing pass.
#[derive(Debug, Clone)]
pub(crate) struct Routed {
    /// `n x s` assignment weights; each row sums to one. Read by tests.
    #[cfg_attr(not(test), allow(dead_code))]
    pub weights: Matrix,
    pub trends: Matrix,
    pub mean_times: Vec<Option<f64>>,
}

impl Routed {
    pub fn group(&self) -> TrendGroup {
        TrendGroup {
            rows: self.trends.clone(),
            mean_times: self.mean_times.clone(),
        }
    }
}

pub(crate) fn attention_keys(params: &ModelParams) -> Matrix {
    let d = params.dim();
    let s = params.config.trends;
    let inv = 1.0 / (d as f64).sqrt();
    let mut keys = Matrix::zeros(s, d);
    for j in 0..s {
        let t = params.trend_init.row(j);
        let row = keys.row_mut(j);
        for (a, out) in row.iter_mut().enumerate() {
            *out = dot(params.coattention.row(a), t) * inv;
        }
    }
    keys
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub(crate) fn route(params: &ModelParams, embs: &[&[f64]], times: &[f64]) -> Routed {
    let d = params.dim();
    let s = params.config.trends;
    let keys = attention_keys(params);
    let mut weights = Matrix::zeros(embs.len(), s);
    let mut sums = Matrix::zeros(s, d);
    let mut mass = vec![0.0; s];
    let mut time_mass = vec![0.0; s];
    for (n, (x, &time)) in embs.iter().zip(times).enumerate() {
        let w = weights.row_mut(n);
        for (j, wj) in w.iter_mut().enumerate() {
            *wj = dot(x, keys.row(j));
        }
        softmax_in_place(w);
        for j in 0..s {
            let wj = weights.get(n, j);
            axpy(wj, x, sums.row_mut(j));
            mass[j] += wj;
            time_mass[j] += wj * time;
        }
    }
    let mut attended = sums;
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
    Routed {
        weights,
        trends,
        mean_times,
    }
}

/// Routes a sequence of `(embedding, time)` pairs into one trend group.
pub fn route_trends(sequence: &[(&[f64], f64)], params: &ModelParams) -> Result<TrendGroup> {
    params.check_shapes()?;
    let d = params.dim();
    if let Some((x, _)) = sequence.iter().find(|(x, _)| x.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: x.len(),
        });
    }
    let embs: Vec<&[f64]> = sequence.iter().map(|p| p.0).collect();
    let times: Vec<f64> = sequence.iter().map(|p| p.1).collect();
    Ok(route(params, &embs, &times).group())
}

/// Weighted mean `Σ w_x x / max(Σ w_x, 1e-8)`.
pub fn item_level_attention(items: &[&[f64]], weights: &[f64]) -> Vec<f64> {
    let d = items.first().map_or(0, |x| x.len());
    let mut out = vec![0.0; d];
    let mut total = 0.0;
    for (x, &w) in items.iter().zip(weights) {
        axpy(w, x, &mut out);
        total += w;
    }
    let denom = total.max(MASS_EPS);
    out.iter_mut().for_each(|v| *v /= denom);
    out
}

/// Attention weights over trends for a query time. When no trend has a mean
/// time every trend gets weight one, which reduces to plain sum pooling.
pub(crate) fn time_weights(
    mean_times: &[Option<f64>],
    query: f64,
    config: &ModelConfig,
) -> (Vec<f64>, bool) {
    if mean_times.iter().all(Option::is_none) {
        return (vec![1.0; mean_times.len()], true);
    }
    let mut logits: Vec<f64> = mean_times
        .iter()
        .map(|m| match m {
            Some(m) => -((query - m).abs() / config.time_scale).powf(config.time_power),
            None => f64::NEG_INFINITY,
        })
        .collect();
    softmax_in_place(&mut logits);
    (logits, false)
}

/// Derivative of the decay logit with respect to the trend's mean time.
pub(crate) fn decay_logit_slope(query: f64, mean: f64, config: &ModelConfig) -> f64 {
    let diff = query - mean;
    if diff == 0.0 {
        return 0.0;
    }
    let u = diff.abs() / config.time_scale;
    config.time_power * u.powf(config.time_power - 1.0) * diff.signum() / config.time_scale
}

pub(crate) fn pool(rows: &Matrix, weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows.cols()];
    for (j, &w) in weights.iter().enumerate() {
        if w != 0.0 {
            axpy(w, rows.row(j), &mut out);
        }
    }
    out
}

/// Time-aware pooling of one trend group around `query_time`.
pub fn trend_time_attention(
    group: &TrendGroup,
    query_time: f64,
    params: &ModelParams,
) -> Result<Vec<f64>> {
    params.config.validate()?;
    let (w, _) = time_weights(&group.mean_times, query_time, &params.config);
    Ok(pool(&group.rows, &w))
}

pub(crate) fn fuse(params: &ModelParams, history_vec: &[f64], future_vec: &[f64]) -> Vec<f64> {
    let d = params.dim();
    let mut fused = vec![0.0; d];
    for (i, &z) in history_vec.iter().chain(future_vec).enumerate() {
        axpy(z, params.fusion.row(i), &mut fused);
    }
    fused
}

fn route_items(params: &ModelParams, seq: &[SeqItem]) -> Result<Routed> {
    let embs = seq
        .iter()
        .map(|x| params.embedding(x.item))
        .collect::<Result<Vec<_>>>()?;
    let times: Vec<f64> = seq.iter().map(|x| x.time).collect();
    Ok(route(params, &embs, &times))
}

/// Routes both sequences of a user.
pub fn build_trend_memory(
    params: &ModelParams,
    history: &[SeqItem],
    future: &[SeqItem],
) -> Result<TrendMemory> {
    params.check_shapes()?;
    Ok(TrendMemory {
        history: route_items(params, history)?.group(),
        future: route_items(params, future)?.group(),
    })
}

pub fn build_user_representation(
    params: &ModelParams,
    history: &[SeqItem],
    future: &[SeqItem],
    query_time: f64,
) -> Result<UserRepresentation> {
    if history.is_empty() && future.is_empty() {
        return Err(Error::Data(
            "user representation needs a non-empty sequence".into(),
        ));
    }
    params.config.validate()?;
    let memory = build_trend_memory(params, history, future)?;
    Ok(represent(params, &memory, query_time))
}

/// Pools a trend memory at a query time.
pub fn represent(
    params: &ModelParams,
    memory: &TrendMemory,
    query_time: f64,
) -> UserRepresentation {
    let (wh, _) = time_weights(&memory.history.mean_times, query_time, &params.config);
    let (wf, _) = time_weights(&memory.future.mean_times, query_time, &params.config);
    let history_vec = pool(&memory.history.rows, &wh);
    let future_vec = pool(&memory.future.rows, &wf);
    let fused = fuse(params, &history_vec, &future_vec);
    UserRepresentation {
        history_vec,
        future_vec,
        fused,
    }
}

/// Click logit: `fused_pos · e_i - λ fused_neg · e_i`.
pub fn score_item(
    user_rep: &UserRepresentation,
    item: &[f64],
    neg_rep: Option<&UserRepresentation>,
    params: &ModelParams,
) -> f64 {
    let pos = dot(&user_rep.fused, item);
    match neg_rep {
        Some(neg) => pos - params.config.neg_weight * dot(&neg.fused, item),
        None => pos,
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over a candidate set's logits; diagnostic only.
pub fn candidate_softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    if !p.is_empty() {
        softmax_in_place(&mut p);
    }
    p
}
