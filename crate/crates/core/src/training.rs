//! Adam optimisation of the scoring model over per-user batches.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::grad::{accumulate_data_grads, scored_samples, Gradients, Sample, UserExample};
use crate::interaction::ItemId;
use crate::matrix::Matrix;
use crate::model::{ModelParams, TENSOR_NAMES};
use crate::rng::{stream_rng, Stream};
use crate::scoring::UserContext;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Scored samples per Adam step.
    pub batch_size: usize,
    pub l2_reg: f64,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Sampled unobserved items per positive; 0 trains on explicit
    /// non-clicks only.
    pub neg_ratio: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 32,
            l2_reg: 1e-4,
            epochs: 20,
            seed: 42,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            neg_ratio: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(self.l2_reg >= 0.0 && self.l2_reg.is_finite()) {
            return bad(format!(
                "l2 regularisation must be >= 0, got {}",
                self.l2_reg
            ));
        }
        for (name, b) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("adam {name} must lie in [0, 1), got {b}"));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad(format!("adam eps must be > 0, got {}", self.adam_eps));
        }
        Ok(())
    }
}

/// First and second moment accumulators, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn matches(&self, params: &ModelParams) -> bool {
        let shapes: Vec<_> = params.tensors().iter().map(|t| t.shape()).collect();
        self.first
            .iter()
            .map(Matrix::shape)
            .eq(shapes.iter().copied())
            && self
                .second
                .iter()
                .map(Matrix::shape)
                .eq(shapes.iter().copied())
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    regularized_adam_step(params, grads, 0.0, state, config)
}

/// Adam step on `grads + 2 * l2_reg * θ`, computed entry by entry.
fn regularized_adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    l2_reg: f64,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if !state.matches(params) {
        return Err(Error::Data(
            "optimizer state does not match parameter shapes".into(),
        ));
    }
    for (p, g) in params.tensors().into_iter().zip(grads.tensors()) {
        if p.shape() != g.shape() {
            return Err(Error::DimensionMismatch {
                expected: p.rows() * p.cols(),
                actual: g.rows() * g.cols(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = 2.0 * l2_reg;
    for (k, (p, g)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .enumerate()
    {
        let m = state.first[k].as_mut_slice();
        let v = state.second[k].as_mut_slice();
        let mut finite = true;
        for (((pi, &gi), mi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
            let gi = gi + decay * *pi;
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
            finite &= pi.is_finite();
        }
        if !finite {
            return Err(Error::NonFinite {
                tensor: TENSOR_NAMES[k].to_string(),
            });
        }
    }
    Ok(())
}

/// Mean-BCE loss `-Σ [y log σ(z) + (1-y) log(1-σ(z))]` of (logit, label)
/// pairs plus `l2_reg * ||θ||²` when parameters are given.
pub fn bce_loss(samples: &[(f64, f64)], l2: Option<(f64, &ModelParams)>) -> f64 {
    let data: f64 = samples
        .iter()
        .map(|&(z, y)| crate::grad::bce_term(z, y))
        .sum();
    match l2 {
        Some((reg, params)) => data + reg * params.squared_norm(),
        None => data,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-sample BCE, without the regularisation term.
    pub loss: f64,
    pub samples: usize,
    pub steps: u64,
}

/// Training inputs: per-user contexts plus the pool negatives are drawn from.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub contexts: Vec<UserContext>,
    pub item_pool: Vec<ItemId>,
}

impl TrainingSet {
    pub fn new(contexts: Vec<UserContext>, item_pool: Vec<ItemId>) -> Self {
        Self {
            contexts,
            item_pool,
        }
    }
}

fn sample_unobserved<R: Rng>(rng: &mut R, pool: &[ItemId], ctx: &UserContext) -> Option<ItemId> {
    if pool.len() <= ctx.seen.len() && pool.iter().all(|i| ctx.seen.contains(i)) {
        return None;
    }
    loop {
        let item = pool[rng.gen_range(0..pool.len())];
        if !ctx.seen.contains(&item) {
            return Some(item);
        }
    }
}

/// Builds the scored examples for one user: every observed training
/// interaction plus `neg_ratio` sampled unobserved items per click, each
/// sampled negative placed at its click's time. A sample is scored against
/// the history before it, never against itself; samples with nothing to be
/// scored against are dropped.
pub fn user_example<R: Rng>(
    ctx: &UserContext,
    pool: &[ItemId],
    neg_ratio: usize,
    rng: &mut R,
) -> UserExample {
    let mut samples = Vec::with_capacity(ctx.observed.len() * (1 + neg_ratio));
    for &(item, time, click) in &ctx.observed {
        samples.push(Sample {
            item,
            time,
            label: if click { 1.0 } else { 0.0 },
        });
        if click && !pool.is_empty() {
            for _ in 0..neg_ratio {
                if let Some(neg) = sample_unobserved(rng, pool, ctx) {
                    samples.push(Sample {
                        item: neg,
                        time,
                        label: 0.0,
                    });
                }
            }
        }
    }
    let mut ex = UserExample {
        pos_history: ctx.pos_history.clone(),
        pos_future: ctx.pos_future.clone(),
        neg_history: ctx.neg_history.clone(),
        neg_future: ctx.neg_future.clone(),
        samples: Vec::new(),
        causal: true,
    };
    samples.retain(|s| ex.can_score(s));
    ex.samples = samples;
    ex
}

/// Packs users' samples, in user order, into batches of `batch_size`.
/// A batch may span several users; each user keeps its own sequences.
fn pack_batches(examples: Vec<UserExample>, batch_size: usize) -> Vec<Vec<UserExample>> {
    let mut batches = Vec::new();
    let mut current: Vec<UserExample> = Vec::new();
    let mut filled = 0;
    for ex in examples {
        if !ex.has_positive_rep() {
            continue;
        }
        let mut rest = ex.samples.as_slice();
        while !rest.is_empty() {
            let take = rest.len().min(batch_size - filled);
            current.push(UserExample {
                pos_history: ex.pos_history.clone(),
                pos_future: ex.pos_future.clone(),
                neg_history: ex.neg_history.clone(),
                neg_future: ex.neg_future.clone(),
                samples: rest[..take].to_vec(),
                causal: ex.causal,
            });
            rest = &rest[take..];
            filled += take;
            if filled == batch_size {
                batches.push(std::mem::take(&mut current));
                filled = 0;
            }
        }
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Runs the given epochs (0-based), updating `params` and `state` in place.
///
/// Each epoch visits users in a shuffled order and shuffles every user's
/// samples, then packs them into batches. Order and negative samples depend
/// only on the seed and the epoch number, so a run resumed from a checkpoint
/// at an epoch boundary reproduces the uninterrupted run exactly.
pub fn train(
    set: &TrainingSet,
    params: &mut ModelParams,
    state: &mut AdamState,
    config: &TrainConfig,
    epochs: Range<usize>,
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    params.check_finite()?;
    let mut grads = Gradients::zeros_like(params);
    let mut trace = Vec::new();
    for epoch in epochs {
        let mut shuffler = stream_rng(config.seed, Stream::Shuffle, epoch as u64);
        let mut order: Vec<usize> = (0..set.contexts.len()).collect();
        order.shuffle(&mut shuffler);
        let mut sampler = stream_rng(config.seed, Stream::Sampling, epoch as u64);
        let examples: Vec<UserExample> = order
            .iter()
            .map(|&i| {
                let mut ex = user_example(
                    &set.contexts[i],
                    &set.item_pool,
                    config.neg_ratio,
                    &mut sampler,
                );
                ex.samples.shuffle(&mut shuffler);
                ex
            })
            .collect();
        let mut total = 0.0;
        let mut count = 0;
        for batch in pack_batches(examples, config.batch_size) {
            grads.clear();
            total += accumulate_data_grads(params, &batch, &mut grads)?;
            count += scored_samples(&batch);
            regularized_adam_step(params, &grads, config.l2_reg, state, config)?;
        }
        let loss = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                tensor: "epoch loss".into(),
            });
        }
        trace.push(EpochStats {
            epoch: epoch + 1,
            loss,
            samples: count,
            steps: state.step,
        });
    }
    Ok(trace)
}
