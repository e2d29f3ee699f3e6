//! Per-user model inputs built from a training log and a neighbor index, and
//! the model-backed scorer used for evaluation and recommendation.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evaluation::Scorer;
use crate::interaction::{ChronoSplit, InteractionLog, ItemId, UserId};
use crate::model::{
    build_trend_memory, represent, score_item, ModelParams, SeqItem, UserRepresentation,
};
use crate::network::{extract_future_sequence, NeighborIndex};

/// Static inputs for one user. All times are seconds relative to `origin`,
/// the user's last training timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct UserContext {
    pub user: UserId,
    pub origin: i64,
    pub pos_history: Vec<SeqItem>,
    pub pos_future: Vec<SeqItem>,
    pub neg_history: Vec<SeqItem>,
    pub neg_future: Vec<SeqItem>,
    /// The user's own training interactions as (item, relative time, click).
    pub observed: Vec<(ItemId, f64, bool)>,
    pub seen: BTreeSet<ItemId>,
    /// Largest absolute timestamp read while building this context, per owner.
    pub max_time_used: BTreeMap<UserId, i64>,
}

fn rel(ts: i64, origin: i64) -> f64 {
    (ts - origin) as f64
}

/// Builds one context per user of `train` that appears in `index`.
pub fn build_contexts(
    train: &InteractionLog,
    index: &NeighborIndex,
    future_cap: usize,
) -> Result<Vec<UserContext>> {
    let histories: Vec<_> = train.histories().filter(|h| !h.is_empty()).collect();
    histories
        .par_iter()
        .map(|h| {
            let u = h.user;
            let origin = h.last_timestamp().expect("non-empty history");
            let future = extract_future_sequence(u, index, train, future_cap)?;
            let mut max_time_used = BTreeMap::new();
            max_time_used.insert(u, origin);
            let seq = |xs: &mut dyn Iterator<Item = (ItemId, i64)>| -> Vec<SeqItem> {
                xs.map(|(item, ts)| SeqItem {
                    item,
                    time: rel(ts, origin),
                })
                .collect()
            };
            let pos_history = seq(&mut h.positive_interactions().map(|x| (x.item, x.timestamp)));
            let neg_history = seq(&mut h.negative_interactions().map(|x| (x.item, x.timestamp)));
            for e in &future.entries {
                let m = max_time_used.entry(e.source).or_insert(e.timestamp);
                *m = (*m).max(e.timestamp);
            }
            let pos_future = seq(&mut future
                .entries
                .iter()
                .filter(|e| e.click)
                .map(|e| (e.item, e.timestamp)));
            let neg_future = seq(&mut future
                .entries
                .iter()
                .filter(|e| !e.click)
                .map(|e| (e.item, e.timestamp)));
            Ok(UserContext {
                user: u,
                origin,
                pos_history,
                pos_future,
                neg_history,
                neg_future,
                observed: h
                    .interactions
                    .iter()
                    .map(|x| (x.item, rel(x.timestamp, origin), x.click))
                    .collect(),
                seen: h.interactions.iter().map(|x| x.item).collect(),
                max_time_used,
            })
        })
        .collect()
}

/// Fails if any context read an interaction at or beyond its owner's test
/// boundary, i.e. later than the owner's last training timestamp.
pub fn check_no_leakage(split: &ChronoSplit, contexts: &[UserContext]) -> Result<()> {
    for ctx in contexts {
        for (&owner, &ts) in &ctx.max_time_used {
            let last_train = split
                .train
                .history(owner)
                .and_then(|h| h.last_timestamp())
                .ok_or_else(|| {
                    Error::Data(format!(
                        "context of {} reads unknown user {owner}",
                        ctx.user
                    ))
                })?;
            let boundary = split.boundary(owner);
            if ts > last_train || boundary.is_some_and(|b| ts > b) {
                return Err(Error::Data(format!(
                    "leakage: context of user {} reads time {ts} of user {owner} past its training data",
                    ctx.user
                )));
            }
        }
    }
    Ok(())
}

/// Positive and optional negative representation of a user at a query time.
pub fn user_representations(
    params: &ModelParams,
    ctx: &UserContext,
    query_time: f64,
) -> Result<Option<(UserRepresentation, Option<UserRepresentation>)>> {
    if ctx.pos_history.is_empty() && ctx.pos_future.is_empty() {
        return Ok(None);
    }
    let pos = represent(
        params,
        &build_trend_memory(params, &ctx.pos_history, &ctx.pos_future)?,
        query_time,
    );
    let neg = if ctx.neg_history.is_empty() && ctx.neg_future.is_empty() {
        None
    } else {
        Some(represent(
            params,
            &build_trend_memory(params, &ctx.neg_history, &ctx.neg_future)?,
            query_time,
        ))
    };
    Ok(Some((pos, neg)))
}

/// Scores candidates with a trained model at each user's last training time.
pub struct DmrScorer<'a> {
    params: &'a ModelParams,
    reps: BTreeMap<UserId, (UserRepresentation, Option<UserRepresentation>)>,
}

impl<'a> DmrScorer<'a> {
    pub fn new(params: &'a ModelParams, contexts: &[UserContext]) -> Result<Self> {
        let reps = contexts
            .par_iter()
            .map(|ctx| Ok(user_representations(params, ctx, 0.0)?.map(|r| (ctx.user, r))))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        Ok(Self { params, reps })
    }

    pub fn logits(&self, user: UserId, items: &[ItemId]) -> Option<Result<Vec<f64>>> {
        let (pos, neg) = self.reps.get(&user)?;
        Some(
            items
                .iter()
                .map(|&i| {
                    Ok(score_item(
                        pos,
                        self.params.embedding(i)?,
                        neg.as_ref(),
                        self.params,
                    ))
                })
                .collect(),
        )
    }
}

impl Scorer for DmrScorer<'_> {
    fn score(&self, user: UserId, candidates: &[ItemId]) -> Option<Vec<f64>> {
        self.logits(user, candidates).and_then(|r| r.ok())
    }
}

/// Top-`n` unseen items for a user with their click probabilities.
pub fn recommend(
    params: &ModelParams,
    ctx: &UserContext,
    universe: impl Iterator<Item = ItemId>,
    n: usize,
) -> Result<Vec<(ItemId, f64)>> {
    let Some((pos, neg)) = user_representations(params, ctx, 0.0)? else {
        return Err(Error::Data(format!(
            "user {} has no positive sequence to score from",
            ctx.user
        )));
    };
    let mut scored = universe
        .filter(|i| !ctx.seen.contains(i))
        .map(|i| {
            let logit = score_item(&pos, params.embedding(i)?, neg.as_ref(), params);
            Ok((i, logit))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(n);
    Ok(scored
        .into_iter()
        .map(|(i, logit)| (i, crate::model::sigmoid(logit)))
        .collect())
}
