//! Ranking metrics and a model-agnostic evaluation driver.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::interaction::{ChronoSplit, InteractionLog, ItemId, UserId};
use crate::rng::{stream_rng, Stream};

/// Anything that can score a user's candidate items. Higher is better.
pub trait Scorer: Sync {
    /// Returns `None` when the user cannot be scored at all.
    fn score(&self, user: UserId, candidates: &[ItemId]) -> Option<Vec<f64>>;
}

/// Items in descending score order, ties broken by ascending item id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub user: UserId,
    pub items: Vec<ItemId>,
    pub scores: Vec<f64>,
}

impl RankedList {
    pub fn from_scores(user: UserId, items: &[ItemId], scores: &[f64]) -> Result<Self> {
        if items.len() != scores.len() {
            return Err(Error::DimensionMismatch {
                expected: items.len(),
                actual: scores.len(),
            });
        }
        if items.iter().collect::<BTreeSet<_>>().len() != items.len() {
            return Err(Error::InvalidArgument(format!(
                "ranked list for user {user} repeats an item"
            )));
        }
        let mut pairs: Vec<(ItemId, f64)> =
            items.iter().copied().zip(scores.iter().copied()).collect();
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let (items, scores) = pairs.into_iter().unzip();
        Ok(Self {
            user,
            items,
            scores,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn top(&self, n: usize) -> &[ItemId] {
        &self.items[..n.min(self.items.len())]
    }
}

fn hits(ranked: &RankedList, relevant: &BTreeSet<ItemId>, n: usize) -> usize {
    ranked
        .top(n)
        .iter()
        .filter(|i| relevant.contains(i))
        .count()
}

/// Hits in the top `n` divided by `n`.
pub fn precision_at_n(ranked: &RankedList, relevant: &BTreeSet<ItemId>, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "precision cutoff must be >= 1".into(),
        ));
    }
    if ranked.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "empty ranked list for user {}",
            ranked.user
        )));
    }
    Ok(hits(ranked, relevant, n) as f64 / n as f64)
}

/// Hits in the top `n` divided by the number of relevant items (0 if none).
pub fn recall_at_n(ranked: &RankedList, relevant: &BTreeSet<ItemId>, n: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    hits(ranked, relevant, n) as f64 / relevant.len() as f64
}

pub fn f1_at_n(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Fraction of (positive, negative) pairs ordered correctly, ties 0.5.
///
/// Sorts once and counts by merging, so it runs in O((p + q) log(p + q)).
pub fn auc(scores_pos: &[f64], scores_neg: &[f64]) -> Result<f64> {
    if scores_pos.is_empty() || scores_neg.is_empty() {
        return Err(Error::InvalidArgument(
            "auc needs at least one positive and one negative".into(),
        ));
    }
    if scores_pos.iter().chain(scores_neg).any(|s| s.is_nan()) {
        return Err(Error::NonFinite {
            tensor: "scores".into(),
        });
    }
    let mut neg = scores_neg.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in scores_pos {
        let below = neg.partition_point(|&x| x < p);
        let not_above = neg.partition_point(|&x| x <= p);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (scores_pos.len() as f64 * scores_neg.len() as f64))
}

/// Share of category-distinct pairs among the top `n` items (or the whole
/// list when it is shorter).
pub fn diversity_at_n(
    ranked: &RankedList,
    categories: &BTreeMap<ItemId, u32>,
    n: usize,
) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "diversity cutoff must be >= 2, got {n}"
        )));
    }
    let top = ranked.top(n);
    if top.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "diversity needs at least two ranked items, user {} has {}",
            ranked.user,
            top.len()
        )));
    }
    let cats = top
        .iter()
        .map(|i| {
            categories
                .get(i)
                .copied()
                .ok_or_else(|| Error::Data(format!("item {i} has no category")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for c in &cats {
        *counts.entry(*c).or_default() += 1;
    }
    let m = cats.len();
    let pairs = m * (m - 1) / 2;
    let same: usize = counts
        .values()
        .map(|&c| c * (c.saturating_sub(1)) / 2)
        .sum();
    Ok((pairs - same) as f64 / pairs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub n: usize,
    /// Unobserved items sampled into each user's candidate pool.
    pub pool_size: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n: 50,
            pool_size: 100,
            seed: 42,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidArgument(format!(
                "eval cutoff must be >= 2, got {}",
                self.n
            )));
        }
        Ok(())
    }

    /// Cutoffs diversity is reported at: `n` plus 10, 50 and 100.
    pub fn diversity_cutoffs(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = [self.n, 10, 50, 100].into_iter().collect();
        set.into_iter().collect()
    }
}

/// Items a user is ranked over, and which of them count as hits.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub user: UserId,
    pub candidates: Vec<ItemId>,
    pub relevant: BTreeSet<ItemId>,
}

/// One pool per test user: its test items plus `pool_size` items drawn
/// uniformly from the rest of the log that the user never touched.
pub fn candidate_pools(
    full: &InteractionLog,
    split: &ChronoSplit,
    config: &EvalConfig,
) -> Vec<CandidatePool> {
    let universe: Vec<ItemId> = full.items().collect();
    split
        .test
        .histories()
        .filter(|h| split.train.history(h.user).is_some())
        .map(|h| {
            let touched: BTreeSet<ItemId> = full
                .history(h.user)
                .map(|fh| fh.interactions.iter().map(|x| x.item).collect())
                .unwrap_or_default();
            let eligible: Vec<ItemId> = universe
                .iter()
                .copied()
                .filter(|i| !touched.contains(i))
                .collect();
            let mut rng = stream_rng(config.seed, Stream::Eval, u64::from(h.user.0));
            let mut candidates: BTreeSet<ItemId> = h.interactions.iter().map(|x| x.item).collect();
            candidates.extend(
                eligible
                    .choose_multiple(&mut rng, config.pool_size)
                    .copied(),
            );
            CandidatePool {
                user: h.user,
                candidates: candidates.into_iter().collect(),
                relevant: h
                    .interactions
                    .iter()
                    .filter(|x| x.click)
                    .map(|x| x.item)
                    .collect(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    /// Users with at least one clicked test item that the scorer could rank.
    pub users_evaluated: usize,
    pub users_skipped: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    /// Diversity at `n`.
    pub diversity: f64,
    pub diversity_at: Vec<(usize, f64)>,
}

struct UserMetrics {
    precision: f64,
    recall: f64,
    auc: f64,
    diversity: Vec<f64>,
}

fn user_metrics(
    pool: &CandidatePool,
    scores: &[f64],
    categories: &BTreeMap<ItemId, u32>,
    n: usize,
    cutoffs: &[usize],
) -> Result<UserMetrics> {
    let ranked = RankedList::from_scores(pool.user, &pool.candidates, scores)?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (i, s) in pool.candidates.iter().zip(scores) {
        if pool.relevant.contains(i) {
            pos.push(*s);
        } else {
            neg.push(*s);
        }
    }
    Ok(UserMetrics {
        precision: precision_at_n(&ranked, &pool.relevant, n)?,
        recall: recall_at_n(&ranked, &pool.relevant, n),
        auc: auc(&pos, &neg)?,
        diversity: cutoffs
            .iter()
            .map(|&c| diversity_at_n(&ranked, categories, c))
            .collect::<Result<_>>()?,
    })
}

/// Scores every pool, computes per-user metrics and macro-averages them.
///
/// Users with no clicked test item or no unclicked candidate are skipped,
/// as are users the scorer declines. F1 is taken from the averaged precision
/// and recall.
pub fn evaluate(
    scorer: &dyn Scorer,
    pools: &[CandidatePool],
    categories: &BTreeMap<ItemId, u32>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    let cutoffs = config.diversity_cutoffs();
    let per_user: Vec<Option<UserMetrics>> = pools
        .par_iter()
        .map(|pool| {
            if pool.relevant.is_empty() || pool.relevant.len() == pool.candidates.len() {
                return Ok(None);
            }
            match scorer.score(pool.user, &pool.candidates) {
                None => Ok(None),
                Some(scores) => {
                    if scores.iter().any(|s| !s.is_finite()) {
                        return Err(Error::NonFinite {
                            tensor: format!("scores of user {}", pool.user),
                        });
                    }
                    user_metrics(pool, &scores, categories, config.n, &cutoffs).map(Some)
                }
            }
        })
        .collect::<Result<_>>()?;
    let done: Vec<&UserMetrics> = per_user.iter().flatten().collect();
    if done.is_empty() {
        return Err(Error::Data("no user could be evaluated".into()));
    }
    let k = done.len() as f64;
    let mean = |f: &dyn Fn(&UserMetrics) -> f64| done.iter().map(|m| f(m)).sum::<f64>() / k;
    let precision = mean(&|m| m.precision);
    let recall = mean(&|m| m.recall);
    let diversity_at: Vec<(usize, f64)> = cutoffs
        .iter()
        .enumerate()
        .map(|(j, &c)| (c, mean(&|m| m.diversity[j])))
        .collect();
    Ok(EvalReport {
        n: config.n,
        users_evaluated: done.len(),
        users_skipped: pools.len() - done.len(),
        precision,
        recall,
        f1: f1_at_n(precision, recall),
        auc: mean(&|m| m.auc),
        diversity: diversity_at
            .iter()
            .find(|(c, _)| *c == config.n)
            .map_or(0.0, |x| x.1),
        diversity_at,
    })
}

/// Comma-separated table with one labelled row per report.
pub fn report_table(rows: &[(String, EvalReport)]) -> String {
    let mut out = String::from("label,n,users,precision,recall,f1,auc");
    let cutoffs: Vec<usize> = rows
        .first()
        .map(|(_, r)| r.diversity_at.iter().map(|x| x.0).collect())
        .unwrap_or_default();
    for c in &cutoffs {
        let _ = write!(out, ",diversity@{c}");
    }
    out.push('\n');
    for (label, r) in rows {
        let _ = write!(
            out,
            "{label},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.n, r.users_evaluated, r.precision, r.recall, r.f1, r.auc
        );
        for c in &cutoffs {
            let v = r
                .diversity_at
                .iter()
                .find(|x| x.0 == *c)
                .map_or(f64::NAN, |x| x.1);
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    out
}
