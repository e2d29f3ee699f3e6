//! Interaction logs with planted multi-trend structure, and a popularity
//! baseline to compare against.
//!
//! Item `i` belongs to category `i % n_categories`. A global pool of trends
//! each carries a distribution over categories; every user adopts a few of
//! them and drifts between them over time. Clicked items follow the active
//! trend, non-clicked items are uniform over the catalogue.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evaluation::{CandidatePool, RankedList, Scorer};
use crate::interaction::{Interaction, InteractionLog, ItemId, UserId};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedWorld {
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub trends_per_user: usize,
    /// `n_trends x n_categories`; row `t` is trend `t`'s category mix.
    pub affinity: Vec<Vec<f64>>,
    /// Chance the active trend changes between consecutive interactions.
    pub drift_prob: f64,
    /// Chance a clicked item ignores the trend and picks a uniform category.
    pub click_noise: f64,
    pub click_rate: f64,
    pub interactions_per_user: usize,
    /// Zipf exponent of item popularity within a category.
    pub item_skew: f64,
    /// Zipf exponent of how often each trend is adopted.
    pub trend_skew: f64,
    pub seed: u64,
}

impl Default for PlantedWorld {
    fn default() -> Self {
        let n_categories = 8;
        Self {
            n_users: 500,
            n_items: 2000,
            n_categories,
            trends_per_user: 2,
            affinity: pair_affinity(n_categories, 0.5),
            drift_prob: 0.1,
            click_noise: 0.05,
            click_rate: 0.6,
            interactions_per_user: 150,
            item_skew: 0.45,
            trend_skew: 1.5,
            seed: 7,
        }
    }
}

/// One trend per unordered category pair `(a, b)`, `a < b`, in
/// lexicographic order: weight `lead` on `a`, the rest on `b`. With skewed
/// trend popularity the early pairs dominate, so low-numbered categories
/// are globally popular while each user still mixes two categories.
pub fn pair_affinity(n_categories: usize, lead: f64) -> Vec<Vec<f64>> {
    let mut rows = Vec::new();
    for a in 0..n_categories {
        for b in a + 1..n_categories {
            let mut row = vec![0.0; n_categories];
            row[a] = lead;
            row[b] = 1.0 - lead;
            rows.push(row);
        }
    }
    rows
}

impl PlantedWorld {
    pub fn n_trends(&self) -> usize {
        self.affinity.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_users == 0
            || self.n_items == 0
            || self.n_categories == 0
            || self.trends_per_user == 0
        {
            return bad("user, item, category and trend counts must be >= 1".into());
        }
        if self.n_items < self.n_categories {
            return bad(format!(
                "{} items cannot cover {} categories",
                self.n_items, self.n_categories
            ));
        }
        if self.interactions_per_user == 0 {
            return bad("interactions per user must be >= 1".into());
        }
        if self.trends_per_user > self.n_trends() {
            return bad(format!(
                "{} trends per user but only {} trends exist",
                self.trends_per_user,
                self.n_trends()
            ));
        }
        for (t, row) in self.affinity.iter().enumerate() {
            if row.len() != self.n_categories {
                return bad(format!(
                    "affinity row {t} has {} entries, expected {}",
                    row.len(),
                    self.n_categories
                ));
            }
            if row.iter().any(|&w| w.is_nan() || w < 0.0)
                || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9
            {
                return bad(format!("affinity row {t} is not a probability vector"));
            }
        }
        for (name, p) in [
            ("drift_prob", self.drift_prob),
            ("click_noise", self.click_noise),
            ("click_rate", self.click_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.item_skew >= 0.0 && self.trend_skew >= 0.0) {
            return bad("skew exponents must be >= 0".into());
        }
        Ok(())
    }

    pub fn category_of(&self, item: ItemId) -> u32 {
        (item.index() % self.n_categories) as u32
    }
}

/// Which trend produced an interaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrendLabel {
    pub user: UserId,
    pub item: ItemId,
    pub timestamp: i64,
    pub trend: u32,
    pub click: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// The trends each user holds.
    pub user_trends: BTreeMap<UserId, Vec<u32>>,
    pub labels: Vec<TrendLabel>,
}

impl GroundTruth {
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "user,item,timestamp,trend,click")?;
        for l in &self.labels {
            writeln!(
                w,
                "{},{},{},{},{}",
                l.user,
                l.item,
                l.timestamp,
                l.trend,
                u8::from(l.click)
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

fn zipf_weights(n: usize, exponent: f64) -> Vec<f64> {
    (1..=n).map(|r| (r as f64).powf(-exponent)).collect()
}

/// Seconds between a user's interactions: one hour plus up to a day.
const STEP_BASE: i64 = 3_600;
const STEP_JITTER: i64 = 86_400;

fn generate_user(
    world: &PlantedWorld,
    user: UserId,
    trend_dist: &WeightedIndex<f64>,
    category_dists: &[WeightedIndex<f64>],
    item_dists: &[(Vec<ItemId>, WeightedIndex<f64>)],
) -> (Vec<Interaction>, Vec<u32>, Vec<TrendLabel>) {
    let mut rng = stream_rng(world.seed, Stream::Generator, u64::from(user.0));
    let mut trends: Vec<u32> = Vec::with_capacity(world.trends_per_user);
    while trends.len() < world.trends_per_user {
        let t = trend_dist.sample(&mut rng) as u32;
        if !trends.contains(&t) {
            trends.push(t);
        }
    }
    let horizon = STEP_JITTER * world.interactions_per_user as i64;
    let mut ts = rng.gen_range(0..=horizon / 2);
    let mut active = rng.gen_range(0..trends.len());
    let mut out = Vec::with_capacity(world.interactions_per_user);
    let mut labels = Vec::with_capacity(world.interactions_per_user);
    for step in 0..world.interactions_per_user {
        if step > 0 {
            ts += STEP_BASE + rng.gen_range(0..STEP_JITTER);
            if trends.len() > 1 && rng.gen_bool(world.drift_prob) {
                let shift = rng.gen_range(1..trends.len());
                active = (active + shift) % trends.len();
            }
        }
        let trend = trends[active];
        let click = rng.gen_bool(world.click_rate);
        let item = if click {
            let cat = if rng.gen_bool(world.click_noise) {
                rng.gen_range(0..world.n_categories)
            } else {
                category_dists[trend as usize].sample(&mut rng)
            };
            let (members, dist) = &item_dists[cat];
            members[dist.sample(&mut rng)]
        } else {
            ItemId(rng.gen_range(0..world.n_items as u32))
        };
        out.push(Interaction {
            user,
            item,
            timestamp: ts,
            click,
            category: Some(world.category_of(item)),
        });
        labels.push(TrendLabel {
            user,
            item,
            timestamp: ts,
            trend,
            click,
        });
    }
    (out, trends, labels)
}

/// Generates the log and its ground-truth trend labels. The result depends
/// only on `world`, including its seed.
pub fn generate(world: &PlantedWorld) -> Result<(InteractionLog, GroundTruth)> {
    world.validate()?;
    let invalid =
        |e: rand::distributions::WeightedError| Error::InvalidArgument(format!("bad weights: {e}"));
    let trend_dist =
        WeightedIndex::new(zipf_weights(world.n_trends(), world.trend_skew)).map_err(invalid)?;
    let category_dists = world
        .affinity
        .iter()
        .map(|row| WeightedIndex::new(row).map_err(invalid))
        .collect::<Result<Vec<_>>>()?;
    let item_dists = (0..world.n_categories)
        .map(|c| {
            let members: Vec<ItemId> = (c..world.n_items)
                .step_by(world.n_categories)
                .map(|i| ItemId(i as u32))
                .collect();
            let dist = WeightedIndex::new(zipf_weights(members.len(), world.item_skew))
                .map_err(invalid)?;
            Ok((members, dist))
        })
        .collect::<Result<Vec<_>>>()?;
    let per_user: Vec<_> = (0..world.n_users as u32)
        .into_par_iter()
        .map(|u| generate_user(world, UserId(u), &trend_dist, &category_dists, &item_dists))
        .collect();
    let mut interactions = Vec::with_capacity(world.n_users * world.interactions_per_user);
    let mut truth = GroundTruth {
        user_trends: BTreeMap::new(),
        labels: Vec::with_capacity(interactions.capacity()),
    };
    for (u, (xs, trends, labels)) in per_user.into_iter().enumerate() {
        interactions.extend(xs);
        truth.user_trends.insert(UserId(u as u32), trends);
        truth.labels.extend(labels);
    }
    Ok((InteractionLog::from_interactions(interactions)?, truth))
}

/// Ranks items by how often they were clicked in `train`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityScorer {
    clicks: BTreeMap<ItemId, usize>,
}

impl PopularityScorer {
    pub fn new(train: &InteractionLog) -> Self {
        let mut clicks = BTreeMap::new();
        for x in train.iter().filter(|x| x.click) {
            *clicks.entry(x.item).or_default() += 1;
        }
        Self { clicks }
    }

    pub fn clicks(&self, item: ItemId) -> usize {
        self.clicks.get(&item).copied().unwrap_or(0)
    }

    pub fn rank(&self, user: UserId, candidates: &[ItemId]) -> Result<RankedList> {
        let unique: BTreeSet<ItemId> = candidates.iter().copied().collect();
        let items: Vec<ItemId> = unique.into_iter().collect();
        let scores: Vec<f64> = items.iter().map(|&i| self.clicks(i) as f64).collect();
        RankedList::from_scores(user, &items, &scores)
    }
}

impl Scorer for PopularityScorer {
    fn score(&self, _: UserId, candidates: &[ItemId]) -> Option<Vec<f64>> {
        Some(candidates.iter().map(|&i| self.clicks(i) as f64).collect())
    }
}

/// Popularity ranking of every pool's candidates, ties by item id.
pub fn popularity_baseline(
    train: &InteractionLog,
    pools: &[CandidatePool],
) -> Result<Vec<RankedList>> {
    let scorer = PopularityScorer::new(train);
    pools
        .iter()
        .map(|p| scorer.rank(p.user, &p.candidates))
        .collect()
}
