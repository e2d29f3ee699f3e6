//! Independent oracles and fixtures shared by the integration tests and the
//! acceptance suite. Everything here recomputes results from first
//! principles without calling the code under test.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use dmr_core::checkpoint::Checkpoint;
use dmr_core::config::RunConfig;
use dmr_core::evaluation::{auc, diversity_at_n, f1_at_n, precision_at_n, recall_at_n, RankedList};
use dmr_core::grad::{backward, batch_loss, Sample, UserExample};
use dmr_core::model::{ModelConfig, ModelParams, SeqItem};
use dmr_core::network::{
    build_neighbor_index, pcc_similarity, NetworkConfig, SimilarityKind, SimilarityScore,
};
use dmr_core::pipeline::{prepare, trace_table, train_to};
use dmr_core::rng::{stream_rng, Stream, StreamRng};
use dmr_core::synth::{generate, PlantedWorld};
use dmr_core::{Interaction, InteractionLog, ItemId, UserId};
use rand::seq::SliceRandom;
use rand::Rng;

/// A log with `users` users over `items` items. Timestamps strictly increase
/// per user; items may repeat with a different click.
pub fn random_log(
    rng: &mut StreamRng,
    users: u32,
    items: u32,
    max_len: usize,
    click_p: f64,
) -> InteractionLog {
    let mut xs = Vec::new();
    for u in 0..users {
        let len = rng.gen_range(1..=max_len);
        let mut ts = rng.gen_range(0..100i64);
        for _ in 0..len {
            ts += rng.gen_range(1..50);
            xs.push(Interaction {
                user: UserId(u),
                item: ItemId(rng.gen_range(0..items)),
                timestamp: ts,
                click: rng.gen_bool(click_p),
                category: None,
            });
        }
    }
    InteractionLog::from_interactions(xs).expect("valid random log")
}

/// Time-ordered interactions of a user, straight from the log.
fn ordered(log: &InteractionLog, user: UserId) -> Vec<Interaction> {
    let mut xs: Vec<Interaction> = log.iter().filter(|x| x.user == user).copied().collect();
    xs.sort_by_key(|x| (x.timestamp, x.item));
    xs
}

/// Click level per item; a later interaction overrides an earlier one.
fn levels(log: &InteractionLog, user: UserId) -> BTreeMap<ItemId, f64> {
    let mut out = BTreeMap::new();
    for x in ordered(log, user) {
        out.insert(x.item, if x.click { 1.0 } else { 0.0 });
    }
    out
}

/// Pearson correlation over common items, each user's mean taken over all
/// of that user's items. `None` when undefined.
pub fn oracle_pcc(log: &InteractionLog, a: UserId, b: UserId) -> (Option<f64>, usize) {
    let la = levels(log, a);
    let lb = levels(log, b);
    let mean = |l: &BTreeMap<ItemId, f64>| l.values().sum::<f64>() / l.len() as f64;
    let (ma, mb) = (mean(&la), mean(&lb));
    let common: Vec<ItemId> = la.keys().filter(|i| lb.contains_key(i)).copied().collect();
    let mut num = 0.0;
    let mut da2 = 0.0;
    let mut db2 = 0.0;
    for i in &common {
        let da = la[i] - ma;
        let db = lb[i] - mb;
        num += da * db;
        da2 += da * da;
        db2 += db * db;
    }
    if common.is_empty() || da2 == 0.0 || db2 == 0.0 {
        return (None, common.len());
    }
    (Some(num / (da2 * db2).sqrt()), common.len())
}

fn oracle_overlap(log: &InteractionLog, a: UserId, b: UserId) -> (Option<f64>, usize) {
    let la = levels(log, a);
    let lb = levels(log, b);
    let common = la.keys().filter(|i| lb.contains_key(i)).count();
    if common == 0 {
        return (None, 0);
    }
    let v = common as f64 / ((la.len() * lb.len()) as f64).sqrt();
    (Some(2.0 * v - 1.0), common)
}

#[derive(Debug, Default)]
pub struct PccCheck {
    pub pairs: usize,
    pub defined: usize,
    pub max_error: f64,
    pub max_asymmetry: f64,
    pub definedness_mismatches: usize,
}

/// Compares `pcc_similarity` with the direct formula on `pairs` random user
/// pairs drawn from a series of small dense logs.
pub fn check_pcc(pairs: usize, seed: u64) -> PccCheck {
    let mut out = PccCheck::default();
    let mut log_index = 0;
    while out.pairs < pairs {
        let mut rng = stream_rng(seed, Stream::Generator, log_index);
        log_index += 1;
        let log = random_log(&mut rng, 30, 12, 15, 0.5);
        for _ in 0..100.min(pairs - out.pairs) {
            let a = UserId(rng.gen_range(0..30));
            let b = UserId(rng.gen_range(0..30));
            let (ha, hb) = (log.history(a).unwrap(), log.history(b).unwrap());
            let ab = pcc_similarity(ha, hb);
            let ba = pcc_similarity(hb, ha);
            let (want, common) = oracle_pcc(&log, a, b);
            out.pairs += 1;
            if ab.common_items != common || ab.raw.is_some() != want.is_some() {
                out.definedness_mismatches += 1;
                continue;
            }
            if let (Some(got), Some(want)) = (ab.raw, want) {
                out.defined += 1;
                out.max_error = out.max_error.max((got - want).abs());
                let mapped_want = (want + 1.0) / 2.0;
                out.max_error = out
                    .max_error
                    .max((ab.mapped().unwrap() - mapped_want).abs());
                out.max_asymmetry = out.max_asymmetry.max((got - ba.raw.unwrap()).abs());
            } else if ba.raw.is_some() {
                out.definedness_mismatches += 1;
            }
        }
    }
    out
}

/// Brute-force neighbor lists: query-item overlap, threshold cut, sort by
/// mapped similarity then id, candidate cap, neighbor cap, then the rule
/// that at most a fifth of the list (of the cap while filling, of the final
/// length afterwards) may share a single item with the user.
pub fn oracle_neighbors(
    log: &InteractionLog,
    cfg: &NetworkConfig,
) -> BTreeMap<UserId, Vec<(UserId, usize)>> {
    let users: Vec<UserId> = log.users().collect();
    let mut out = BTreeMap::new();
    for &u in &users {
        let mine = ordered(log, u);
        let query: BTreeSet<ItemId> = mine[mine.len().saturating_sub(cfg.query_items)..]
            .iter()
            .map(|x| x.item)
            .collect();
        // similarities count as equal when they agree to 12 decimals
        let grid = |x: f64| (x * 1e12).round() as i64;
        let mut scored: Vec<(i64, UserId, usize)> = Vec::new();
        for &v in &users {
            if v == u || !ordered(log, v).iter().any(|x| query.contains(&x.item)) {
                continue;
            }
            let (raw, common) = match cfg.similarity {
                SimilarityKind::Pcc => oracle_pcc(log, u, v),
                SimilarityKind::Overlap => oracle_overlap(log, u, v),
            };
            let Some(raw) = raw else { continue };
            let mapped = (raw.clamp(-1.0, 1.0) + 1.0) / 2.0;
            if grid(mapped) > grid(cfg.threshold) {
                scored.push((grid(mapped), v, common));
            }
        }
        scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.truncate(cfg.candidate_cap);
        // drop singles beyond the quota, then cap the length
        let quota = cfg.max_neighbors / 5;
        let mut singles_kept = 0;
        let mut list: Vec<(UserId, usize)> = Vec::new();
        for &(_, v, common) in &scored {
            if common == 1 {
                if singles_kept >= quota {
                    continue;
                }
                singles_kept += 1;
            }
            list.push((v, common));
        }
        list.truncate(cfg.max_neighbors);
        // largest single count s with s <= (len - (singles - s)) / 5
        let singles = list.iter().filter(|x| x.1 == 1).count();
        let multis = list.len() - singles;
        let keep = (0..=singles)
            .rev()
            .find(|&s| 5 * s <= multis + s)
            .unwrap_or(0);
        let mut seen_singles = 0;
        list.retain(|x| {
            if x.1 != 1 {
                return true;
            }
            seen_singles += 1;
            seen_singles <= keep
        });
        out.insert(u, list);
    }
    out
}

pub fn random_network_config(rng: &mut StreamRng) -> NetworkConfig {
    let max_neighbors = rng.gen_range(1..=12);
    NetworkConfig {
        query_items: rng.gen_range(1..=3),
        candidate_cap: max_neighbors + rng.gen_range(0..6),
        threshold: *[0.0, 0.25, 0.5, 0.7].choose(rng).unwrap(),
        max_neighbors,
        similarity: if rng.gen_bool(0.8) {
            SimilarityKind::Pcc
        } else {
            SimilarityKind::Overlap
        },
    }
}

/// Runs `build_neighbor_index` against the oracle on `logs` random logs of
/// at most 50 users. Returns the first disagreement.
pub fn check_neighbor_index(logs: u64, seed: u64) -> Result<usize, String> {
    let mut compared = 0;
    for k in 0..logs {
        let mut rng = stream_rng(seed, Stream::Generator, 1000 + k);
        let users = rng.gen_range(2..=50);
        let items = rng.gen_range(5..=40);
        let log = random_log(&mut rng, users, items, 25, 0.6);
        let cfg = random_network_config(&mut rng);
        let index = build_neighbor_index(&log, &cfg).map_err(|e| e.to_string())?;
        let want = oracle_neighbors(&log, &cfg);
        for (u, list) in &want {
            let got: Vec<(UserId, usize)> = index
                .neighbors(*u)
                .unwrap_or_default()
                .iter()
                .map(|n| (n.user, n.common_items))
                .collect();
            if &got != list {
                return Err(format!(
                    "log {k} user {u} config {cfg:?}: got {got:?}, want {list:?}"
                ));
            }
            compared += 1;
        }
    }
    Ok(compared)
}

/// Exact score of a similarity pair for property tests.
pub fn raw_or_nan(s: SimilarityScore) -> f64 {
    s.raw.unwrap_or(f64::NAN)
}

// ---- gradients ----

pub const FD_STEP: f64 = 1e-4;
/// Gradients below this size are compared absolutely rather than relatively.
pub const FD_FLOOR: f64 = 1e-6;

fn sorted_seq(rng: &mut StreamRng, items: u32, max_len: usize) -> Vec<SeqItem> {
    let len = rng.gen_range(0..max_len);
    let mut seq: Vec<SeqItem> = (0..len)
        .map(|_| SeqItem {
            item: ItemId(rng.gen_range(0..items)),
            time: rng.gen_range(-20.0..0.0),
        })
        .collect();
    seq.sort_by(|a, b| a.time.total_cmp(&b.time));
    seq
}

/// A random model with `d <= 8`, `s <= 3`, a few users and an L2 term half
/// of the time.
pub fn micro_model(seed: u64) -> (ModelParams, Vec<UserExample>, f64) {
    let mut rng = stream_rng(seed, Stream::Generator, 0);
    let items = rng.gen_range(2..=6u32);
    let cfg = ModelConfig {
        dim: rng.gen_range(1..=8),
        trends: rng.gen_range(1..=3),
        time_power: rng.gen_range(1.0..2.0),
        time_scale: rng.gen_range(2.0..20.0),
        neg_weight: rng.gen_range(0.0..1.0),
    };
    let params =
        ModelParams::init(cfg, items as usize, &mut stream_rng(seed, Stream::Init, 0)).unwrap();
    let users = rng.gen_range(1..=3);
    let batch = (0..users)
        .map(|_| {
            let n = rng.gen_range(1..6);
            UserExample {
                pos_history: sorted_seq(&mut rng, items, 5),
                pos_future: sorted_seq(&mut rng, items, 4),
                neg_history: sorted_seq(&mut rng, items, 3),
                neg_future: sorted_seq(&mut rng, items, 3),
                samples: (0..n)
                    .map(|_| Sample {
                        item: ItemId(rng.gen_range(0..items)),
                        time: rng.gen_range(-20.0..2.0),
                        label: f64::from(rng.gen_range(0..2u8)),
                    })
                    .collect(),
                causal: rng.gen_bool(0.5),
            }
        })
        .collect();
    let l2 = if rng.gen_bool(0.5) { 1e-3 } else { 0.0 };
    (params, batch, l2)
}

/// Largest relative discrepancy between reverse-mode and central-difference
/// gradients over every parameter entry.
pub fn max_relative_error(params: &ModelParams, batch: &[UserExample], l2: f64) -> f64 {
    let (_, grads) = backward(params, batch, l2).unwrap();
    let mut worst: f64 = 0.0;
    for t in 0..4 {
        let len = params.tensors()[t].as_slice().len();
        for k in 0..len {
            let mut p = params.clone();
            let orig = p.tensors()[t].as_slice()[k];
            p.tensors_mut()[t].as_mut_slice()[k] = orig + FD_STEP;
            let up = batch_loss(&p, batch, l2).unwrap();
            p.tensors_mut()[t].as_mut_slice()[k] = orig - FD_STEP;
            let down = batch_loss(&p, batch, l2).unwrap();
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads.tensors()[t].as_slice()[k];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

/// Worst relative error and its seed over `models` micro-models.
pub fn check_gradients(models: u64) -> (f64, u64) {
    let mut worst = (0.0, 0);
    for seed in 0..models {
        let (params, batch, l2) = micro_model(seed);
        let err = max_relative_error(&params, &batch, l2);
        if err > worst.0 {
            worst = (err, seed);
        }
    }
    worst
}

// ---- metrics ----

#[derive(Debug, Clone)]
pub struct MetricFixture {
    pub items: Vec<ItemId>,
    pub scores: Vec<f64>,
    pub relevant: BTreeSet<ItemId>,
    pub categories: BTreeMap<ItemId, u32>,
    pub n: usize,
}

/// Random candidates with coarse scores (so ties occur), a random relevant
/// subset holding at least one item of each kind, and random categories.
pub fn metric_fixture(seed: u64) -> MetricFixture {
    let mut rng = stream_rng(seed, Stream::Eval, 0);
    let len = rng.gen_range(2..=40);
    let mut ids: Vec<u32> = (0..200).collect();
    ids.shuffle(&mut rng);
    let items: Vec<ItemId> = ids[..len].iter().map(|&i| ItemId(i)).collect();
    let scores: Vec<f64> = (0..len)
        .map(|_| f64::from(rng.gen_range(-10..10)) / 4.0)
        .collect();
    let mut relevant: BTreeSet<ItemId> = items
        .iter()
        .filter(|_| rng.gen_bool(0.3))
        .copied()
        .collect();
    relevant.insert(items[0]);
    relevant.remove(&items[len - 1]);
    let n_cats = rng.gen_range(1..=5);
    let categories = items
        .iter()
        .map(|&i| (i, rng.gen_range(0..n_cats)))
        .collect();
    MetricFixture {
        items,
        scores,
        relevant,
        categories,
        n: rng.gen_range(2..=len + 5),
    }
}

/// Ranking by counting, for every item, how many items beat it.
pub fn oracle_ranking(items: &[ItemId], scores: &[f64]) -> Vec<ItemId> {
    let beats = |a: usize, b: usize| {
        scores[a] > scores[b] || (scores[a] == scores[b] && items[a] < items[b])
    };
    let mut slots = vec![ItemId(u32::MAX); items.len()];
    for b in 0..items.len() {
        let rank = (0..items.len()).filter(|&a| a != b && beats(a, b)).count();
        slots[rank] = items[b];
    }
    slots
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    pub diversity: f64,
}

pub fn oracle_metrics(f: &MetricFixture) -> OracleMetrics {
    let ranking = oracle_ranking(&f.items, &f.scores);
    let top = &ranking[..f.n.min(ranking.len())];
    let hits = top.iter().filter(|i| f.relevant.contains(i)).count() as f64;
    let precision = hits / f.n as f64;
    let recall = hits / f.relevant.len() as f64;
    let f1 = if hits == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, si) in f.items.iter().zip(&f.scores) {
        for (j, sj) in f.items.iter().zip(&f.scores) {
            if f.relevant.contains(i) && !f.relevant.contains(j) {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    let mut distinct = 0.0;
    let mut total = 0.0;
    for a in 0..top.len() {
        for b in a + 1..top.len() {
            total += 1.0;
            if f.categories[&top[a]] != f.categories[&top[b]] {
                distinct += 1.0;
            }
        }
    }
    OracleMetrics {
        precision,
        recall,
        f1,
        auc: wins / pairs,
        diversity: distinct / total,
    }
}

pub fn library_metrics(f: &MetricFixture) -> OracleMetrics {
    let ranked = RankedList::from_scores(UserId(0), &f.items, &f.scores).unwrap();
    let precision = precision_at_n(&ranked, &f.relevant, f.n).unwrap();
    let recall = recall_at_n(&ranked, &f.relevant, f.n);
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (i, s) in f.items.iter().zip(&f.scores) {
        if f.relevant.contains(i) {
            pos.push(*s);
        } else {
            neg.push(*s);
        }
    }
    OracleMetrics {
        precision,
        recall,
        f1: f1_at_n(precision, recall),
        auc: auc(&pos, &neg).unwrap(),
        diversity: diversity_at_n(&ranked, &f.categories, f.n).unwrap(),
    }
}

/// Largest absolute difference over `fixtures` random fixtures, plus any
/// ranking disagreement.
pub fn check_metrics(fixtures: u64) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..fixtures {
        let f = metric_fixture(seed);
        let ranked = RankedList::from_scores(UserId(0), &f.items, &f.scores).unwrap();
        if ranked.items != oracle_ranking(&f.items, &f.scores) {
            return Err(format!("fixture {seed}: ranking differs"));
        }
        let (a, b) = (library_metrics(&f), oracle_metrics(&f));
        for (x, y) in [
            (a.precision, b.precision),
            (a.recall, b.recall),
            (a.f1, b.f1),
            (a.auc, b.auc),
            (a.diversity, b.diversity),
        ] {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}

// ---- determinism and persistence ----

/// A planted world and run settings small enough to train in seconds.
pub fn small_run(epochs: usize) -> (InteractionLog, RunConfig) {
    let world = PlantedWorld {
        n_users: 80,
        n_items: 300,
        interactions_per_user: 40,
        ..PlantedWorld::default()
    };
    let (log, _) = generate(&world).expect("planted log");
    let mut cfg = RunConfig::default();
    cfg.model.dim = 8;
    cfg.train.epochs = epochs;
    cfg.sync_seeds();
    (log, cfg)
}

pub struct RunOutput {
    pub checkpoint: Vec<u8>,
    pub report: String,
    pub trace: String,
}

fn finish(
    log: &InteractionLog,
    cfg: &RunConfig,
    ck: &Checkpoint,
    trace: String,
) -> Result<RunOutput, String> {
    let prepared = prepare(log.clone(), cfg).map_err(|e| e.to_string())?;
    let report = prepared
        .evaluate(&ck.params, cfg)
        .map_err(|e| e.to_string())?;
    Ok(RunOutput {
        checkpoint: ck.to_bytes().map_err(|e| e.to_string())?,
        report: format!("{report:?}"),
        trace,
    })
}

/// Trains from scratch in one go.
pub fn unbroken_run(log: &InteractionLog, cfg: &RunConfig) -> Result<RunOutput, String> {
    let prepared = prepare(log.clone(), cfg).map_err(|e| e.to_string())?;
    let mut ck = prepared
        .init_checkpoint(cfg.seed)
        .map_err(|e| e.to_string())?;
    let rows = train_to(&prepared, &mut ck, cfg).map_err(|e| e.to_string())?;
    finish(log, cfg, &ck, trace_table(&rows))
}

/// Trains `first` epochs, saves to disk, loads in a fresh pipeline and
/// finishes the remaining epochs. The trace is the concatenation of both
/// legs.
pub fn resumed_run(
    log: &InteractionLog,
    cfg: &RunConfig,
    first: usize,
) -> Result<RunOutput, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    let mut leg = cfg.clone();
    leg.train.epochs = first;
    let prepared = prepare(log.clone(), &leg).map_err(|e| e.to_string())?;
    let mut ck = prepared
        .init_checkpoint(cfg.seed)
        .map_err(|e| e.to_string())?;
    let head = train_to(&prepared, &mut ck, &leg).map_err(|e| e.to_string())?;
    ck.save(&path, &leg.hash()).map_err(|e| e.to_string())?;
    drop(prepared);

    let prepared = prepare(log.clone(), cfg).map_err(|e| e.to_string())?;
    let mut ck = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let tail = train_to(&prepared, &mut ck, cfg).map_err(|e| e.to_string())?;
    let rows: Vec<_> = head.into_iter().chain(tail).collect();
    finish(log, cfg, &ck, trace_table(&rows))
}

/// Repeats a seeded run and a save/load/resume run and demands bit
/// equality of checkpoints, reports and loss traces.
pub fn check_determinism_and_resume() -> Result<String, String> {
    let (log, cfg) = small_run(3);
    let a = unbroken_run(&log, &cfg)?;
    let b = unbroken_run(&log, &cfg)?;
    if a.checkpoint != b.checkpoint {
        return Err("same seed gave different checkpoints".into());
    }
    if a.report != b.report || a.trace != b.trace {
        return Err("same seed gave different reports or traces".into());
    }
    let c = resumed_run(&log, &cfg, 1)?;
    if c.trace != a.trace {
        return Err(format!(
            "resumed trace differs:\n{}\nvs\n{}",
            c.trace, a.trace
        ));
    }
    if c.checkpoint != a.checkpoint {
        return Err("resumed checkpoint differs from the unbroken run".into());
    }
    if c.report != a.report {
        return Err("resumed report differs from the unbroken run".into());
    }
    let loaded = Checkpoint::from_bytes(&a.checkpoint).map_err(|e| e.to_string())?;
    if loaded.to_bytes().map_err(|e| e.to_string())? != a.checkpoint {
        return Err("checkpoint does not round-trip bit-exactly".into());
    }
    Ok(format!(
        "{} checkpoint bytes, {} trace rows",
        a.checkpoint.len(),
        a.trace.lines().count() - 1
    ))
}
