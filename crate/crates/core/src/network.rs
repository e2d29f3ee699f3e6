//! Implicit user network: Pearson similarity between users, neighbor
//! selection around each user's query items, and extraction of the relative
//! future sequence contributed by those neighbors.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::interaction::{InteractionLog, ItemId, UserHistory, UserId};

pub const INDEX_FORMAT_VERSION: u32 = 1;

/// Similarity between two users. `raw` is `None` when the score is undefined
/// (no common items, or a zero-variance side).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityScore {
    pub raw: Option<f64>,
    pub common_items: usize,
}

impl SimilarityScore {
    fn undefined(common_items: usize) -> Self {
        Self {
            raw: None,
            common_items,
        }
    }

    /// `(raw + 1) / 2`, in `[0, 1]`.
    pub fn mapped(&self) -> Option<f64> {
        self.raw.map(map_similarity)
    }

    pub fn is_defined(&self) -> bool {
        self.raw.is_some()
    }
}

pub fn map_similarity(raw: f64) -> f64 {
    (raw + 1.0) / 2.0
}

/// Mapped similarity on a 1e-12 grid. Ranking and the threshold use this so
/// that scores equal up to rounding tie, and the tie goes to the lower id.
pub fn similarity_key(mapped: f64) -> i64 {
    (mapped * 1e12).round() as i64
}

/// Pearson correlation over the items both users interacted with.
///
/// Levels must be sorted by item. Each user's mean level is taken over all of
/// that user's items, so a single common item scores ±1 whenever both users
/// deviate from their own averages on it.
pub fn pcc_from_levels(a: &[(ItemId, f64)], b: &[(ItemId, f64)]) -> SimilarityScore {
    if a.is_empty() || b.is_empty() {
        return SimilarityScore::undefined(0);
    }
    let mean_a = a.iter().map(|x| x.1).sum::<f64>() / a.len() as f64;
    let mean_b = b.iter().map(|x| x.1).sum::<f64>() / b.len() as f64;
    let (mut i, mut j) = (0, 0);
    let (mut cov, mut var_a, mut var_b) = (0.0, 0.0, 0.0);
    let mut common = 0;
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                let da = a[i].1 - mean_a;
                let db = b[j].1 - mean_b;
                cov += da * db;
                var_a += da * da;
                var_b += db * db;
                common += 1;
                i += 1;
                j += 1;
            }
        }
    }
    if common == 0 || var_a == 0.0 || var_b == 0.0 {
        return SimilarityScore::undefined(common);
    }
    let raw = (cov / (var_a.sqrt() * var_b.sqrt())).clamp(-1.0, 1.0);
    SimilarityScore {
        raw: Some(raw),
        common_items: common,
    }
}

pub fn pcc_similarity(hist_i: &UserHistory, hist_j: &UserHistory) -> SimilarityScore {
    pcc_from_levels(&hist_i.click_levels(), &hist_j.click_levels())
}

/// Set-overlap similarity `|I(i) ∩ I(j)| / sqrt(|I(i)| |I(j)|)`, reported on
/// the raw `[-1, 1]` scale so that its mapped value equals the overlap.
pub fn overlap_from_levels(a: &[(ItemId, f64)], b: &[(ItemId, f64)]) -> SimilarityScore {
    let sa: BTreeSet<_> = a.iter().map(|x| x.0).collect();
    let common = b.iter().filter(|x| sa.contains(&x.0)).count();
    if common == 0 {
        return SimilarityScore::undefined(0);
    }
    let v = common as f64 / ((a.len() * b.len()) as f64).sqrt();
    SimilarityScore {
        raw: Some(2.0 * v - 1.0),
        common_items: common,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityKind {
    Pcc,
    Overlap,
}

impl SimilarityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SimilarityKind::Pcc => "pcc",
            SimilarityKind::Overlap => "overlap",
        }
    }

    fn score(self, a: &[(ItemId, f64)], b: &[(ItemId, f64)]) -> SimilarityScore {
        match self {
            SimilarityKind::Pcc => pcc_from_levels(a, b),
            SimilarityKind::Overlap => overlap_from_levels(a, b),
        }
    }
}

impl FromStr for SimilarityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcc" => Ok(SimilarityKind::Pcc),
            "overlap" => Ok(SimilarityKind::Overlap),
            other => Err(Error::InvalidArgument(format!(
                "unknown similarity {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkConfig {
    /// Number of most recent interactions used as query items.
    pub query_items: usize,
    /// Cap on ranked candidates considered per user.
    pub candidate_cap: usize,
    /// Neighbors need a mapped similarity strictly above this.
    pub threshold: f64,
    pub max_neighbors: usize,
    pub similarity: SimilarityKind,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            query_items: 1,
            candidate_cap: 100,
            threshold: 0.5,
            max_neighbors: 20,
            similarity: SimilarityKind::Pcc,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.query_items < 1 {
            return Err(Error::InvalidArgument(
                "query item count k must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::InvalidArgument(format!(
                "similarity threshold must lie in [0, 1), got {}",
                self.threshold
            )));
        }
        if self.candidate_cap < self.max_neighbors {
            return Err(Error::InvalidArgument(format!(
                "candidate cap {} is below the neighbor count {}",
                self.candidate_cap, self.max_neighbors
            )));
        }
        Ok(())
    }

    /// Largest number of single-common-item neighbors a full list may hold.
    pub fn single_item_quota(&self) -> usize {
        self.max_neighbors / 5
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub user: UserId,
    pub raw: f64,
    pub mapped: f64,
    pub common_items: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    pub config: NetworkConfig,
    lists: BTreeMap<UserId, Vec<Neighbor>>,
}

impl NeighborIndex {
    pub fn from_lists(config: NetworkConfig, lists: BTreeMap<UserId, Vec<Neighbor>>) -> Self {
        Self { config, lists }
    }

    pub fn neighbors(&self, user: UserId) -> Option<&[Neighbor]> {
        self.lists.get(&user).map(Vec::as_slice)
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.lists.keys().copied()
    }

    pub fn num_users(&self) -> usize {
        self.lists.len()
    }

    pub fn lists(&self) -> &BTreeMap<UserId, Vec<Neighbor>> {
        &self.lists
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let c = &self.config;
        writeln!(w, "dmr-neighbor-index {INDEX_FORMAT_VERSION}")?;
        writeln!(
            w,
            "k={} g={} tau={} n_max={} similarity={} users={}",
            c.query_items,
            c.candidate_cap,
            c.threshold,
            c.max_neighbors,
            c.similarity.as_str(),
            self.lists.len()
        )?;
        writeln!(w, "user neighbor mapped_sim common_items raw_sim")?;
        for (u, list) in &self.lists {
            if list.is_empty() {
                writeln!(w, "{u} - - 0 -")?;
            }
            for n in list {
                writeln!(
                    w,
                    "{} {} {} {} {}",
                    u, n.user, n.mapped, n.common_items, n.raw
                )?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, Ok(l))) => Ok((i + 1, l)),
                Some((_, Err(e))) => Err(Error::io("<index>", e)),
                None => Err(Error::Corrupt(format!("neighbor index ends before {what}"))),
            }
        };
        let (_, magic) = next("header")?;
        let version = magic
            .strip_prefix("dmr-neighbor-index ")
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| Error::Corrupt("not a neighbor index file".into()))?;
        if version != INDEX_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: INDEX_FORMAT_VERSION,
                found: version,
            });
        }
        let (_, params) = next("parameters")?;
        let mut kv = HashMap::new();
        for tok in params.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Corrupt(format!("bad parameter token {tok:?}")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        fn field<T: FromStr>(kv: &HashMap<String, String>, key: &str) -> Result<T> {
            kv.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Corrupt(format!("missing or bad index parameter {key}")))
        }
        let config = NetworkConfig {
            query_items: field(&kv, "k")?,
            candidate_cap: field(&kv, "g")?,
            threshold: field(&kv, "tau")?,
            max_neighbors: field(&kv, "n_max")?,
            similarity: kv
                .get("similarity")
                .ok_or_else(|| Error::Corrupt("missing similarity".into()))?
                .parse()?,
        };
        let users: usize = field(&kv, "users")?;
        next("column header")?;
        let mut lists: BTreeMap<UserId, Vec<Neighbor>> = BTreeMap::new();
        while let Ok((lineno, line)) = next("") {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Record {
                line: lineno,
                message: format!("bad index row {line:?}"),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let u = UserId(f[0].parse().map_err(|_| bad())?);
            let list = lists.entry(u).or_default();
            if f[1] == "-" {
                continue;
            }
            list.push(Neighbor {
                user: UserId(f[1].parse().map_err(|_| bad())?),
                mapped: f[2].parse().map_err(|_| bad())?,
                common_items: f[3].parse().map_err(|_| bad())?,
                raw: f[4].parse().map_err(|_| bad())?,
            });
        }
        if lists.len() != users {
            return Err(Error::Corrupt(format!(
                "index declares {users} users but holds {}",
                lists.len()
            )));
        }
        Ok(Self { config, lists })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

/// Items of the last `k` interactions of a history.
pub fn query_items(history: &UserHistory, k: usize) -> Vec<ItemId> {
    let n = history.len();
    history.interactions[n.saturating_sub(k)..]
        .iter()
        .map(|x| x.item)
        .collect()
}

/// Timestamp of the earliest query item; the future sequence starts here.
pub fn query_time(history: &UserHistory, k: usize) -> Option<i64> {
    let n = history.len();
    history
        .interactions
        .get(n.saturating_sub(k.max(1)))
        .map(|x| x.timestamp)
}

/// Takes ranked candidates (best first) and applies the neighbor cap and the
/// single-common-item quota.
fn select_neighbors(ranked: &[Neighbor], max_neighbors: usize, quota: usize) -> Vec<Neighbor> {
    let mut out = Vec::with_capacity(max_neighbors.min(ranked.len()));
    let mut singles = 0;
    for n in ranked {
        if out.len() == max_neighbors {
            break;
        }
        if n.common_items == 1 {
            if singles == quota {
                continue;
            }
            singles += 1;
        }
        out.push(*n);
    }
    // the quota must also hold relative to a short list
    while singles > out.len() / 5 {
        let pos = out
            .iter()
            .rposition(|n| n.common_items == 1)
            .expect("single-item neighbor present");
        out.remove(pos);
        singles -= 1;
    }
    out
}

/// Builds every user's neighbor list.
///
/// Candidates are the users who share at least one of the user's query items.
/// Scores that are undefined or not above the threshold are discarded; the
/// survivors are ranked by mapped similarity (ties, up to 1e-12, by user id), capped at
/// `candidate_cap`, and cut to `max_neighbors` under the single-item quota.
pub fn build_neighbor_index(log: &InteractionLog, config: &NetworkConfig) -> Result<NeighborIndex> {
    config.validate()?;
    if log.is_empty() {
        return Err(Error::Data(
            "cannot build a neighbor index from an empty log".into(),
        ));
    }
    let levels: BTreeMap<UserId, Vec<(ItemId, f64)>> = log
        .histories()
        .map(|h| (h.user, h.click_levels()))
        .collect();
    let mut by_item: HashMap<ItemId, Vec<UserId>> = HashMap::new();
    for (u, ls) in &levels {
        for (item, _) in ls {
            by_item.entry(*item).or_default().push(*u);
        }
    }
    let users: Vec<&UserHistory> = log.histories().collect();
    let lists: Vec<(UserId, Vec<Neighbor>)> = users
        .par_iter()
        .map(|h| {
            let u = h.user;
            let mut candidates = BTreeSet::new();
            for item in query_items(h, config.query_items) {
                if let Some(us) = by_item.get(&item) {
                    candidates.extend(us.iter().copied().filter(|&v| v != u));
                }
            }
            let mine = &levels[&u];
            let mut ranked: Vec<Neighbor> = candidates
                .into_iter()
                .filter_map(|v| {
                    let s = config.similarity.score(mine, &levels[&v]);
                    let raw = s.raw?;
                    let mapped = map_similarity(raw);
                    (similarity_key(mapped) > similarity_key(config.threshold)).then_some(
                        Neighbor {
                            user: v,
                            raw,
                            mapped,
                            common_items: s.common_items,
                        },
                    )
                })
                .collect();
            ranked.sort_by_key(|n| (std::cmp::Reverse(similarity_key(n.mapped)), n.user));
            ranked.truncate(config.candidate_cap);
            let chosen =
                select_neighbors(&ranked, config.max_neighbors, config.single_item_quota());
            (u, chosen)
        })
        .collect();
    Ok(NeighborIndex {
        config: *config,
        lists: lists.into_iter().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FutureEntry {
    pub item: ItemId,
    pub timestamp: i64,
    pub click: bool,
    pub source: UserId,
}

/// Neighbor interactions at or after the owner's query time.
#[derive(Debug, Clone, PartialEq)]
pub struct FutureSequence {
    pub user: UserId,
    pub query_time: i64,
    pub entries: Vec<FutureEntry>,
    pub cap: usize,
}

pub const DEFAULT_FUTURE_CAP: usize = 100;

pub fn extract_future_sequence(
    user: UserId,
    index: &NeighborIndex,
    log: &InteractionLog,
    cap: usize,
) -> Result<FutureSequence> {
    let neighbors = index
        .neighbors(user)
        .ok_or_else(|| Error::Data(format!("user {user} is not in the neighbor index")))?;
    let history = log
        .history(user)
        .ok_or_else(|| Error::Data(format!("user {user} is not in the log")))?;
    let query_time = query_time(history, index.config.query_items)
        .ok_or_else(|| Error::Data(format!("user {user} has no interactions")))?;
    let mut tagged = Vec::new();
    for (rank, n) in neighbors.iter().enumerate() {
        let Some(nh) = log.history(n.user) else {
            continue;
        };
        let start = nh
            .interactions
            .partition_point(|x| x.timestamp < query_time);
        for x in nh.interactions[start..].iter().take(cap) {
            tagged.push((
                rank,
                FutureEntry {
                    item: x.item,
                    timestamp: x.timestamp,
                    click: x.click,
                    source: n.user,
                },
            ));
        }
    }
    tagged.sort_by_key(|(rank, e)| (e.timestamp, *rank));
    Ok(FutureSequence {
        user,
        query_time,
        entries: tagged.into_iter().map(|(_, e)| e).collect(),
        cap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interaction::{read_log, LogFormat};

    fn log_from(text: &str) -> InteractionLog {
        read_log(text.as_bytes(), LogFormat::default()).unwrap()
    }

    fn levels(v: &[(u32, f64)]) -> Vec<(ItemId, f64)> {
        v.iter().map(|&(i, l)| (ItemId(i), l)).collect()
    }

    #[test]
    fn perfect_correlation() {
        let a = levels(&[(1, 1.0), (2, 0.0), (3, 1.0)]);
        let s = pcc_from_levels(&a, &a);
        assert_eq!(s.raw, Some(1.0));
        assert_eq!(s.mapped(), Some(1.0));
        assert_eq!(s.common_items, 3);
    }

    #[test]
    fn perfect_anti_correlation() {
        let a = levels(&[(1, 1.0), (2, 0.0)]);
        let b = levels(&[(1, 0.0), (2, 1.0)]);
        let s = pcc_from_levels(&a, &b);
        assert!((s.raw.unwrap() + 1.0).abs() < 1e-12);
        assert!(s.mapped().unwrap().abs() < 1e-12);
    }

    #[test]
    fn three_item_hand_value() {
        // mean 2/3 on both sides; deviations (1,-2,1)/3 and (1,1,-2)/3
        let a = levels(&[(1, 1.0), (2, 0.0), (3, 1.0)]);
        let b = levels(&[(1, 1.0), (2, 1.0), (3, 0.0)]);
        let s = pcc_from_levels(&a, &b);
        assert!((s.raw.unwrap() + 0.5).abs() < 1e-15);
        assert!((s.mapped().unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn undefined_cases() {
        let a = levels(&[(1, 1.0), (2, 1.0)]);
        let b = levels(&[(1, 1.0), (2, 0.0)]);
        assert!(!pcc_from_levels(&a, &b).is_defined());
        let c = levels(&[(7, 1.0), (8, 0.0)]);
        let s = pcc_from_levels(&b, &c);
        assert!(!s.is_defined());
        assert_eq!(s.common_items, 0);
    }

    #[test]
    fn single_common_item_scores_plus_minus_one() {
        let a = levels(&[(1, 1.0), (2, 0.0)]);
        let b = levels(&[(1, 1.0), (3, 0.0), (4, 0.0)]);
        let s = pcc_from_levels(&a, &b);
        assert_eq!(s.common_items, 1);
        assert_eq!(s.raw, Some(1.0));
        let c = levels(&[(1, 0.0), (5, 1.0)]);
        assert_eq!(pcc_from_levels(&a, &c).raw, Some(-1.0));
    }

    #[test]
    fn overlap_similarity_value() {
        let a = levels(&[(1, 1.0), (2, 0.0), (3, 1.0), (4, 1.0)]);
        let b = levels(&[(1, 0.0), (4, 1.0)]);
        let s = overlap_from_levels(&a, &b);
        let expect = 2.0 / (8.0f64).sqrt();
        assert!((s.mapped().unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn single_user_has_no_neighbors() {
        let idx = build_neighbor_index(&log_from("1,1,1,1\n1,2,2,0\n"), &NetworkConfig::default())
            .unwrap();
        assert_eq!(idx.neighbors(UserId(1)), Some(&[][..]));
    }

    #[test]
    fn zero_candidate_cap_empties_lists() {
        let log = log_from("1,1,1,1\n1,2,2,0\n2,1,1,1\n2,2,3,0\n");
        let cfg = NetworkConfig {
            candidate_cap: 0,
            max_neighbors: 0,
            ..NetworkConfig::default()
        };
        let idx = build_neighbor_index(&log, &cfg).unwrap();
        assert!(idx.lists().values().all(Vec::is_empty));
    }

    #[test]
    fn empty_log_and_bad_config_error() {
        assert!(
            build_neighbor_index(&InteractionLog::default(), &NetworkConfig::default()).is_err()
        );
        let log = log_from("1,1,1,1\n");
        for cfg in [
            NetworkConfig {
                query_items: 0,
                ..Default::default()
            },
            NetworkConfig {
                threshold: 1.0,
                ..Default::default()
            },
            NetworkConfig {
                candidate_cap: 3,
                max_neighbors: 4,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                build_neighbor_index(&log, &cfg),
                Err(Error::InvalidArgument(_))
            ));
        }
    }

    fn n(user: u32, mapped: f64, common: usize) -> Neighbor {
        Neighbor {
            user: UserId(user),
            raw: 2.0 * mapped - 1.0,
            mapped,
            common_items: common,
        }
    }

    #[test]
    fn quota_evicts_excess_single_item_neighbors() {
        let ranked = vec![
            n(1, 0.9, 1),
            n(2, 0.9, 1),
            n(3, 0.8, 2),
            n(4, 0.8, 3),
            n(5, 0.7, 2),
            n(6, 0.7, 4),
            n(7, 0.6, 2),
        ];
        let out = select_neighbors(&ranked, 5, 1);
        let ids: Vec<u32> = out.iter().map(|x| x.user.0).collect();
        assert_eq!(ids, vec![1, 3, 4, 5, 6]);
    }

    #[test]
    fn quota_applies_to_short_lists() {
        let ranked = vec![n(1, 0.9, 1), n(2, 0.8, 2), n(3, 0.7, 2)];
        let out = select_neighbors(&ranked, 20, 4);
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|x| x.common_items > 1));
    }

    #[test]
    fn future_sequence_filters_and_merges() {
        // user 1 queries item 5 at t=50; neighbors 2 and 3 share it
        let log = log_from(
            "1,1,10,1\n1,2,20,0\n1,5,50,1\n\
             2,1,5,1\n2,5,50,1\n2,7,60,0\n2,8,80,1\n2,9,40,0\n\
             3,1,11,1\n3,5,55,1\n3,6,60,1\n3,4,70,0\n3,2,30,0\n",
        );
        let idx = NeighborIndex::from_lists(
            NetworkConfig::default(),
            BTreeMap::from([(UserId(1), vec![n(3, 0.9, 2), n(2, 0.8, 2)])]),
        );
        let f = extract_future_sequence(UserId(1), &idx, &log, 100).unwrap();
        assert_eq!(f.query_time, 50);
        let got: Vec<(i64, u32)> = f
            .entries
            .iter()
            .map(|e| (e.timestamp, e.source.0))
            .collect();
        assert_eq!(
            got,
            vec![(50, 2), (55, 3), (60, 3), (60, 2), (70, 3), (80, 2)]
        );

        let capped = extract_future_sequence(UserId(1), &idx, &log, 1).unwrap();
        let got: Vec<(i64, u32)> = capped
            .entries
            .iter()
            .map(|e| (e.timestamp, e.source.0))
            .collect();
        assert_eq!(got, vec![(50, 2), (55, 3)]);
    }

    #[test]
    fn future_sequence_edge_cases() {
        let log = log_from("1,1,100,1\n2,1,10,1\n2,3,20,0\n");
        let idx = NeighborIndex::from_lists(
            NetworkConfig::default(),
            BTreeMap::from([(UserId(1), vec![n(2, 0.9, 1)]), (UserId(2), vec![])]),
        );
        assert!(extract_future_sequence(UserId(1), &idx, &log, 100)
            .unwrap()
            .entries
            .is_empty());
        assert!(extract_future_sequence(UserId(2), &idx, &log, 100)
            .unwrap()
            .entries
            .is_empty());
        assert!(extract_future_sequence(UserId(9), &idx, &log, 100).is_err());
    }

    #[test]
    fn index_file_round_trip() {
        let log = log_from(
            "1,1,1,1\n1,2,2,0\n1,3,3,1\n2,1,1,1\n2,2,2,0\n2,3,4,1\n3,3,9,0\n3,1,1,1\n4,9,1,1\n",
        );
        let idx = build_neighbor_index(&log, &NetworkConfig::default()).unwrap();
        let mut buf = Vec::new();
        idx.write_to(&mut buf).unwrap();
        let back = NeighborIndex::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, idx);
        assert!(back.neighbors(UserId(4)).is_some());
    }

    #[test]
    fn index_version_mismatch() {
        let text = "dmr-neighbor-index 7\n";
        assert!(matches!(
            NeighborIndex::read_from(text.as_bytes()),
            Err(Error::VersionMismatch {
                expected: 1,
                found: 7
            })
        ));
    }
}
