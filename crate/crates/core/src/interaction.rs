//! Interaction records, log ingestion and the chronological train/test split.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UserId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ItemId(pub u32);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl ItemId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    /// Seconds since epoch, never negative.
    pub timestamp: i64,
    pub click: bool,
    pub category: Option<u32>,
}

impl Interaction {
    fn order_key(&self) -> (i64, ItemId) {
        (self.timestamp, self.item)
    }
}

/// One user's interactions in chronological order, with the clicked and
/// non-clicked subsequences as index lists into `interactions`.
#[derive(Debug, Clone, PartialEq)]
pub struct UserHistory {
    pub user: UserId,
    pub interactions: Vec<Interaction>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl UserHistory {
    /// Sorts by (timestamp, item) and derives the click partition.
    pub fn new(user: UserId, mut interactions: Vec<Interaction>) -> Self {
        interactions.sort_by_key(Interaction::order_key);
        let (positives, negatives) = (0..interactions.len()).partition(|&i| interactions[i].click);
        Self {
            user,
            interactions,
            positives,
            negatives,
        }
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn positive_interactions(&self) -> impl Iterator<Item = &Interaction> {
        self.positives.iter().map(|&i| &self.interactions[i])
    }

    pub fn negative_interactions(&self) -> impl Iterator<Item = &Interaction> {
        self.negatives.iter().map(|&i| &self.interactions[i])
    }

    pub fn last_timestamp(&self) -> Option<i64> {
        self.interactions.last().map(|x| x.timestamp)
    }

    /// Click level per distinct item (1.0 clicked, 0.0 not), sorted by item.
    /// Repeated interactions with one item keep the most recent click.
    pub fn click_levels(&self) -> Vec<(ItemId, f64)> {
        let mut levels: BTreeMap<ItemId, f64> = BTreeMap::new();
        for x in &self.interactions {
            levels.insert(x.item, if x.click { 1.0 } else { 0.0 });
        }
        levels.into_iter().collect()
    }
}

/// An immutable, validated interaction log keyed by user.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InteractionLog {
    histories: BTreeMap<UserId, UserHistory>,
    categories: BTreeMap<ItemId, u32>,
    items: BTreeSet<ItemId>,
    len: usize,
}

impl InteractionLog {
    /// Builds a log, rejecting negative timestamps, duplicate
    /// (user, item, timestamp) triples and conflicting item categories.
    pub fn from_interactions(interactions: impl IntoIterator<Item = Interaction>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut per_user: BTreeMap<UserId, Vec<Interaction>> = BTreeMap::new();
        let mut categories = BTreeMap::new();
        let mut items = BTreeSet::new();
        let mut len = 0;
        for x in interactions {
            if x.timestamp < 0 {
                return Err(Error::Data(format!(
                    "negative timestamp {} for user {} item {}",
                    x.timestamp, x.user, x.item
                )));
            }
            if !seen.insert((x.user, x.item, x.timestamp)) {
                return Err(Error::Data(format!(
                    "duplicate interaction (user {}, item {}, timestamp {})",
                    x.user, x.item, x.timestamp
                )));
            }
            if let Some(c) = x.category {
                if let Some(prev) = categories.insert(x.item, c) {
                    if prev != c {
                        return Err(Error::Data(format!(
                            "item {} has conflicting categories {} and {}",
                            x.item, prev, c
                        )));
                    }
                }
            }
            items.insert(x.item);
            per_user.entry(x.user).or_default().push(x);
            len += 1;
        }
        let histories = per_user
            .into_iter()
            .map(|(u, xs)| (u, UserHistory::new(u, xs)))
            .collect();
        Ok(Self {
            histories,
            categories,
            items,
            len,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_users(&self) -> usize {
        self.histories.len()
    }

    /// Number of distinct items that occur in the log.
    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    /// Size of an id-indexed table covering every item in the log.
    pub fn item_table_size(&self) -> usize {
        self.items.iter().next_back().map_or(0, |i| i.index() + 1)
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.items.iter().copied()
    }

    pub fn contains_item(&self, item: ItemId) -> bool {
        self.items.contains(&item)
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.histories.keys().copied()
    }

    pub fn history(&self, user: UserId) -> Option<&UserHistory> {
        self.histories.get(&user)
    }

    pub fn histories(&self) -> impl Iterator<Item = &UserHistory> {
        self.histories.values()
    }

    pub fn category(&self, item: ItemId) -> Option<u32> {
        self.categories.get(&item).copied()
    }

    pub fn categories(&self) -> &BTreeMap<ItemId, u32> {
        &self.categories
    }

    /// All interactions in canonical order: user, then timestamp, then item.
    pub fn iter(&self) -> impl Iterator<Item = &Interaction> {
        self.histories.values().flat_map(|h| h.interactions.iter())
    }

    /// Time span `max - min` over all timestamps, 0 for an empty log.
    pub fn time_span(&self) -> i64 {
        let mut lo = i64::MAX;
        let mut hi = i64::MIN;
        for x in self.iter() {
            lo = lo.min(x.timestamp);
            hi = hi.max(x.timestamp);
        }
        if lo > hi {
            0
        } else {
            hi - lo
        }
    }

    /// Writes the canonical text form (with header).
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "user,item,timestamp,click,category")?;
        for x in self.iter() {
            let cat = x.category.map(|c| c.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{}",
                x.user,
                x.item,
                x.timestamp,
                u8::from(x.click),
                cat
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogFormat {
    pub delimiter: char,
}

impl Default for LogFormat {
    fn default() -> Self {
        Self { delimiter: ',' }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// Result of a full validation pass over a log file.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub violations: Vec<Violation>,
}

struct Parsed {
    records: Vec<Interaction>,
    violations: Vec<Violation>,
}

fn parse_record(fields: &[&str]) -> std::result::Result<Interaction, String> {
    if fields.len() != 4 && fields.len() != 5 {
        return Err(format!("expected 4 or 5 fields, found {}", fields.len()));
    }
    let user = fields[0]
        .trim()
        .parse::<u32>()
        .map_err(|_| format!("bad user id {:?}", fields[0]))?;
    let item = fields[1]
        .trim()
        .parse::<u32>()
        .map_err(|_| format!("bad item id {:?}", fields[1]))?;
    let timestamp = fields[2]
        .trim()
        .parse::<i64>()
        .map_err(|_| format!("bad timestamp {:?}", fields[2]))?;
    if timestamp < 0 {
        return Err(format!("negative timestamp {timestamp}"));
    }
    let click = match fields[3].trim() {
        "1" | "true" => true,
        "0" | "false" => false,
        other => return Err(format!("bad click flag {other:?}")),
    };
    let category = match fields.get(4).map(|s| s.trim()) {
        None | Some("") => None,
        Some(s) => Some(
            s.parse::<u32>()
                .map_err(|_| format!("bad category {s:?}"))?,
        ),
    };
    Ok(Interaction {
        user: UserId(user),
        item: ItemId(item),
        timestamp,
        click,
        category,
    })
}

fn parse<R: BufRead>(reader: R, format: LogFormat) -> std::io::Result<Parsed> {
    let mut records = Vec::new();
    let mut violations = Vec::new();
    let mut seen: HashMap<(UserId, ItemId, i64), usize> = HashMap::new();
    let mut categories: HashMap<ItemId, (u32, usize)> = HashMap::new();
    let mut first_content = true;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(format.delimiter).collect();
        if first_content {
            first_content = false;
            if fields[0].trim().parse::<u32>().is_err() {
                continue;
            }
        }
        let rec = match parse_record(&fields) {
            Ok(r) => r,
            Err(message) => {
                violations.push(Violation {
                    line: lineno,
                    message,
                });
                continue;
            }
        };
        if let Some(prev) = seen.insert((rec.user, rec.item, rec.timestamp), lineno) {
            violations.push(Violation {
                line: lineno,
                message: format!(
                    "duplicate (user {}, item {}, timestamp {}) first seen on line {}",
                    rec.user, rec.item, rec.timestamp, prev
                ),
            });
            continue;
        }
        if let Some(c) = rec.category {
            match categories.get(&rec.item) {
                Some(&(prev, prev_line)) if prev != c => {
                    violations.push(Violation {
                        line: lineno,
                        message: format!(
                            "item {} has category {} but line {} gave {}",
                            rec.item, c, prev_line, prev
                        ),
                    });
                    continue;
                }
                Some(_) => {}
                None => {
                    categories.insert(rec.item, (c, lineno));
                }
            }
        }
        records.push(rec);
    }
    Ok(Parsed {
        records,
        violations,
    })
}

/// Parses a log from any reader; the first violation aborts ingestion.
pub fn read_log<R: BufRead>(reader: R, format: LogFormat) -> Result<InteractionLog> {
    let parsed = parse(reader, format).map_err(|e| Error::io("<reader>", e))?;
    if let Some(v) = parsed.violations.into_iter().next() {
        return Err(Error::Record {
            line: v.line,
            message: v.message,
        });
    }
    InteractionLog::from_interactions(parsed.records)
}

pub fn ingest_log(path: &Path, format: LogFormat) -> Result<InteractionLog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_log(BufReader::new(file), format).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Scans the whole input and reports counts plus every violation found.
pub fn validate_log<R: BufRead>(reader: R, format: LogFormat) -> std::io::Result<ValidationReport> {
    let parsed = parse(reader, format)?;
    let users: BTreeSet<_> = parsed.records.iter().map(|x| x.user).collect();
    let items: BTreeSet<_> = parsed.records.iter().map(|x| x.item).collect();
    Ok(ValidationReport {
        users: users.len(),
        items: items.len(),
        interactions: parsed.records.len(),
        violations: parsed.violations,
    })
}

/// Per-user chronological partition of a log.
#[derive(Debug, Clone, PartialEq)]
pub struct ChronoSplit {
    pub train: InteractionLog,
    pub test: InteractionLog,
    pub fraction: f64,
    pub dropped_users: usize,
    pub dropped_interactions: usize,
}

impl ChronoSplit {
    /// Earliest test timestamp of a user: nothing at or after it may be
    /// used for that user's training.
    pub fn boundary(&self, user: UserId) -> Option<i64> {
        self.test
            .history(user)
            .and_then(|h| h.interactions.first())
            .map(|x| x.timestamp)
    }
}

/// Number of training interactions for a history of length `n`.
pub fn train_len(n: usize, fraction: f64) -> usize {
    // the slack keeps products like 0.7 * 10 from rounding up past an integer
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

pub fn chrono_split(log: &InteractionLog, fraction: f64) -> Result<ChronoSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut dropped_users = 0;
    let mut dropped_interactions = 0;
    for h in log.histories() {
        let n = h.len();
        let cut = train_len(n, fraction);
        if n < 2 || cut == 0 || cut >= n {
            dropped_users += 1;
            dropped_interactions += n;
            continue;
        }
        train.extend_from_slice(&h.interactions[..cut]);
        test.extend_from_slice(&h.interactions[cut..]);
    }
    Ok(ChronoSplit {
        train: InteractionLog::from_interactions(train)?,
        test: InteractionLog::from_interactions(test)?,
        fraction,
        dropped_users,
        dropped_interactions,
    })
}
