//! MovieLens log loading, chronological splitting and popularity grouping.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub user_id: usize,
    pub item_id: usize,
    pub rating: f64,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    /// `user<TAB>item<TAB>rating<TAB>timestamp` (ML-100K `u.data`).
    Tsv100k,
    /// `user::item::rating::timestamp` (ML-1M `ratings.dat`).
    DoubleColon1m,
}

impl FromStr for LogFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv-100k" => Ok(LogFormat::Tsv100k),
            "dcolon-1m" => Ok(LogFormat::DoubleColon1m),
            other => Err(Error::Config(format!("unknown log format `{other}`"))),
        }
    }
}

/// Raw-id to dense-id table, sorted by raw id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    raw: Vec<u64>,
}

impl IdMap {
    fn from_raw(mut raw: Vec<u64>) -> Self {
        raw.sort_unstable();
        raw.dedup();
        IdMap { raw }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn dense(&self, raw: u64) -> Option<usize> {
        self.raw.binary_search(&raw).ok()
    }

    pub fn raw(&self, dense: usize) -> Option<u64> {
        self.raw.get(dense).copied()
    }

    /// Writes `raw_id,dense_id` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("raw_id,dense_id\n");
        for (dense, raw) in self.raw.iter().enumerate() {
            out.push_str(&format!("{raw},{dense}\n"));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct InteractionLog {
    pub interactions: Vec<Interaction>,
    pub users: IdMap,
    pub items: IdMap,
}

impl InteractionLog {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    /// Fraction of the user-item matrix that is observed.
    pub fn density(&self) -> f64 {
        self.interactions.len() as f64 / (self.n_users() as f64 * self.n_items() as f64)
    }

    /// Builds a log from already-dense ids; used by the synthetic generator.
    pub fn from_dense(interactions: Vec<Interaction>, n_users: usize, n_items: usize) -> Self {
        InteractionLog {
            interactions,
            users: IdMap {
                raw: (0..n_users as u64).collect(),
            },
            items: IdMap {
                raw: (0..n_items as u64).collect(),
            },
        }
    }
}

pub fn load_movielens(path: &Path, format: LogFormat) -> Result<InteractionLog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_movielens(&text, format, path)
}

/// Parses log text; `origin` only labels errors.
pub fn parse_movielens(text: &str, format: LogFormat, origin: &Path) -> Result<InteractionLog> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = match format {
            LogFormat::Tsv100k => line.split('\t').collect(),
            LogFormat::DoubleColon1m => line.split("::").collect(),
        };
        let bad = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        }
        let user: u64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad user id `{}`", fields[0])))?;
        let item: u64 = fields[1]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad item id `{}`", fields[1])))?;
        let rating: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad rating `{}`", fields[2])))?;
        let timestamp: u64 = fields[3]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad timestamp `{}`", fields[3])))?;
        rows.push((user, item, rating, timestamp));
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset(origin.to_path_buf()));
    }

    let users = IdMap::from_raw(rows.iter().map(|r| r.0).collect());
    let items = IdMap::from_raw(rows.iter().map(|r| r.1).collect());
    let interactions = rows
        .into_iter()
        .map(|(u, i, rating, timestamp)| Interaction {
            user_id: users.dense(u).expect("user in map"),
            item_id: items.dense(i).expect("item in map"),
            rating,
            timestamp,
        })
        .collect();
    Ok(InteractionLog {
        interactions,
        users,
        items,
    })
}

/// Per-user chronological train / validation / test partition.
///
/// Vectors are indexed by dense user id. Dropped users keep empty lists.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<Vec<Interaction>>,
    pub validation: Vec<Option<Interaction>>,
    pub test: Vec<Vec<Interaction>>,
    pub dropped: Vec<usize>,
    pub n_users: usize,
    pub n_items: usize,
}

impl SplitDataset {
    pub fn retained_users(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_users).filter(move |&u| !self.train[u].is_empty())
    }

    pub fn n_train_interactions(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }

    /// Items the user has interacted with before the test period.
    pub fn seen_items(&self, user: usize) -> Vec<usize> {
        let mut seen: Vec<usize> = self.train[user].iter().map(|x| x.item_id).collect();
        if let Some(v) = self.validation[user] {
            seen.push(v.item_id);
        }
        seen
    }
}

/// Splits each user's time-ordered log so that train+validation holds
/// `round(ratio * n)` events; the last of those becomes the validation event.
/// Users with fewer than `min_interactions` events are dropped.
pub fn chronological_split(
    log: &InteractionLog,
    ratio: f64,
    min_interactions: usize,
) -> Result<SplitDataset> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratio must lie in (0,1), got {ratio}"
        )));
    }
    let min_interactions = min_interactions.max(2);
    let n_users = log.n_users();
    let mut per_user: Vec<Vec<(usize, Interaction)>> = vec![Vec::new(); n_users];
    for (pos, x) in log.interactions.iter().enumerate() {
        per_user[x.user_id].push((pos, *x));
    }

    let mut split = SplitDataset {
        train: vec![Vec::new(); n_users],
        validation: vec![None; n_users],
        test: vec![Vec::new(); n_users],
        dropped: Vec::new(),
        n_users,
        n_items: log.n_items(),
    };
    for (user, mut events) in per_user.into_iter().enumerate() {
        let n = events.len();
        if n < min_interactions {
            split.dropped.push(user);
            continue;
        }
        // Equal timestamps keep file order.
        events.sort_by_key(|&(pos, x)| (x.timestamp, pos));
        let head = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
        let mut events: Vec<Interaction> = events.into_iter().map(|(_, x)| x).collect();
        let test = events.split_off(head);
        let validation = if events.len() >= 2 { events.pop() } else { None };
        split.train[user] = events;
        split.validation[user] = validation;
        split.test[user] = test;
    }
    if !split.dropped.is_empty() {
        log::info!(
            "dropped {} users with fewer than {min_interactions} interactions",
            split.dropped.len()
        );
    }
    Ok(split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    /// Popular items; the group whose exposure is budgeted.
    Popular,
    LongTail,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupAssignment {
    pub labels: Vec<Group>,
    pub exposure_count: Vec<u64>,
    pub quantile: f64,
}

impl GroupAssignment {
    /// Labels the top `ceil(quantile * n)` items by exposure as popular,
    /// breaking ties toward lower item ids.
    pub fn from_exposure(exposure_count: Vec<u64>, quantile: f64) -> Self {
        let n = exposure_count.len();
        let n_popular = popular_size(n, quantile);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| exposure_count[b].cmp(&exposure_count[a]).then(a.cmp(&b)));
        let mut labels = vec![Group::LongTail; n];
        for &item in &order[..n_popular] {
            labels[item] = Group::Popular;
        }
        GroupAssignment {
            labels,
            exposure_count,
            quantile,
        }
    }

    pub fn n_items(&self) -> usize {
        self.labels.len()
    }

    pub fn is_popular(&self, item: usize) -> bool {
        self.labels[item] == Group::Popular
    }

    pub fn group_sizes(&self) -> (usize, usize) {
        let popular = self.labels.iter().filter(|&&g| g == Group::Popular).count();
        (popular, self.labels.len() - popular)
    }

    pub fn popular_items(&self) -> Vec<usize> {
        (0..self.n_items()).filter(|&i| self.is_popular(i)).collect()
    }
}

pub fn popular_size(n_items: usize, quantile: f64) -> usize {
    ((quantile * n_items as f64) - 1e-9).ceil().max(0.0) as usize
}

pub fn initial_groups(split: &SplitDataset, quantile: f64) -> Result<GroupAssignment> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "group quantile must lie in (0,1), got {quantile}"
        )));
    }
    let mut counts = vec![0u64; split.n_items];
    for x in split.train.iter().flatten() {
        counts[x.item_id] += 1;
    }
    Ok(GroupAssignment::from_exposure(counts, quantile))
}

/// Short dataset summary in the layout of the usual statistics table.
pub fn summary(log: &InteractionLog) -> BTreeMap<&'static str, f64> {
    let n = log.interactions.len() as f64;
    let mut m = BTreeMap::new();
    m.insert("users", log.n_users() as f64);
    m.insert("items", log.n_items() as f64);
    m.insert("interactions", n);
    m.insert("actions_per_user", n / log.n_users() as f64);
    m.insert("actions_per_item", n / log.n_items() as f64);
    m.insert("density_percent", 100.0 * log.density());
    m
}

pub fn write_summary(log: &InteractionLog, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (k, v) in summary(log) {
        writeln!(f, "{k},{v}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
