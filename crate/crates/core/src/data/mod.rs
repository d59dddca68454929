//! Interaction logs, item metadata, feature files, splits and batching.

mod batch;
mod dataset;
mod hmft;
mod kcore;
mod split;
mod stats;
pub mod synth;

pub use batch::{make_batches, BatchOptions, SequenceBatch};
pub use dataset::{prepare, Dataset, FeatureMatrix, LoadOptions, RawInputs, UserSequence};
pub use hmft::FeatureTable;
pub use kcore::kcore_filter;
pub use split::{split_leave_one_out, Example, SplitOptions, Splits};
pub use stats::{bin_counts, time_histogram, DatasetStats};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const ITEMS_FILE: &str = "items.tsv";
pub const TXT_FEATURES_FILE: &str = "txt.hmft";
pub const IMG_FEATURES_FILE: &str = "img.hmft";
pub const STATS_FILE: &str = "stats.json";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Malformed { path: PathBuf, line: usize, reason: String },
    #[error("{path}:{line}: negative timestamp {value}")]
    NegativeTimestamp { path: PathBuf, line: usize, value: i64 },
    #[error("user `{user}` has {count} interactions; leave-one-out needs at least 3")]
    TooFewInteractions { user: String, count: usize },
    #[error("feature file {path}: {reason}")]
    Feature { path: PathBuf, reason: String },
    #[error("invalid synthesis config: {0}")]
    Synth(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

/// One event in a user's history.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Event {
    pub timestamp: i64,
    pub item: String,
}

/// Deduplicated interactions grouped per user, each group sorted by
/// `(timestamp, item)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InteractionLog {
    per_user: BTreeMap<String, Vec<Event>>,
}

impl InteractionLog {
    pub fn from_interactions(items: impl IntoIterator<Item = Interaction>) -> Self {
        let mut sets: BTreeMap<String, BTreeSet<Event>> = BTreeMap::new();
        for it in items {
            sets.entry(it.user).or_default().insert(Event { timestamp: it.timestamp, item: it.item });
        }
        Self { per_user: sets.into_iter().map(|(u, s)| (u, s.into_iter().collect())).collect() }
    }

    pub fn n_users(&self) -> usize {
        self.per_user.len()
    }

    pub fn n_actions(&self) -> usize {
        self.per_user.values().map(Vec::len).sum()
    }

    pub fn n_items(&self) -> usize {
        self.item_degrees().len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_user.is_empty()
    }

    pub fn users(&self) -> impl Iterator<Item = (&str, &[Event])> {
        self.per_user.iter().map(|(u, e)| (u.as_str(), e.as_slice()))
    }

    pub fn events(&self, user: &str) -> Option<&[Event]> {
        self.per_user.get(user).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = Interaction> + '_ {
        self.per_user.iter().flat_map(|(u, evs)| {
            evs.iter().map(move |e| Interaction { user: u.clone(), item: e.item.clone(), timestamp: e.timestamp })
        })
    }

    pub fn item_degrees(&self) -> BTreeMap<&str, usize> {
        let mut deg = BTreeMap::new();
        for e in self.per_user.values().flatten() {
            *deg.entry(e.item.as_str()).or_insert(0) += 1;
        }
        deg
    }

    pub fn timestamps(&self) -> impl Iterator<Item = i64> + '_ {
        self.per_user.values().flatten().map(|e| e.timestamp)
    }

    /// Keeps only the interactions for which `keep(user, item)` holds.
    pub fn retain(&mut self, mut keep: impl FnMut(&str, &str) -> bool) {
        for (u, evs) in self.per_user.iter_mut() {
            evs.retain(|e| keep(u, &e.item));
        }
        self.per_user.retain(|_, evs| !evs.is_empty());
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for it in self.iter() {
            let _ = writeln!(out, "{}\t{}\t{}", it.user, it.item, it.timestamp);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(io_err(path))
    }
}

/// Reads `user<TAB>item<TAB>timestamp` lines. Blank lines are skipped.
pub fn load_interactions(path: &Path) -> Result<InteractionLog> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_interactions(&text, path)
}

pub fn parse_interactions(text: &str, path: &Path) -> Result<InteractionLog> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| DataError::Malformed { path: path.to_path_buf(), line: line_no, reason };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(malformed(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(malformed("empty user or item id".into()));
        }
        let timestamp: i64 = fields[2]
            .trim()
            .parse()
            .map_err(|e| malformed(format!("bad timestamp `{}`: {e}", fields[2])))?;
        if timestamp < 0 {
            return Err(DataError::NegativeTimestamp { path: path.to_path_buf(), line: line_no, value: timestamp });
        }
        out.push(Interaction { user: fields[0].to_string(), item: fields[1].to_string(), timestamp });
    }
    Ok(InteractionLog::from_interactions(out))
}

/// `item_id<TAB>cat0,cat1,...` rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemMeta {
    pub item: String,
    pub categories: BTreeSet<usize>,
}

pub fn load_items(path: &Path) -> Result<Vec<ItemMeta>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_items(&text, path)
}

pub fn parse_items(text: &str, path: &Path) -> Result<Vec<ItemMeta>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let malformed =
            |reason: String| DataError::Malformed { path: path.to_path_buf(), line: i + 1, reason };
        let (item, cats) = match line.split_once('\t') {
            Some((item, cats)) => (item, cats),
            None => (line, ""),
        };
        if item.is_empty() {
            return Err(malformed("empty item id".into()));
        }
        let mut categories = BTreeSet::new();
        for c in cats.split(',').map(str::trim).filter(|c| !c.is_empty()) {
            categories.insert(c.parse().map_err(|e| malformed(format!("bad category `{c}`: {e}")))?);
        }
        out.push(ItemMeta { item: item.to_string(), categories });
    }
    Ok(out)
}

pub fn write_items(items: &[ItemMeta], path: &Path) -> Result<()> {
    let mut out = String::new();
    for m in items {
        let cats: Vec<String> = m.categories.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(out, "{}\t{}", m.item, cats.join(","));
    }
    std::fs::write(path, out).map_err(io_err(path))
}

#[cfg(test)]
mod tests;
