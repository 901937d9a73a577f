//! Interaction logs, preprocessing, chronological splits and example enumeration.

mod synth;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use synth::{synth_sequences, SynthConfig, Transitions};

use crate::error::{Error, Result};

/// Maximum number of most-recent items kept in a prefix.
pub const DEFAULT_N_MAX: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub rating: f64,
    /// Seconds since the epoch.
    pub timestamp: i64,
}

/// Raw events, deduplicated on `(user, item, timestamp)`, in input order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InteractionLog {
    pub events: Vec<Interaction>,
}

impl InteractionLog {
    pub fn new(events: Vec<Interaction>) -> Self {
        let mut seen = HashSet::new();
        let events = events
            .into_iter()
            .filter(|e| seen.insert((e.user.clone(), e.item.clone(), e.timestamp)))
            .collect();
        Self { events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Writes `user \t item \t rating \t timestamp` lines.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.events {
            writeln!(out, "{}\t{}\t{}\t{}", e.user, e.item, e.rating, e.timestamp)?;
        }
        Ok(())
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_tsv(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Timestamp at quantile `q` of all events (nearest rank).
    pub fn timestamp_quantile(&self, q: f64) -> Option<i64> {
        let mut ts: Vec<i64> = self.events.iter().map(|e| e.timestamp).collect();
        if ts.is_empty() {
            return None;
        }
        ts.sort_unstable();
        let idx = ((q.clamp(0.0, 1.0) * ts.len() as f64).ceil() as usize).clamp(1, ts.len()) - 1;
        Some(ts[idx])
    }
}

/// Parses tab-separated `user, item, rating, timestamp` lines.
pub fn parse_interactions(text: &str) -> Result<InteractionLog> {
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let rating: f64 = fields[2].trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("rating `{}` is not a number", fields[2]),
        })?;
        if !rating.is_finite() {
            return Err(Error::Parse {
                line: lineno,
                message: format!("rating `{}` is not finite", fields[2]),
            });
        }
        let timestamp: i64 = fields[3].trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("timestamp `{}` is not an integer", fields[3]),
        })?;
        events.push(Interaction {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            rating,
            timestamp,
        });
    }
    if events.is_empty() {
        return Err(Error::EmptyLog);
    }
    Ok(InteractionLog::new(events))
}

pub fn load_interactions(path: &Path) -> Result<InteractionLog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text)
}

/// Keeps events with `rating > min_rating`, then removes users and items with
/// fewer than `k_core` events until nothing changes.
pub fn preprocess(log: &InteractionLog, min_rating: f64, k_core: usize) -> InteractionLog {
    let mut events: Vec<Interaction> = log.events.iter().filter(|e| e.rating > min_rating).cloned().collect();
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for e in &events {
            *users.entry(&e.user).or_default() += 1;
            *items.entry(&e.item).or_default() += 1;
        }
        let keep: Vec<bool> = events
            .iter()
            .map(|e| users[e.user.as_str()] >= k_core && items[e.item.as_str()] >= k_core)
            .collect();
        if keep.iter().all(|&k| k) {
            break;
        }
        let mut it = keep.into_iter();
        events.retain(|_| it.next().unwrap());
    }
    InteractionLog { events }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One next-item prediction: the most recent items before `target`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub user: usize,
    pub prefix: Vec<usize>,
    pub target: usize,
    pub split: Split,
}

/// Per-user chronological item sequences with split boundaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceDataset {
    /// Dense user index to original id, sorted by id.
    pub users: Vec<String>,
    /// Dense item index to original id, sorted by id.
    pub items: Vec<String>,
    pub sequences: Vec<Vec<usize>>,
    /// `(train_end, valid_end)`: positions before `train_end` fall in the
    /// training window, positions before `valid_end` in training or validation.
    pub split_marks: Vec<(usize, usize)>,
    pub n_max: usize,
    #[serde(skip)]
    examples: Vec<Example>,
}

impl SequenceDataset {
    pub fn new(
        users: Vec<String>,
        items: Vec<String>,
        sequences: Vec<Vec<usize>>,
        split_marks: Vec<(usize, usize)>,
        n_max: usize,
    ) -> Result<Self> {
        if n_max == 0 {
            return Err(Error::arg("n_max must be at least 1"));
        }
        if sequences.len() != users.len() || split_marks.len() != users.len() {
            return Err(Error::Data("users, sequences and split marks disagree in length".into()));
        }
        for (seq, &(a, b)) in sequences.iter().zip(&split_marks) {
            if a > b || b > seq.len() {
                return Err(Error::Data(format!("split marks ({a}, {b}) invalid for length {}", seq.len())));
            }
            if let Some(&bad) = seq.iter().find(|&&i| i >= items.len()) {
                return Err(Error::Index {
                    index: bad,
                    catalog: items.len(),
                });
            }
        }
        let mut ds = Self {
            users,
            items,
            sequences,
            split_marks,
            n_max,
            examples: Vec::new(),
        };
        ds.enumerate_examples();
        Ok(ds)
    }

    fn enumerate_examples(&mut self) {
        let mut examples = Vec::new();
        for (u, seq) in self.sequences.iter().enumerate() {
            for t in 1..seq.len() {
                let start = t.saturating_sub(self.n_max);
                examples.push(Example {
                    user: u,
                    prefix: seq[start..t].to_vec(),
                    target: seq[t],
                    split: self.split_of(u, t),
                });
            }
        }
        self.examples = examples;
    }

    /// Split of the event at `position` in user `u`'s sequence.
    pub fn split_of(&self, u: usize, position: usize) -> Split {
        let (train_end, valid_end) = self.split_marks[u];
        if position < train_end {
            Split::Train
        } else if position < valid_end {
            Split::Valid
        } else {
            Split::Test
        }
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.users.binary_search_by(|u| u.as_str().cmp(id)).ok()
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.items.binary_search_by(|i| i.as_str().cmp(id)).ok()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn examples_in(&self, split: Split) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    /// Interactions per item inside the training window.
    pub fn train_item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_items()];
        for (seq, &(train_end, _)) in self.sequences.iter().zip(&self.split_marks) {
            for &i in &seq[..train_end] {
                counts[i] += 1;
            }
        }
        counts
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: SequenceDataset = serde_json::from_str(&text)?;
        Self::new(raw.users, raw.items, raw.sequences, raw.split_marks, raw.n_max)
    }
}

/// Orders each user's events by time and tags every next-item target by the
/// window its timestamp falls in: `< t1` train, `[t1, t2)` valid, `>= t2` test.
pub fn chronological_split(log: &InteractionLog, t1: i64, t2: i64, n_max: usize) -> Result<SequenceDataset> {
    if t1 >= t2 {
        return Err(Error::arg(format!("split thresholds must satisfy t1 < t2, got {t1} >= {t2}")));
    }
    let mut by_user: BTreeMap<&str, Vec<&Interaction>> = BTreeMap::new();
    let mut item_ids: Vec<&str> = Vec::new();
    for e in &log.events {
        by_user.entry(&e.user).or_default().push(e);
        item_ids.push(&e.item);
    }
    item_ids.sort_unstable();
    item_ids.dedup();
    let item_of: HashMap<&str, usize> = item_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut users = Vec::with_capacity(by_user.len());
    let mut sequences = Vec::with_capacity(by_user.len());
    let mut marks = Vec::with_capacity(by_user.len());
    for (user, mut events) in by_user {
        events.sort_by_key(|e| e.timestamp);
        let train_end = events.iter().filter(|e| e.timestamp < t1).count();
        let valid_end = events.iter().filter(|e| e.timestamp < t2).count();
        users.push(user.to_string());
        sequences.push(events.iter().map(|e| item_of[e.item.as_str()]).collect());
        marks.push((train_end, valid_end));
    }
    let items = item_ids.into_iter().map(String::from).collect();
    SequenceDataset::new(users, items, sequences, marks, n_max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    /// Users by full sequence length.
    UserByLength,
    /// Items by number of training interactions.
    ItemByPopularity,
}

impl std::str::FromStr for GroupKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "user" | "user_by_length" => Ok(GroupKind::UserByLength),
            "item" | "item_by_popularity" => Ok(GroupKind::ItemByPopularity),
            other => Err(Error::Config(format!("unknown group kind `{other}`"))),
        }
    }
}

/// Equal-sized partition of users or items, group 0 holding the smallest statistic.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub kind: GroupKind,
    pub group_of: Vec<usize>,
    pub groups: usize,
}

impl GroupAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.groups];
        for &g in &self.group_of {
            sizes[g] += 1;
        }
        sizes
    }

    /// Group of the entity an example is attributed to: its user, or its target item.
    pub fn group_of_example(&self, ex: &Example) -> Option<usize> {
        let entity = match self.kind {
            GroupKind::UserByLength => ex.user,
            GroupKind::ItemByPopularity => ex.target,
        };
        self.group_of.get(entity).copied()
    }
}

/// Sorts entities by their statistic (ties by index) and cuts the order into
/// `groups` contiguous blocks; the first `n % groups` blocks get one extra.
pub fn partition_by_statistic(stats: &[usize], groups: usize) -> Result<Vec<usize>> {
    if groups == 0 {
        return Err(Error::arg("group count must be at least 1"));
    }
    if stats.len() < groups {
        return Err(Error::arg(format!("{} entities cannot fill {groups} groups", stats.len())));
    }
    let mut order: Vec<usize> = (0..stats.len()).collect();
    order.sort_by_key(|&i| (stats[i], i));
    let base = stats.len() / groups;
    let rem = stats.len() % groups;
    let mut group_of = vec![0; stats.len()];
    let mut pos = 0;
    for g in 0..groups {
        let size = base + usize::from(g < rem);
        for &entity in &order[pos..pos + size] {
            group_of[entity] = g;
        }
        pos += size;
    }
    Ok(group_of)
}

pub fn assign_groups(ds: &SequenceDataset, kind: GroupKind, groups: usize) -> Result<GroupAssignment> {
    let stats: Vec<usize> = match kind {
        GroupKind::UserByLength => ds.sequences.iter().map(Vec::len).collect(),
        GroupKind::ItemByPopularity => ds.train_item_counts(),
    };
    Ok(GroupAssignment {
        kind,
        group_of: partition_by_statistic(&stats, groups)?,
        groups,
    })
}
