//! Interaction logs, preprocessing into per-user sequences, leave-one-out
//! splits and item popularity.

mod bundle;
mod ingest;
pub mod synthetic;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bundle::{load_bundle, save_bundle, BUNDLE_FORMAT_VERSION};
pub use ingest::{ingest, parse_log, ColumnFormat};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("input contains no interactions")]
    EmptyInput,
    #[error("preprocessing removed every user")]
    EmptyDataset,
    #[error("user `{user}` has {len} interactions; leave-one-out needs at least 3")]
    SequenceTooShort { user: String, len: usize },
    #[error("min_count must be at least 1")]
    InvalidMinCount,
    #[error("dataset bundle: {0}")]
    Bundle(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: u64,
}

pub type InteractionLog = Vec<Interaction>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    /// Drop rare items, then recount and drop short users.
    #[default]
    TwoPass,
    /// Count items and users once on the raw log and drop both together.
    OnePass,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub min_count: usize,
    pub skip_filtering: bool,
    pub mode: FilterMode,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            min_count: 5,
            skip_filtering: false,
            mode: FilterMode::TwoPass,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub options: PreprocessOptions,
    pub warnings: Vec<String>,
}

/// Per-user item sequences over a dense item vocabulary.
///
/// Users and items are indexed in order of first appearance in the
/// grouped, time-ordered log. `popularity[i]` counts every occurrence of
/// item `i` in `sequences`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceDataset {
    pub items: Vec<String>,
    pub users: Vec<String>,
    pub sequences: Vec<Vec<usize>>,
    pub popularity: Vec<u64>,
    pub meta: DatasetMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub actions: usize,
    pub avg_length: f64,
    /// Fraction of the user x item matrix that is filled, in `[0, 1]`.
    pub density: f64,
}

impl SequenceDataset {
    /// Builds a dataset from already-indexed sequences (no filtering).
    pub fn from_sequences(num_items: usize, sequences: Vec<Vec<usize>>) -> Self {
        let mut popularity = vec![0; num_items];
        for s in &sequences {
            for &i in s {
                popularity[i] += 1;
            }
        }
        Self {
            items: (0..num_items).map(|i| format!("i{i}")).collect(),
            users: (0..sequences.len()).map(|u| format!("u{u}")).collect(),
            sequences,
            popularity,
            meta: DatasetMeta {
                options: PreprocessOptions {
                    skip_filtering: true,
                    ..Default::default()
                },
                warnings: Vec::new(),
            },
        }
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_actions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn stats(&self) -> DatasetStats {
        let actions = self.num_actions();
        let (users, items) = (self.num_users(), self.num_items());
        DatasetStats {
            users,
            items,
            actions,
            avg_length: actions as f64 / users.max(1) as f64,
            density: actions as f64 / (users.max(1) * items.max(1)) as f64,
        }
    }

    /// True when every item occurs and every user interacts at least
    /// `min_count` times.
    pub fn is_core(&self, min_count: usize) -> bool {
        self.popularity.iter().all(|&c| c as usize >= min_count) && self.sequences.iter().all(|s| s.len() >= min_count)
    }

    /// The dataset as a log whose timestamps are sequence positions.
    pub fn to_log(&self) -> InteractionLog {
        let mut log = Vec::with_capacity(self.num_actions());
        for (u, seq) in self.sequences.iter().enumerate() {
            for (t, &i) in seq.iter().enumerate() {
                log.push(Interaction {
                    user: self.users[u].clone(),
                    item: self.items[i].clone(),
                    timestamp: t as u64,
                });
            }
        }
        log
    }
}

/// Groups a log into time-ordered per-user sequences and applies the
/// minimum-occurrence filter.
///
/// Timestamp ties keep input order. Under [`FilterMode::TwoPass`] the
/// output is not guaranteed to satisfy the thresholds again (dropping
/// users can push items back below `min_count`); when that happens a
/// warning is logged and recorded in `meta.warnings`.
pub fn preprocess(log: &[Interaction], options: &PreprocessOptions) -> Result<SequenceDataset, DatasetError> {
    if options.min_count == 0 {
        return Err(DatasetError::InvalidMinCount);
    }
    if log.is_empty() {
        return Err(DatasetError::EmptyInput);
    }

    // Group by user in order of first appearance.
    let mut user_index: HashMap<&str, usize> = HashMap::new();
    let mut grouped: Vec<(&str, Vec<&Interaction>)> = Vec::new();
    for it in log {
        let u = *user_index.entry(it.user.as_str()).or_insert_with(|| {
            grouped.push((it.user.as_str(), Vec::new()));
            grouped.len() - 1
        });
        grouped[u].1.push(it);
    }
    for (_, events) in &mut grouped {
        events.sort_by_key(|e| e.timestamp);
    }

    let min = options.min_count;
    let kept: Vec<(&str, Vec<&str>)> = if options.skip_filtering {
        grouped
            .iter()
            .map(|(u, ev)| (*u, ev.iter().map(|e| e.item.as_str()).collect()))
            .collect()
    } else {
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for it in log {
            *item_counts.entry(it.item.as_str()).or_default() += 1;
        }
        match options.mode {
            FilterMode::TwoPass => grouped
                .iter()
                .map(|(u, ev)| {
                    let items: Vec<&str> = ev
                        .iter()
                        .map(|e| e.item.as_str())
                        .filter(|i| item_counts[i] >= min)
                        .collect();
                    (*u, items)
                })
                .filter(|(_, items)| items.len() >= min)
                .collect(),
            FilterMode::OnePass => grouped
                .iter()
                .filter(|(_, ev)| ev.len() >= min)
                .map(|(u, ev)| {
                    let items = ev
                        .iter()
                        .map(|e| e.item.as_str())
                        .filter(|i| item_counts[i] >= min)
                        .collect();
                    (*u, items)
                })
                .filter(|(_, items): &(&str, Vec<&str>)| !items.is_empty())
                .collect(),
        }
    };

    if kept.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }

    let mut item_index: HashMap<&str, usize> = HashMap::new();
    let mut items = Vec::new();
    let mut users = Vec::with_capacity(kept.len());
    let mut sequences = Vec::with_capacity(kept.len());
    for (u, seq) in &kept {
        users.push(u.to_string());
        sequences.push(
            seq.iter()
                .map(|i| {
                    *item_index.entry(i).or_insert_with(|| {
                        items.push(i.to_string());
                        items.len() - 1
                    })
                })
                .collect::<Vec<_>>(),
        );
    }
    let mut popularity = vec![0u64; items.len()];
    for s in &sequences {
        for &i in s {
            popularity[i] += 1;
        }
    }

    let mut ds = SequenceDataset {
        items,
        users,
        sequences,
        popularity,
        meta: DatasetMeta {
            options: options.clone(),
            warnings: Vec::new(),
        },
    };
    if !options.skip_filtering && !ds.is_core(min) {
        let rare_items = ds.popularity.iter().filter(|&&c| (c as usize) < min).count();
        let short_users = ds.sequences.iter().filter(|s| s.len() < min).count();
        let msg = format!(
            "filtered dataset is not a {min}-core ({rare_items} items and {short_users} users below threshold); \
             preprocessing it again would remove more"
        );
        log::warn!("{msg}");
        ds.meta.warnings.push(msg);
    }
    Ok(ds)
}

/// One validation or test case.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationInstance {
    pub user: usize,
    pub prefix: Vec<usize>,
    pub relevant: usize,
    seen: Vec<usize>,
}

impl EvaluationInstance {
    pub fn new(user: usize, prefix: Vec<usize>, relevant: usize) -> Self {
        let mut seen = prefix.clone();
        seen.sort_unstable();
        seen.dedup();
        Self {
            user,
            prefix,
            relevant,
            seen,
        }
    }

    /// Distinct prefix items, ascending.
    pub fn seen(&self) -> &[usize] {
        &self.seen
    }

    pub fn has_seen(&self, item: usize) -> bool {
        self.seen.binary_search(&item).is_ok()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaveOneOutSplit {
    /// `head(s, len - 2)` per user, in user order.
    pub train: Vec<Vec<usize>>,
    pub validation: Vec<EvaluationInstance>,
    pub test: Vec<EvaluationInstance>,
}

/// Last item is the test target, the one before it the validation target,
/// the rest is training data.
pub fn split(ds: &SequenceDataset) -> Result<LeaveOneOutSplit, DatasetError> {
    let mut out = LeaveOneOutSplit {
        train: Vec::with_capacity(ds.num_users()),
        validation: Vec::with_capacity(ds.num_users()),
        test: Vec::with_capacity(ds.num_users()),
    };
    for (u, s) in ds.sequences.iter().enumerate() {
        let l = s.len();
        if l < 3 {
            return Err(DatasetError::SequenceTooShort {
                user: ds.users[u].clone(),
                len: l,
            });
        }
        out.train.push(s[..l - 2].to_vec());
        out.validation
            .push(EvaluationInstance::new(u, s[..l - 2].to_vec(), s[l - 2]));
        out.test.push(EvaluationInstance::new(u, s[..l - 1].to_vec(), s[l - 1]));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PopularitySource {
    /// Training prefixes only; validation and test targets are not counted.
    #[default]
    TrainOnly,
    All,
}

/// Item occurrence counts over the chosen scope. For `TrainOnly`, users
/// with fewer than three interactions contribute nothing.
pub fn popularity_counts(ds: &SequenceDataset, source: PopularitySource) -> Vec<u64> {
    match source {
        PopularitySource::All => ds.popularity.clone(),
        PopularitySource::TrainOnly => {
            let mut counts = vec![0; ds.num_items()];
            for s in ds.sequences.iter().filter(|s| s.len() >= 3) {
                for &i in &s[..s.len() - 2] {
                    counts[i] += 1;
                }
            }
            counts
        }
    }
}
