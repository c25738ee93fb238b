use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_for;

/// One positive user-item record with dense per-domain ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: Option<i64>,
}

/// Indices into [`InteractionDataset::interactions`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitOrder {
    Chronological,
    SeededShuffle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InteractionDataset {
    pub domain_name: String,
    pub num_users: usize,
    pub num_items: usize,
    pub interactions: Vec<Interaction>,
    pub splits: Splits,
    /// Original token of each dense user id.
    pub user_tokens: Vec<String>,
    /// Original token of each dense item id.
    pub item_tokens: Vec<String>,
    /// How the current splits were ordered; `None` until [`split_dataset`] ran.
    pub split_order: Option<SplitOrder>,
}

/// A parsed but not yet indexed TSV row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRecord {
    pub user: String,
    pub item: String,
    pub timestamp: Option<i64>,
    pub line: usize,
}

impl InteractionDataset {
    /// Builds a dataset from parsed rows: duplicates collapse to the earliest
    /// timestamp, then iterative `min_core` filtering, then dense re-indexing.
    /// All interactions start in the train split.
    pub fn from_records(
        domain_name: impl Into<String>,
        records: &[RawRecord],
        min_core: usize,
    ) -> Result<Self> {
        let domain_name = domain_name.into();
        if min_core == 0 {
            return Err(Error::Config("min_core must be at least 1".into()));
        }
        let mut dedup: BTreeMap<(&str, &str), Option<i64>> = BTreeMap::new();
        for r in records {
            dedup
                .entry((r.user.as_str(), r.item.as_str()))
                .and_modify(|ts| *ts = earliest(*ts, r.timestamp))
                .or_insert(r.timestamp);
        }
        let pairs: Vec<(&str, &str)> = dedup.keys().copied().collect();
        let kept = k_core_filter(&pairs, min_core);
        if kept.is_empty() {
            return Err(Error::Data(format!(
                "domain `{domain_name}` is empty after {min_core}-core filtering"
            )));
        }

        let user_tokens = sorted_tokens(kept.iter().map(|&k| pairs[k].0));
        let item_tokens = sorted_tokens(kept.iter().map(|&k| pairs[k].1));
        let user_index: HashMap<&str, usize> = user_tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();
        let item_index: HashMap<&str, usize> = item_tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();

        let mut interactions: Vec<Interaction> = kept
            .iter()
            .map(|&k| {
                let (u, i) = pairs[k];
                Interaction {
                    user: user_index[u],
                    item: item_index[i],
                    timestamp: dedup[&(u, i)],
                }
            })
            .collect();
        interactions.sort_by_key(|x| (x.user, x.item));
        let train = (0..interactions.len()).collect();
        Ok(Self {
            domain_name,
            num_users: user_tokens.len(),
            num_items: item_tokens.len(),
            interactions,
            splits: Splits {
                train,
                ..Splits::default()
            },
            user_tokens,
            item_tokens,
            split_order: None,
        })
    }

    /// Builds a dataset directly from dense ids; ids are their own tokens.
    pub fn from_dense(
        domain_name: impl Into<String>,
        num_users: usize,
        num_items: usize,
        mut interactions: Vec<Interaction>,
    ) -> Result<Self> {
        for x in &interactions {
            if x.user >= num_users || x.item >= num_items {
                return Err(Error::Data(format!(
                    "interaction ({}, {}) outside {num_users} users x {num_items} items",
                    x.user, x.item
                )));
            }
        }
        interactions.sort_by_key(|x| (x.user, x.item));
        interactions.dedup_by_key(|x| (x.user, x.item));
        let train = (0..interactions.len()).collect();
        Ok(Self {
            domain_name: domain_name.into(),
            num_users,
            num_items,
            interactions,
            splits: Splits {
                train,
                ..Splits::default()
            },
            user_tokens: (0..num_users).map(|u| u.to_string()).collect(),
            item_tokens: (0..num_items).map(|i| i.to_string()).collect(),
            split_order: None,
        })
    }

    pub fn average_length(&self) -> f64 {
        self.interactions.len() as f64 / self.num_users.max(1) as f64
    }

    fn items_by_user_for(&self, indices: &[usize]) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_users];
        for &k in indices {
            let x = self.interactions[k];
            out[x.user].push(x.item);
        }
        out.iter_mut().for_each(|v| v.sort_unstable());
        out
    }

    /// Sorted train items per user.
    pub fn train_items_by_user(&self) -> Vec<Vec<usize>> {
        self.items_by_user_for(&self.splits.train)
    }

    pub fn valid_items_by_user(&self) -> Vec<Vec<usize>> {
        self.items_by_user_for(&self.splits.valid)
    }

    pub fn test_items_by_user(&self) -> Vec<Vec<usize>> {
        self.items_by_user_for(&self.splits.test)
    }

    /// Sorted users per item over every interaction, regardless of split.
    pub fn users_by_item(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_items];
        for x in &self.interactions {
            out[x.item].push(x.user);
        }
        out.iter_mut().for_each(|v| v.sort_unstable());
        out
    }

    pub fn train_pairs(&self) -> Vec<(usize, usize)> {
        self.splits
            .train
            .iter()
            .map(|&k| (self.interactions[k].user, self.interactions[k].item))
            .collect()
    }

    pub fn has_timestamps(&self) -> bool {
        self.interactions.iter().all(|x| x.timestamp.is_some())
    }

    /// If every item token is a non-negative integer, returns them as row
    /// indices (used to line up an embedding file written for the unfiltered
    /// item universe).
    pub fn item_token_rows(&self) -> Option<Vec<usize>> {
        self.item_tokens.iter().map(|t| t.parse().ok()).collect()
    }
}

fn earliest(a: Option<i64>, b: Option<i64>) -> Option<i64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

/// Distinct tokens in ascending order: numeric order when every token is an
/// unsigned integer, lexicographic otherwise.
fn sorted_tokens<'a>(tokens: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut distinct: Vec<&str> = tokens.collect();
    distinct.sort_unstable();
    distinct.dedup();
    let numeric: Option<Vec<u64>> = distinct.iter().map(|t| t.parse().ok()).collect();
    if let Some(mut nums) = numeric {
        // Leading zeros would make "01" and "1" collide numerically; keep lexicographic then.
        if nums.iter().zip(&distinct).all(|(n, t)| n.to_string() == *t) {
            nums.sort_unstable();
            return nums.into_iter().map(|n| n.to_string()).collect();
        }
    }
    distinct.into_iter().map(str::to_owned).collect()
}

/// Iterative k-core over distinct `(user, item)` pairs. Returns the indices
/// of the pairs that survive.
pub fn k_core_filter<U, I>(pairs: &[(U, I)], min_core: usize) -> Vec<usize>
where
    U: std::hash::Hash + Eq,
    I: std::hash::Hash + Eq,
{
    let mut alive: Vec<bool> = vec![true; pairs.len()];
    loop {
        let mut user_deg: HashMap<&U, usize> = HashMap::new();
        let mut item_deg: HashMap<&I, usize> = HashMap::new();
        for (k, (u, i)) in pairs.iter().enumerate() {
            if alive[k] {
                *user_deg.entry(u).or_default() += 1;
                *item_deg.entry(i).or_default() += 1;
            }
        }
        let mut removed = false;
        for (k, (u, i)) in pairs.iter().enumerate() {
            if alive[k] && (user_deg[u] < min_core || item_deg[i] < min_core) {
                alive[k] = false;
                removed = true;
            }
        }
        if !removed {
            break;
        }
    }
    (0..pairs.len()).filter(|&k| alive[k]).collect()
}

/// Parses `user<TAB>item[<TAB>timestamp]` rows; blank and `#` lines are skipped.
pub fn parse_interactions(text: &str, path: &Path) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&cols.len()) {
            return Err(parse_err(format!(
                "expected 2 or 3 tab-separated columns, found {}",
                cols.len()
            )));
        }
        let (user, item) = (cols[0].trim(), cols[1].trim());
        if user.is_empty() || item.is_empty() {
            return Err(parse_err("empty user or item token".into()));
        }
        let timestamp = match cols.get(2).map(|s| s.trim()) {
            None | Some("") => None,
            Some(ts) => Some(
                ts.parse::<i64>()
                    .map_err(|e| parse_err(format!("invalid timestamp `{ts}`: {e}")))?,
            ),
        };
        out.push(RawRecord {
            user: user.to_owned(),
            item: item.to_owned(),
            timestamp,
            line: line_no,
        });
    }
    Ok(out)
}

/// Reads an interaction TSV and applies `min_core` filtering. The domain name
/// is the file stem.
pub fn load_interactions(path: impl AsRef<Path>, min_core: usize) -> Result<InteractionDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let records = parse_interactions(&text, path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "domain".into());
    InteractionDataset::from_records(name, &records, min_core)
}

/// Writes every interaction as `user_token<TAB>item_token[<TAB>timestamp]`.
pub fn write_interactions(path: impl AsRef<Path>, ds: &InteractionDataset) -> Result<()> {
    let text = interactions_text(ds);
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// The TSV body written by [`write_interactions`].
pub fn interactions_text(ds: &InteractionDataset) -> String {
    let mut text = String::new();
    for x in &ds.interactions {
        let _ = write!(text, "{}\t{}", ds.user_tokens[x.user], ds.item_tokens[x.item]);
        if let Some(ts) = x.timestamp {
            let _ = write!(text, "\t{ts}");
        }
        text.push('\n');
    }
    text
}

/// Per-user split. Users with fewer than three interactions keep everything
/// in train. Otherwise `valid = ⌊n·r_valid⌋`, `test = max(1, ⌊n·r_test⌋)` and
/// train takes the remainder; the earliest interactions go to train.
pub fn split_dataset(
    ds: &InteractionDataset,
    ratios: SplitRatios,
    seed: u64,
) -> Result<InteractionDataset> {
    let total = ratios.train + ratios.valid + ratios.test;
    if (total - 1.0).abs() > 1e-9
        || [ratios.train, ratios.valid, ratios.test]
            .iter()
            .any(|r| !(0.0..=1.0).contains(r))
    {
        return Err(Error::Config(format!(
            "split ratios must be in [0,1] and sum to 1, got ({}, {}, {})",
            ratios.train, ratios.valid, ratios.test
        )));
    }
    let order = if ds.has_timestamps() {
        SplitOrder::Chronological
    } else {
        SplitOrder::SeededShuffle
    };

    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); ds.num_users];
    for (k, x) in ds.interactions.iter().enumerate() {
        per_user[x.user].push(k);
    }

    let mut splits = Splits::default();
    for (user, mut idx) in per_user.into_iter().enumerate() {
        match order {
            SplitOrder::Chronological => idx.sort_by_key(|&k| {
                let x = ds.interactions[k];
                (x.timestamp, x.item)
            }),
            SplitOrder::SeededShuffle => {
                idx.sort_unstable();
                idx.shuffle(&mut rng_for(seed, 0x5b11_7000 ^ user as u64));
            }
        }
        let n = idx.len();
        if n < 3 {
            splits.train.extend(idx);
            continue;
        }
        let n_valid = floor_count(n, ratios.valid);
        let mut n_test = floor_count(n, ratios.test);
        if ratios.test > 0.0 && n_test == 0 {
            n_test = 1;
        }
        let n_train = n.saturating_sub(n_valid + n_test);
        splits.train.extend_from_slice(&idx[..n_train]);
        splits.valid.extend_from_slice(&idx[n_train..n_train + n_valid]);
        splits.test.extend_from_slice(&idx[n_train + n_valid..]);
    }
    splits.train.sort_unstable();
    splits.valid.sort_unstable();
    splits.test.sort_unstable();

    let mut out = ds.clone();
    out.splits = splits;
    out.split_order = Some(order);
    Ok(out)
}

fn floor_count(n: usize, ratio: f64) -> usize {
    ((n as f64) * ratio + 1e-9).floor() as usize
}
