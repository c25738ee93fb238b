//! Full-ranking top-K metrics and the similarity-based inference attack.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::datamodel::InteractionDataset;
use crate::error::{Error, Result};
use crate::tensor::{cosine, Matrix};

/// Items sorted by score descending (ties to the lower id) with `masked`
/// items removed. `masked` must be sorted.
pub fn rank_full(scores: &[f64], masked: &[usize]) -> Vec<usize> {
    let mut items: Vec<usize> = (0..scores.len())
        .filter(|i| masked.binary_search(i).is_err())
        .collect();
    items.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    items
}

/// Top `k` of [`rank_full`] without sorting the whole list.
pub fn top_k(scores: &[f64], masked: &[usize], k: usize) -> Vec<usize> {
    let mut items: Vec<usize> = (0..scores.len())
        .filter(|i| masked.binary_search(i).is_err())
        .collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < items.len() {
        items.select_nth_unstable_by(k, cmp);
        items.truncate(k);
    }
    items.sort_by(cmp);
    items
}

pub fn recall_at_k(ranked: &[usize], ground_truth: &[usize], k: usize) -> Result<f64> {
    if ground_truth.is_empty() {
        return Err(Error::InvalidArgument("recall needs a nonempty ground truth".into()));
    }
    let gt: BTreeSet<usize> = ground_truth.iter().copied().collect();
    let hits = ranked.iter().take(k).filter(|i| gt.contains(i)).count();
    Ok(hits as f64 / gt.len() as f64)
}

pub fn ndcg_at_k(ranked: &[usize], ground_truth: &[usize], k: usize) -> Result<f64> {
    if ground_truth.is_empty() {
        return Err(Error::InvalidArgument("NDCG needs a nonempty ground truth".into()));
    }
    let gt: BTreeSet<usize> = ground_truth.iter().copied().collect();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| gt.contains(i))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..gt.len().min(k)).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    Ok(dcg / idcg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    /// Ground truth = valid items; train items masked.
    Valid,
    /// Ground truth = test items; train and valid items masked.
    Test,
}

/// Mean metrics over users with a nonempty ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    /// e.g. `recall@20` → value.
    pub metrics: BTreeMap<String, f64>,
    pub users_evaluated: usize,
}

impl RankingMetrics {
    pub fn get(&self, name: &str) -> f64 {
        self.metrics.get(name).copied().unwrap_or(0.0)
    }
}

/// Scores every user against every item with `ŷ = x_uᵀ x_i`.
pub fn evaluate(
    users: &Matrix,
    items: &Matrix,
    ds: &InteractionDataset,
    split: EvalSplit,
    ks: &[usize],
) -> Result<RankingMetrics> {
    if users.rows() != ds.num_users || items.rows() != ds.num_items {
        return Err(Error::InvalidArgument(format!(
            "representations are {}x{} users / {}x{} items for a {}-user {}-item domain",
            users.rows(),
            users.cols(),
            items.rows(),
            items.cols(),
            ds.num_users,
            ds.num_items
        )));
    }
    if !users.is_finite() || !items.is_finite() {
        return Err(Error::Data("non-finite representations in evaluation".into()));
    }
    let train = ds.train_items_by_user();
    let valid = ds.valid_items_by_user();
    let test = ds.test_items_by_user();
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut evaluated = 0;
    const CHUNK: usize = 256;
    for start in (0..ds.num_users).step_by(CHUNK) {
        let end = (start + CHUNK).min(ds.num_users);
        let scores = users.slice_rows(start, end).matmul_nt(items);
        for u in start..end {
            let (gt, mask) = match split {
                EvalSplit::Valid => (&valid[u], train[u].clone()),
                EvalSplit::Test => {
                    let mut m = train[u].clone();
                    m.extend_from_slice(&valid[u]);
                    m.sort_unstable();
                    (&test[u], m)
                }
            };
            if gt.is_empty() {
                continue;
            }
            evaluated += 1;
            let ranked = top_k(scores.row(u - start), &mask, max_k);
            for &k in ks {
                *sums.entry(format!("recall@{k}")).or_default() += recall_at_k(&ranked, gt, k)?;
                *sums.entry(format!("ndcg@{k}")).or_default() += ndcg_at_k(&ranked, gt, k)?;
            }
        }
    }
    let metrics = sums
        .into_iter()
        .map(|(name, s)| (name, if evaluated > 0 { s / evaluated as f64 } else { 0.0 }))
        .collect();
    Ok(RankingMetrics {
        metrics,
        users_evaluated: evaluated,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub top_k: usize,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub targets: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub rows: Vec<AttackRow>,
}

/// For each target item, predicts its users as the union of the users of
/// its `top_k` most cosine-similar other items and scores the guess by F1.
/// Targets without users are skipped.
pub fn sia_attack(
    item_embs: &Matrix,
    interactions: &InteractionDataset,
    targets: Option<&[usize]>,
    top_ks: &[usize],
) -> Result<AttackReport> {
    if item_embs.rows() != interactions.num_items {
        return Err(Error::RowCount {
            expected: interactions.num_items,
            found: item_embs.rows(),
        });
    }
    let users_by_item: Vec<BTreeSet<usize>> = interactions
        .interactions
        .iter()
        .fold(vec![BTreeSet::new(); interactions.num_items], |mut acc, x| {
            acc[x.item].insert(x.user);
            acc
        });
    let all: Vec<usize> = (0..interactions.num_items).collect();
    let targets = targets.unwrap_or(&all);
    let max_k = top_ks.iter().copied().max().unwrap_or(0);
    let mut sums = vec![(0.0, 0.0, 0.0); top_ks.len()];
    let mut counted = 0;
    for &t in targets {
        if t >= interactions.num_items {
            return Err(Error::InvalidArgument(format!("target item {t} out of range")));
        }
        let truth = &users_by_item[t];
        if truth.is_empty() {
            continue;
        }
        counted += 1;
        let sims: Vec<f64> = (0..item_embs.rows())
            .map(|j| cosine(item_embs.row(t), item_embs.row(j)))
            .collect();
        let neighbours = top_k(&sims, &[t], max_k);
        for (slot, &k) in top_ks.iter().enumerate() {
            let predicted: BTreeSet<usize> = neighbours
                .iter()
                .take(k)
                .flat_map(|&j| users_by_item[j].iter().copied())
                .collect();
            let (p, r, f) = precision_recall_f1(&predicted, truth);
            sums[slot].0 += p;
            sums[slot].1 += r;
            sums[slot].2 += f;
        }
    }
    let n = counted.max(1) as f64;
    Ok(AttackReport {
        rows: top_ks
            .iter()
            .zip(sums)
            .map(|(&top_k, (p, r, f))| AttackRow {
                top_k,
                precision: p / n,
                recall: r / n,
                f1: f / n,
                targets: counted,
            })
            .collect(),
    })
}

fn precision_recall_f1(predicted: &BTreeSet<usize>, truth: &BTreeSet<usize>) -> (f64, f64, f64) {
    let hits = predicted.intersection(truth).count() as f64;
    if hits == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let p = hits / predicted.len() as f64;
    let r = hits / truth.len() as f64;
    (p, r, 2.0 * p * r / (p + r))
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let pairs = |n: u64| (n * n.saturating_sub(1) / 2) as f64;
    let index: f64 = table.values().map(|&n| pairs(n)).sum();
    let sum_a: f64 = rows.values().map(|&n| pairs(n)).sum();
    let sum_b: f64 = cols.values().map(|&n| pairs(n)).sum();
    let total = pairs(a.len() as u64);
    let expected = sum_a * sum_b / total.max(1.0);
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
