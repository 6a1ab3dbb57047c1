//! All-ranking evaluation: Recall@k and NDCG@k, overall and per item
//! popularity bucket.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_data::{InteractionGraph, Popularity, PopularityBuckets, Split};

/// Final user and item representations, one row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct Representations {
    pub users: Array2<f64>,
    pub items: Array2<f64>,
}

impl Representations {
    /// Splits a token-ordered matrix (users first) into users and items.
    pub fn from_tokens(h: &Array2<f64>, num_users: usize) -> Self {
        Self {
            users: h.slice(ndarray::s![..num_users, ..]).to_owned(),
            items: h.slice(ndarray::s![num_users.., ..]).to_owned(),
        }
    }

    pub fn scores(&self, user: usize) -> Array1<f64> {
        self.items.dot(&self.users.row(user))
    }
}

/// Higher score first, lower item index on ties.
fn rank_cmp(scores: ArrayView1<f64>, a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Every item not in `exclude`, best first.
pub fn rank_items(scores: ArrayView1<f64>, exclude: &[usize]) -> Vec<usize> {
    let skip: HashSet<usize> = exclude.iter().copied().collect();
    let mut items: Vec<usize> = (0..scores.len()).filter(|i| !skip.contains(i)).collect();
    items.sort_by(|&a, &b| rank_cmp(scores, a, b));
    items
}

/// The first `k` entries of [`rank_items`], by partial selection.
pub fn top_k(scores: ArrayView1<f64>, exclude_sorted: &[usize], k: usize) -> Vec<usize> {
    let mut items: Vec<usize> = (0..scores.len())
        .filter(|i| exclude_sorted.binary_search(i).is_err())
        .collect();
    if k < items.len() {
        items.select_nth_unstable_by(k, |&a, &b| rank_cmp(scores, a, b));
        items.truncate(k);
    }
    items.sort_by(|&a, &b| rank_cmp(scores, a, b));
    items
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// Recall@k and NDCG@k of one ranking with binary relevance. Ranks are
/// 1-based. Empty `relevant` is an error.
pub fn recall_ndcg_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Result<(f64, f64)> {
    if relevant.is_empty() {
        return Err(Error::EmptyInput("no relevant items".into()));
    }
    let rel: HashSet<usize> = relevant.iter().copied().collect();
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().take(k).enumerate() {
        if rel.contains(item) {
            hits += 1;
            dcg += discount(pos + 1);
        }
    }
    let mut idcg = 0.0;
    for pos in 0..k.min(rel.len()) {
        idcg += discount(pos + 1);
    }
    Ok((hits as f64 / rel.len() as f64, dcg / idcg))
}

/// Recall normalized by `min(k, |relevant|)`, so a perfect top-k scores 1
/// even when there are more relevant items than slots.
pub fn capped_recall_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::EmptyInput("no relevant items".into()));
    }
    let rel: HashSet<usize> = relevant.iter().copied().collect();
    let hits = ranked.iter().take(k).filter(|i| rel.contains(i)).count();
    Ok(hits as f64 / k.min(rel.len()) as f64)
}

/// Batched form of [`recall_ndcg_at_k`]: one discount table and a reusable
/// membership mask over `num_items`. Gives bit-identical results.
pub fn batch_recall_ndcg(
    rankings: &[Vec<usize>],
    relevant: &[Vec<usize>],
    k: usize,
    num_items: usize,
) -> Result<Vec<(f64, f64)>> {
    if rankings.len() != relevant.len() {
        return Err(Error::Shape {
            op: "batch_recall_ndcg",
            expected: format!("{} relevant sets", rankings.len()),
            actual: relevant.len().to_string(),
        });
    }
    let table: Vec<f64> = (1..=k).map(discount).collect();
    let mut ideal = Vec::with_capacity(k + 1);
    ideal.push(0.0);
    for d in &table {
        ideal.push(ideal.last().unwrap() + d);
    }
    let mut member = vec![false; num_items];
    let mut out = Vec::with_capacity(rankings.len());
    for (ranked, rel) in rankings.iter().zip(relevant) {
        let mut distinct = 0usize;
        for &i in rel {
            if i >= num_items {
                return Err(Error::invalid(format!("relevant item {i} out of range")));
            }
            if !member[i] {
                member[i] = true;
                distinct += 1;
            }
        }
        if distinct == 0 {
            return Err(Error::EmptyInput("no relevant items".into()));
        }
        let mut hits = 0usize;
        let mut dcg = 0.0;
        for (pos, &item) in ranked.iter().take(k).enumerate() {
            if item < num_items && member[item] {
                hits += 1;
                dcg += table[pos];
            }
        }
        out.push((hits as f64 / distinct as f64, dcg / ideal[k.min(distinct)]));
        for &i in rel {
            member[i] = false;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub recall: f64,
    pub ndcg: f64,
    pub users: usize,
}

/// Metrics of one evaluated user. Bucket entries are `None` when the user
/// has no relevant item in that bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct UserMetrics {
    pub user: usize,
    pub relevant: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub buckets: [Option<(f64, f64)>; 3],
    /// Relevant items per bucket (unpopular, normal, popular).
    pub bucket_relevant: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub users_evaluated: usize,
    /// Users with held-out items but no rankable candidate.
    pub users_skipped: usize,
    pub per_bucket: BTreeMap<String, BucketMetrics>,
}

impl EvalReport {
    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>10} {:>10} {:>7}",
            "bucket",
            format!("recall@{}", self.k),
            format!("ndcg@{}", self.k),
            "users"
        );
        let _ = writeln!(
            s,
            "{:<10} {:>10.4} {:>10.4} {:>7}",
            "all", self.recall, self.ndcg, self.users_evaluated
        );
        for b in Popularity::ALL {
            if let Some(m) = self.per_bucket.get(&b.to_string()) {
                let _ = writeln!(
                    s,
                    "{:<10} {:>10.4} {:>10.4} {:>7}",
                    b.to_string(),
                    m.recall,
                    m.ndcg,
                    m.users
                );
            }
        }
        s
    }
}

fn bucket_index(b: Popularity) -> usize {
    match b {
        Popularity::Unpopular => 0,
        Popularity::Normal => 1,
        Popularity::Popular => 2,
    }
}

/// Per-user metrics on `target`, ranking all items except the user's
/// training items. Users without held-out items are not listed.
pub fn evaluate_users(
    reps: &Representations,
    graph: &InteractionGraph,
    buckets: Option<&PopularityBuckets>,
    target: Split,
    k: usize,
) -> Result<(Vec<UserMetrics>, usize)> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if reps.users.nrows() != graph.num_users || reps.items.nrows() != graph.num_items {
        return Err(Error::Shape {
            op: "evaluate",
            expected: format!("{} users, {} items", graph.num_users, graph.num_items),
            actual: format!("{} users, {} items", reps.users.nrows(), reps.items.nrows()),
        });
    }
    if let Some(b) = buckets {
        if b.bucket_of_item.len() != graph.num_items {
            return Err(Error::invalid(
                "popularity buckets do not match the item count",
            ));
        }
    }
    if graph.split_sizes()[target as usize] == 0 {
        return Err(Error::EmptyInput(format!(
            "no {target:?} interactions to evaluate"
        )));
    }
    let train = graph.user_items(Split::Train);
    let held = graph.user_items(target);

    let per_user: Vec<Option<(Vec<usize>, Vec<usize>)>> = (0..graph.num_users)
        .into_par_iter()
        .map(|u| {
            if held[u].is_empty() {
                return None;
            }
            let scores = reps.scores(u);
            Some((top_k(scores.view(), &train[u], k), held[u].clone()))
        })
        .collect();

    let mut users = Vec::new();
    let mut rankings = Vec::new();
    let mut relevant = Vec::new();
    let mut skipped = 0;
    for (u, entry) in per_user.into_iter().enumerate() {
        let Some((ranked, rel)) = entry else { continue };
        if ranked.is_empty() {
            skipped += 1;
            continue;
        }
        users.push(u);
        rankings.push(ranked);
        relevant.push(rel);
    }
    let overall = batch_recall_ndcg(&rankings, &relevant, k, graph.num_items)?;

    let mut bucket_results: [Vec<Option<(f64, f64)>>; 3] = Default::default();
    let mut bucket_sizes = vec![[0usize; 3]; users.len()];
    if let Some(b) = buckets {
        for pop in Popularity::ALL {
            let idx = bucket_index(pop);
            let mut idx_users = Vec::new();
            let mut sub_rank = Vec::new();
            let mut sub_rel = Vec::new();
            for (j, rel) in relevant.iter().enumerate() {
                let rel_b: Vec<usize> = rel
                    .iter()
                    .copied()
                    .filter(|&i| b.bucket_of_item[i] == pop)
                    .collect();
                bucket_sizes[j][idx] = rel_b.len();
                if !rel_b.is_empty() {
                    idx_users.push(j);
                    sub_rank.push(rankings[j].clone());
                    sub_rel.push(rel_b);
                }
            }
            let vals = batch_recall_ndcg(&sub_rank, &sub_rel, k, graph.num_items)?;
            let mut column = vec![None; users.len()];
            for (j, v) in idx_users.into_iter().zip(vals) {
                column[j] = Some(v);
            }
            bucket_results[idx] = column;
        }
    }

    let out = users
        .iter()
        .enumerate()
        .map(|(j, &u)| UserMetrics {
            user: u,
            relevant: relevant[j].len(),
            recall: overall[j].0,
            ndcg: overall[j].1,
            buckets: std::array::from_fn(|b| bucket_results[b].get(j).copied().flatten()),
            bucket_relevant: bucket_sizes[j],
        })
        .collect();
    Ok((out, skipped))
}

/// Averages per-user metrics into a report.
pub fn summarize(
    users: &[UserMetrics],
    skipped: usize,
    target: Split,
    k: usize,
    with_buckets: bool,
) -> EvalReport {
    let n = users.len();
    let mean = |f: &dyn Fn(&UserMetrics) -> f64| {
        if n == 0 {
            0.0
        } else {
            users.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let mut per_bucket = BTreeMap::new();
    if with_buckets {
        for pop in Popularity::ALL {
            let idx = bucket_index(pop);
            let vals: Vec<(f64, f64)> = users.iter().filter_map(|u| u.buckets[idx]).collect();
            let c = vals.len();
            let (r, g) = vals
                .iter()
                .fold((0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
            let (r, g) = if c == 0 {
                (0.0, 0.0)
            } else {
                (r / c as f64, g / c as f64)
            };
            per_bucket.insert(
                pop.to_string(),
                BucketMetrics {
                    recall: r,
                    ndcg: g,
                    users: c,
                },
            );
        }
    }
    EvalReport {
        split: format!("{target:?}").to_lowercase(),
        k,
        recall: mean(&|u| u.recall),
        ndcg: mean(&|u| u.ndcg),
        users_evaluated: n,
        users_skipped: skipped,
        per_bucket,
    }
}

/// Recall@k and NDCG@k on `target`, overall and (optionally) per bucket.
pub fn evaluate(
    reps: &Representations,
    graph: &InteractionGraph,
    buckets: Option<&PopularityBuckets>,
    target: Split,
    k: usize,
) -> Result<EvalReport> {
    let (users, skipped) = evaluate_users(reps, graph, buckets, target, k)?;
    Ok(summarize(&users, skipped, target, k, buckets.is_some()))
}
