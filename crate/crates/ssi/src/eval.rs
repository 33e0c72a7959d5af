//! Leave-last-two ranking evaluation: the held-out item is ranked against 99
//! sampled negatives per user, aggregated into Recall@k and NDCG@k.

use crate::data::{sample_negatives, worker_rng, Dataset, DatasetSplit};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

pub const NUM_NEGATIVES: usize = 99;
pub const DEFAULT_KS: [usize; 4] = [5, 10, 15, 20];

/// 1-based rank of the first score among the full candidate list, with
/// pessimistic tie-breaking: ties count against the target.
pub fn rank_of_target(target_score: f64, negative_scores: &[f64]) -> Result<usize> {
    if !target_score.is_finite() || negative_scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score in ranking".into()));
    }
    Ok(1 + negative_scores.iter().filter(|&&s| s >= target_score).count())
}

pub fn recall_at_k(rank: usize, k: usize) -> f64 {
    assert!(rank >= 1);
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    assert!(rank >= 1);
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRow {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub rows: Vec<MetricRow>,
    pub num_users: usize,
    pub skipped_users: usize,
    pub negative_seed: u64,
}

impl MetricsReport {
    pub fn recall(&self, k: usize) -> f64 {
        self.rows.iter().find(|r| r.k == k).map(|r| r.recall).unwrap_or(f64::NAN)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.rows.iter().find(|r| r.k == k).map(|r| r.ndcg).unwrap_or(f64::NAN)
    }

    /// Aligned text table (metrics × k).
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "split={:?} users={} skipped={} seed={}\n",
            self.split, self.num_users, self.skipped_users, self.negative_seed
        ));
        out.push_str(&format!("{:<10}", "metric"));
        for r in &self.rows {
            out.push_str(&format!("{:>10}", format!("@{}", r.k)));
        }
        out.push('\n');
        out.push_str(&format!("{:<10}", "Recall"));
        for r in &self.rows {
            out.push_str(&format!("{:>10.4}", r.recall));
        }
        out.push('\n');
        out.push_str(&format!("{:<10}", "NDCG"));
        for r in &self.rows {
            out.push_str(&format!("{:>10.4}", r.ndcg));
        }
        out.push('\n');
        out
    }
}

/// Per-user negatives, fixed by (dataset, seed) and shared across models so
/// comparisons are paired. Negatives exclude the user's entire history.
pub fn fixed_negatives(
    dataset: &Dataset,
    split: &DatasetSplit,
    seed: u64,
) -> Vec<Result<Vec<u32>>> {
    split
        .entries
        .iter()
        .enumerate()
        .map(|(user, e)| {
            let mut history: HashSet<u32> = e.prefix.iter().copied().collect();
            history.insert(e.valid);
            history.insert(e.test);
            let mut rng = worker_rng(seed, user as u64);
            sample_negatives(&history, NUM_NEGATIVES, &dataset.vocab, &mut rng)
        })
        .collect()
}

/// Evaluate a next-item scorer. The scorer maps a prefix to one score per
/// vocabulary index; only target/negative entries are consulted.
///
/// With the `parallel` feature enabled, users are scored across threads; the
/// aggregation sums per-user metrics in user order, so results are identical
/// to the sequential path.
pub fn evaluate<F>(scorer: F, split: Split, dataset: &Dataset, seed: u64) -> Result<MetricsReport>
where
    F: Fn(&[u32]) -> Vec<f64> + Sync,
{
    let ds_split = crate::data::split(dataset)?;
    let negatives = fixed_negatives(dataset, &ds_split, seed);

    let user_metrics = |(entry, negs): (&crate::data::SplitEntry, &Result<Vec<u32>>)| -> Result<Option<Vec<(f64, f64)>>> {
        let negs = match negs {
            Ok(n) => n,
            Err(Error::InsufficientItems(_)) => return Ok(None),
            Err(e) => return Err(Error::Contract(e.to_string())),
        };
        let (prefix, target): (Vec<u32>, u32) = match split {
            Split::Valid => (entry.prefix.clone(), entry.valid),
            Split::Test => {
                let mut p = entry.prefix.clone();
                p.push(entry.valid);
                (p, entry.test)
            }
        };
        let scores = scorer(&prefix);
        let target_score = scores[target as usize];
        let neg_scores: Vec<f64> = negs.iter().map(|&n| scores[n as usize]).collect();
        let rank = rank_of_target(target_score, &neg_scores)?;
        Ok(Some(
            DEFAULT_KS.iter().map(|&k| (recall_at_k(rank, k), ndcg_at_k(rank, k))).collect(),
        ))
    };

    let pairs: Vec<(&crate::data::SplitEntry, &Result<Vec<u32>>)> =
        ds_split.entries.iter().zip(negatives.iter()).collect();

    #[cfg(feature = "parallel")]
    let per_user: Vec<Result<Option<Vec<(f64, f64)>>>> = {
        use rayon::prelude::*;
        pairs.into_par_iter().map(user_metrics).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let per_user: Vec<Result<Option<Vec<(f64, f64)>>>> =
        pairs.into_iter().map(user_metrics).collect();

    let mut sums = vec![(0.0f64, 0.0f64); DEFAULT_KS.len()];
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for r in per_user {
        match r? {
            None => skipped += 1,
            Some(ms) => {
                evaluated += 1;
                for (acc, m) in sums.iter_mut().zip(ms) {
                    acc.0 += m.0;
                    acc.1 += m.1;
                }
            }
        }
    }
    if evaluated == 0 {
        return Err(Error::EmptyDataset);
    }
    let rows = DEFAULT_KS
        .iter()
        .zip(sums)
        .map(|(&k, (r, n))| MetricRow {
            k,
            recall: r / evaluated as f64,
            ndcg: n / evaluated as f64,
        })
        .collect();
    Ok(MetricsReport {
        split,
        rows,
        num_users: evaluated,
        skipped_users: skipped,
        negative_seed: seed,
    })
}
