//! Ranking metrics and the pooled evaluation protocol.
//!
//! Every metric takes the relevance flags of a ranked list, best first.
//!
//! ```
//! use ctesret::evalmetrics::{average_precision, ndcg_at_k, reciprocal_rank};
//!
//! assert_eq!(average_precision(&[true, true, false]), 1.0);
//! assert_eq!(average_precision(&[false, true]), 0.5);
//! assert!((ndcg_at_k(&[false, true], 2) - 1.0 / 3f64.log2()).abs() < 1e-12);
//! assert_eq!(reciprocal_rank(&[false, false, false, true]), 0.25);
//! ```

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seq::{Dataset, Split};

pub fn average_precision(flags: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (i, &rel) in flags.iter().enumerate() {
        if rel {
            hits += 1;
            total += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        total / hits as f64
    }
}

fn dcg(flags: impl Iterator<Item = bool>, k: usize) -> f64 {
    flags
        .take(k)
        .enumerate()
        .filter(|(_, rel)| *rel)
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum()
}

/// Binary-gain NDCG at cutoff `k`, normalized by the ideal ordering of the
/// same flags.
pub fn ndcg_at_k(flags: &[bool], k: usize) -> f64 {
    let relevant = flags.iter().filter(|&&f| f).count();
    if relevant == 0 || k == 0 {
        return 0.0;
    }
    let ideal = dcg((0..flags.len()).map(|i| i < relevant), k);
    dcg(flags.iter().copied(), k) / ideal
}

/// `1 / rank` of the first relevant entry, 0 when there is none.
pub fn reciprocal_rank(flags: &[bool]) -> f64 {
    flags
        .iter()
        .position(|&f| f)
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

pub fn mrr(rankings: &[Vec<bool>]) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    rankings.iter().map(|r| reciprocal_rank(r)).sum::<f64>() / rankings.len() as f64
}

/// Orders `(id, score)` pairs by score descending, ties by id ascending.
pub fn rank_by_score<S: AsRef<str>>(ids: &[S], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| ids[a].as_ref().cmp(ids[b].as_ref()))
    });
    order
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "MAP")]
    pub map: f64,
    #[serde(rename = "NDCG@10")]
    pub ndcg10: f64,
    #[serde(rename = "NDCG@20")]
    pub ndcg20: f64,
    #[serde(rename = "MRR")]
    pub mrr: f64,
}

impl Metrics {
    /// Averages per-query metrics over a set of ranked flag lists.
    pub fn from_rankings(rankings: &[Vec<bool>]) -> Self {
        let n = rankings.len().max(1) as f64;
        let mean = |f: &dyn Fn(&[bool]) -> f64| rankings.iter().map(|r| f(r)).sum::<f64>() / n;
        Self {
            map: mean(&average_precision),
            ndcg10: mean(&|r| ndcg_at_k(r, 10)),
            ndcg20: mean(&|r| ndcg_at_k(r, 20)),
            mrr: mrr(rankings),
        }
    }

    pub fn mean(runs: &[Metrics]) -> Self {
        let n = runs.len().max(1) as f64;
        let sum = |f: fn(&Metrics) -> f64| runs.iter().map(f).sum::<f64>() / n;
        Self {
            map: sum(|m| m.map),
            ndcg10: sum(|m| m.ndcg10),
            ndcg20: sum(|m| m.ndcg20),
            mrr: sum(|m| m.mrr),
        }
    }

    /// Population standard deviation of each metric across runs.
    pub fn std(runs: &[Metrics]) -> Self {
        let mean = Self::mean(runs);
        let n = runs.len().max(1) as f64;
        let sd = |f: fn(&Metrics) -> f64| {
            let mu = f(&mean);
            (runs.iter().map(|m| (f(m) - mu).powi(2)).sum::<f64>() / n).sqrt()
        };
        Self {
            map: sd(|m| m.map),
            ndcg10: sd(|m| m.ndcg10),
            ndcg20: sd(|m| m.ndcg20),
            mrr: sd(|m| m.mrr),
        }
    }

    /// Values scaled to percentages of the maximum.
    pub fn percent(&self) -> Self {
        Self {
            map: 100.0 * self.map,
            ndcg10: 100.0 * self.ndcg10,
            ndcg20: 100.0 * self.ndcg20,
            mrr: 100.0 * self.mrr,
        }
    }
}

/// Report written by the evaluation commands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Report {
    #[serde(flatten)]
    pub metrics: Metrics,
    pub reduction_factor: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    /// Non-relevant sequences sampled into each query's pool.
    pub negatives: usize,
    pub seed: u64,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            negatives: 1000,
            seed: 0,
        }
    }
}

/// Candidate pool of one query: every relevant corpus index followed by the
/// sampled non-relevant ones, both ascending.
pub fn query_pool(dataset: &Dataset, query_idx: usize, protocol: &Protocol) -> Vec<usize> {
    let labels = dataset.label_index(query_idx);
    let negatives = &labels.negatives;
    let take = protocol.negatives.min(negatives.len());
    let mut rng = ChaCha8Rng::seed_from_u64(
        protocol.seed ^ (query_idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    let mut picked: Vec<usize> = index::sample(&mut rng, negatives.len(), take)
        .into_iter()
        .map(|i| negatives[i])
        .collect();
    picked.sort_unstable();
    let mut pool = labels.positives.clone();
    pool.extend(picked);
    pool
}

/// Ranks each query's pool with `score` and averages the metrics.
///
/// `score(query_idx, pool)` returns one score per pool entry.
pub fn evaluate<F>(
    dataset: &Dataset,
    split: Split,
    protocol: &Protocol,
    mut score: F,
) -> Result<Metrics>
where
    F: FnMut(usize, &[usize]) -> Result<Vec<f64>>,
{
    let queries = dataset.split_indices(split);
    if queries.is_empty() {
        return Err(Error::NoTestQueries);
    }
    let mut rankings = Vec::with_capacity(queries.len());
    for q in queries {
        let pool = query_pool(dataset, q, protocol);
        let scores = score(q, &pool)?;
        if scores.len() != pool.len() {
            return Err(Error::DimensionMismatch {
                expected: pool.len(),
                got: scores.len(),
            });
        }
        let ids: Vec<&str> = pool
            .iter()
            .map(|&c| dataset.corpus[c].id.as_str())
            .collect();
        let flags = rank_by_score(&ids, &scores)
            .into_iter()
            .map(|i| dataset.is_relevant(q, pool[i]))
            .collect();
        rankings.push(flags);
    }
    Ok(Metrics::from_rankings(&rankings))
}

/// Metrics for `runs` pool samplings with seeds `seed, seed + 1, ...`.
pub fn evaluate_runs<F>(
    dataset: &Dataset,
    split: Split,
    protocol: &Protocol,
    runs: usize,
    mut score: F,
) -> Result<Vec<Metrics>>
where
    F: FnMut(usize, &[usize]) -> Result<Vec<f64>>,
{
    (0..runs as u64)
        .map(|r| {
            let p = Protocol {
                seed: protocol.seed.wrapping_add(r),
                ..*protocol
            };
            evaluate(dataset, split, &p, &mut score)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, true, false]), 1.0);
        assert_eq!(average_precision(&[false, true]), 0.5);
        assert_eq!(average_precision(&[false, false]), 0.0);
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[true, false], 2), 1.0);
        assert!((ndcg_at_k(&[false, true], 2) - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&[false, false], 5), 0.0);
    }

    #[test]
    fn mrr_examples() {
        assert_eq!(mrr(&[vec![true]]), 1.0);
        assert_eq!(mrr(&[vec![false, false, false, true]]), 0.25);
        assert_eq!(mrr(&[vec![false, false], vec![true]]), 0.5);
    }

    #[test]
    fn ties_break_by_id() {
        let ids = ["b", "a", "c"];
        assert_eq!(rank_by_score(&ids, &[1.0, 1.0, 2.0]), vec![2, 1, 0]);
    }

    #[test]
    fn single_query_second_of_three() {
        let m = Metrics::from_rankings(&[vec![false, true, false]]);
        assert_eq!(m.map, 0.5);
        assert_eq!(m.mrr, 0.5);
    }

    #[test]
    fn report_json_keys() {
        let r = Report {
            metrics: Metrics {
                map: 1.0,
                ndcg10: 0.5,
                ndcg20: 0.25,
                mrr: 0.125,
            },
            reduction_factor: 90.0,
            runs: 5,
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"MAP":1.0,"NDCG@10":0.5,"NDCG@20":0.25,"MRR":0.125,"reduction_factor":90.0,"runs":5}"#
        );
    }

    #[test]
    fn mean_and_std() {
        let a = Metrics {
            map: 0.2,
            ndcg10: 0.0,
            ndcg20: 0.0,
            mrr: 1.0,
        };
        let b = Metrics {
            map: 0.4,
            ndcg10: 1.0,
            ndcg20: 0.0,
            mrr: 1.0,
        };
        let m = Metrics::mean(&[a, b]);
        let s = Metrics::std(&[a, b]);
        assert!((m.map - 0.3).abs() < 1e-12);
        assert!((s.map - 0.1).abs() < 1e-12);
        assert_eq!(s.mrr, 0.0);
        assert_eq!(m.percent().ndcg10, 50.0);
    }

    proptest! {
        #[test]
        fn metrics_in_unit_interval(flags in prop::collection::vec(any::<bool>(), 1..60)) {
            for v in [average_precision(&flags), ndcg_at_k(&flags, 10), ndcg_at_k(&flags, 20), reciprocal_rank(&flags)] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn ideal_order_is_perfect(flags in prop::collection::vec(any::<bool>(), 1..60)) {
            prop_assume!(flags.iter().any(|&f| f));
            let mut ideal = flags.clone();
            ideal.sort_by(|a, b| b.cmp(a));
            prop_assert_eq!(average_precision(&ideal), 1.0);
            prop_assert!((ndcg_at_k(&ideal, 10) - 1.0).abs() < 1e-12);
            prop_assert_eq!(reciprocal_rank(&ideal), 1.0);
        }
    }
}
