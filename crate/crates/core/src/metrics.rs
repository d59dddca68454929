//! Full-catalog ranking metrics.

use serde::{Deserialize, Serialize};

use crate::objectives::LossBreakdown;

/// 1-based rank of `target` among `scores`. Ties go to the lower index, and
/// a non-finite target score ranks last.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    if s.is_nan() {
        return scores.len();
    }
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(v, &x)| x > s || (x == s && v < target))
        .count();
    ahead + 1
}

pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn mrr_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / rank as f64
    } else {
        0.0
    }
}

/// NDCG and MRR at 5 and 10, averaged over evaluated examples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    #[serde(rename = "ndcg@5")]
    pub ndcg5: f64,
    #[serde(rename = "ndcg@10")]
    pub ndcg10: f64,
    #[serde(rename = "mrr@5")]
    pub mrr5: f64,
    #[serde(rename = "mrr@10")]
    pub mrr10: f64,
    pub count: usize,
}

impl RankingMetrics {
    /// Means over the given ranks, summed in order.
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let n = ranks.len().max(1) as f64;
        let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|&r| f(r)).sum::<f64>() / n;
        Self {
            ndcg5: mean(&|r| ndcg_at(r, 5)),
            ndcg10: mean(&|r| ndcg_at(r, 10)),
            mrr5: mean(&|r| mrr_at(r, 5)),
            mrr10: mean(&|r| mrr_at(r, 10)),
            count: ranks.len(),
        }
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epoch: usize,
    pub split: String,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    #[serde(flatten)]
    pub ranking: RankingMetrics,
    pub wall_time_seconds: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!((ndcg_at(1, 5), mrr_at(1, 5)), (1.0, 1.0));
        assert_eq!(ndcg_at(3, 5), 0.5);
        assert!((mrr_at(3, 5) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!((ndcg_at(7, 5), mrr_at(7, 5)), (0.0, 0.0));
        assert!((ndcg_at(7, 10) - 1.0 / 3.0).abs() < 1e-15);
        assert!((mrr_at(7, 10) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn ties_favour_lower_index() {
        let s = [0.5, 1.0, 1.0, 1.0, 0.2];
        assert_eq!(rank_of(&s, 1), 1);
        assert_eq!(rank_of(&s, 2), 2);
        assert_eq!(rank_of(&s, 3), 3);
        assert_eq!(rank_of(&s, 0), 4);
        assert_eq!(rank_of(&[f64::NAN, 1.0], 0), 2);
    }

    #[test]
    fn report_json_has_metric_names() {
        let r = MetricsReport {
            epoch: 3,
            split: "valid".into(),
            loss: LossBreakdown::default(),
            ranking: RankingMetrics::from_ranks(&[1, 3]),
            wall_time_seconds: 0.5,
        };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["ndcg@5"], 0.75);
        assert_eq!(v["epoch"], 3);
        assert!(v.get("main").is_some());
    }

    fn scan_rank(scores: &[f64], target: usize) -> usize {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        1 + order.iter().position(|&i| i == target).unwrap()
    }

    proptest::proptest! {
        #[test]
        fn matrix_ranks_match_a_sorted_scan(
            users in 1usize..100,
            items in 1usize..1000,
            levels in 1u32..50,
            seed in proptest::prelude::any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut got = Vec::new();
            let mut want = Vec::new();
            for _ in 0..users {
                let scores: Vec<f64> = (0..items).map(|_| rng.random_range(0..levels) as f64).collect();
                let target = rng.random_range(0..items);
                got.push(rank_of(&scores, target));
                want.push(scan_rank(&scores, target));
            }
            proptest::prop_assert_eq!(&got, &want);
            proptest::prop_assert_eq!(RankingMetrics::from_ranks(&got), RankingMetrics::from_ranks(&want));
        }

        #[test]
        fn better_rank_never_lowers_a_metric(r in 1usize..50, gain in 1usize..50) {
            let better = r.saturating_sub(gain).max(1);
            for k in [5, 10] {
                proptest::prop_assert!(ndcg_at(better, k) >= ndcg_at(r, k));
                proptest::prop_assert!(mrr_at(better, k) >= mrr_at(r, k));
            }
            let m = RankingMetrics::from_ranks(&[r, better]);
            proptest::prop_assert!(m.ndcg5 <= m.ndcg10 && m.mrr5 <= m.mrr10);
        }
    }
}
