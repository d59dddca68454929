use serde::{Deserialize, Serialize};

use super::InteractionLog;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_actions: usize,
    pub avg_actions_per_user: f64,
    pub avg_actions_per_item: f64,
    pub sparsity: f64,
    pub n_categories: usize,
    pub empty: bool,
}

impl DatasetStats {
    pub fn of(log: &InteractionLog, n_categories: usize) -> Self {
        let n_users = log.n_users();
        let n_items = log.n_items();
        let n_actions = log.n_actions();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let cells = n_users as f64 * n_items as f64;
        Self {
            n_users,
            n_items,
            n_actions,
            avg_actions_per_user: ratio(n_actions, n_users),
            avg_actions_per_item: ratio(n_actions, n_items),
            sparsity: if cells == 0.0 { 1.0 } else { 1.0 - n_actions as f64 / cells },
            n_categories,
            empty: n_actions == 0,
        }
    }
}

/// Interaction counts over `bins` equal-width slices of the log's time span.
pub fn time_histogram(log: &InteractionLog, bins: usize) -> Vec<usize> {
    bin_counts(&log.timestamps().collect::<Vec<_>>(), bins)
}

/// Counts values in `bins` equal-width bins spanning `[min, max]`; the last
/// bin is closed on the right. All mass lands in bin 0 when every value is
/// equal.
pub fn bin_counts(timestamps: &[i64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    if bins == 0 || timestamps.is_empty() {
        return counts;
    }
    let lo = *timestamps.iter().min().unwrap();
    let hi = *timestamps.iter().max().unwrap();
    let span = (hi - lo) as i128;
    for &t in timestamps {
        let b = if span == 0 {
            0
        } else {
            (((t - lo) as i128 * bins as i128) / span).min(bins as i128 - 1) as usize
        };
        counts[b] += 1;
    }
    counts
}
