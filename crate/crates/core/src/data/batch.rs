use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Example, Result};

/// A left-padded batch. Matrices are row-major `B x L`; real items are
/// right-aligned so slot `L - 1` always holds the most recent item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceBatch {
    pub batch_size: usize,
    pub max_len: usize,
    pub n_categories: usize,
    pub users: Vec<usize>,
    pub item_indices: Vec<usize>,
    pub timestamps: Vec<i64>,
    pub intervals: Vec<i64>,
    pub valid_lengths: Vec<usize>,
    pub target_index: Vec<usize>,
    /// `B x L x n_categories` multi-hot labels of the input items.
    pub target_categories: Vec<u8>,
}

impl SequenceBatch {
    pub fn is_pad(&self, b: usize, l: usize) -> bool {
        l < self.max_len - self.valid_lengths[b]
    }

    /// Row-major `B x L` mask, true at padding slots.
    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.batch_size * self.max_len).map(|i| self.is_pad(i / self.max_len, i % self.max_len)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub max_len: usize,
    /// `None` keeps example order.
    pub shuffle_seed: Option<u64>,
}

/// Packs examples into batches; the final batch may be smaller.
/// `item_categories[i]` lists the categories of item `i`.
pub fn make_batches(
    examples: &[Example],
    item_categories: &[Vec<usize>],
    n_categories: usize,
    opts: BatchOptions,
) -> Result<Vec<SequenceBatch>> {
    if opts.batch_size == 0 || opts.max_len == 0 {
        return Err(DataError::Invalid("batch size and sequence length must be positive".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(seed) = opts.shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(opts.batch_size).map(|chunk| pack(examples, chunk, item_categories, n_categories, opts.max_len)).collect()
}

fn pack(
    examples: &[Example],
    chunk: &[usize],
    item_categories: &[Vec<usize>],
    n_categories: usize,
    l: usize,
) -> Result<SequenceBatch> {
    let b = chunk.len();
    let mut batch = SequenceBatch {
        batch_size: b,
        max_len: l,
        n_categories,
        users: Vec::with_capacity(b),
        item_indices: vec![0; b * l],
        timestamps: vec![0; b * l],
        intervals: vec![0; b * l],
        valid_lengths: Vec::with_capacity(b),
        target_index: Vec::with_capacity(b),
        target_categories: vec![0; b * l * n_categories],
    };
    for (row, &e) in chunk.iter().enumerate() {
        let ex = &examples[e];
        if ex.target == 0 || ex.items.contains(&0) {
            return Err(DataError::Invalid(format!("example {e} uses the padding index")));
        }
        let start = ex.items.len().saturating_sub(l);
        let items = &ex.items[start..];
        let times = &ex.timestamps[start..];
        let offset = l - items.len();
        for (k, (&item, &t)) in items.iter().zip(times).enumerate() {
            let slot = row * l + offset + k;
            batch.item_indices[slot] = item;
            batch.timestamps[slot] = t;
            batch.intervals[slot] = if k == 0 { 0 } else { t - times[k - 1] };
            for &c in item_categories.get(item).map_or(&[][..], Vec::as_slice) {
                if c < n_categories {
                    batch.target_categories[slot * n_categories + c] = 1;
                }
            }
        }
        batch.users.push(ex.user);
        batch.valid_lengths.push(items.len());
        batch.target_index.push(ex.target);
    }
    Ok(batch)
}
