//! A tiny deterministic model for finite-difference gradient checks.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    make_batches, split_leave_one_out, BatchOptions, Dataset, FeatureTable, Interaction, InteractionLog, ItemMeta,
    SequenceBatch, SplitOptions,
};
use crate::model::{Model, StepKey};
use crate::tensor::{grad_check, GradCheckReport, TensorError};
use crate::{Config, Error, Result};

/// Parameter-name prefixes accepted by [`tiny_grad_check`].
pub const MODULES: [&str; 6] = ["item", "imoe", "tmoe", "enc", "cp", "pcl"];

pub const FINITE_DIFFERENCE_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// 20 items over 3 categories, 8 users with 5 to 8 interactions each and
/// intervals of up to two minutes, so interval positions stay below 500.
pub fn tiny_dataset() -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n_items = 20;
    let tok = |i: usize| format!("i{i:02}");
    let mut interactions = Vec::new();
    for u in 0..8 {
        let len = 5 + u % 4;
        let mut t = 1_000 + rng.random_range(0..50);
        for _ in 0..len {
            interactions.push(Interaction { user: format!("u{u}"), item: tok(rng.random_range(0..n_items)), timestamp: t });
            t += [0, 1, 3, 20, 75, 120][rng.random_range(0..6)];
        }
    }
    // One user touches every item so the catalog has all 20.
    for i in 0..n_items {
        interactions.push(Interaction { user: "u_all".into(), item: tok(i), timestamp: 5_000 + 7 * i as i64 });
    }
    let log = InteractionLog::from_interactions(interactions);
    let items: Vec<ItemMeta> = (0..n_items)
        .map(|i| ItemMeta { item: tok(i), categories: [i % 3, (i / 3) % 3].into_iter().collect() })
        .collect();
    let mut feats = || {
        let rows = (0..n_items).map(|i| (tok(i), (0..4).map(|_| rng.random_range(-1.0..1.0f32)).collect())).collect();
        FeatureTable::new(4, rows).expect("rows have the declared width")
    };
    let text = feats();
    let image = feats();
    Dataset::build(&log, &items, Some(&text), Some(&image)).expect("tiny dataset is well formed")
}

/// d = 8, L = 6, two experts per mixture, one single-head layer, no dropout.
pub fn tiny_config() -> Config {
    Config {
        d: 8,
        max_len: 6,
        k1: 2,
        k2: 2,
        n_layers: 1,
        n_heads: 1,
        dropout: 0.0,
        p_max: 512,
        init_std: 0.3,
        batch_size: 6,
        ..Config::default()
    }
}

/// Training batches in a fixed shuffled order.
pub fn train_batches(dataset: &Dataset, config: &Config) -> Result<Vec<SequenceBatch>> {
    let splits = split_leave_one_out(
        &dataset.sequences,
        SplitOptions { max_len: config.max_len, per_target: config.per_target },
    )?;
    Ok(make_batches(
        &splits.train,
        &dataset.item_categories,
        dataset.n_categories,
        BatchOptions { batch_size: config.batch_size, max_len: config.max_len, shuffle_seed: Some(3) },
    )?)
}

/// The first full training batch that mixes padded and unpadded rows.
pub fn tiny_batch(dataset: &Dataset, config: &Config) -> Result<SequenceBatch> {
    train_batches(dataset, config)?
        .into_iter()
        .find(|b| b.batch_size == config.batch_size && b.valid_lengths.iter().any(|&v| v < config.max_len))
        .ok_or_else(|| Error::Invalid("no full batch with padding".into()))
}

/// Checks the total loss on `batch` against central differences for every
/// trainable tensor whose name starts with `prefix` (all when `None`).
pub fn model_grad_check(
    model: &Model<f64>,
    batch: &SequenceBatch,
    prefix: Option<&str>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let scratch = RefCell::new(model.clone());
    let mut params = model.params.clone();
    if let Some(prefix) = prefix {
        for p in params.iter_mut() {
            if p.name.split('.').next() != Some(prefix) {
                p.grad = None;
            }
        }
    }
    let report = grad_check(
        |tape, p| {
            let mut m = scratch.borrow_mut();
            m.params.copy_values_from(p)?;
            let (loss, _) = m.loss(tape, batch, StepKey::default()).map_err(|e| TensorError::Invalid(e.to_string()))?;
            Ok(loss)
        },
        &mut params,
        FINITE_DIFFERENCE_STEP,
        tolerance,
    )?;
    Ok(report)
}

/// Builds the tiny model and checks the tensors of `module` (or all).
pub fn tiny_grad_check(module: Option<&str>) -> Result<GradCheckReport> {
    if let Some(m) = module {
        if !MODULES.contains(&m) {
            return Err(Error::Invalid(format!("unknown module `{m}`, expected one of {}", MODULES.join(", "))));
        }
    }
    let dataset = tiny_dataset();
    let config = tiny_config();
    let batch = tiny_batch(&dataset, &config)?;
    let model = Model::new(&config, &dataset)?;
    model_grad_check(&model, &batch, module, TOLERANCE)
}
