#![allow(dead_code)]

use hmrec::data::synth::{generate, SynthConfig};
use hmrec::data::{Dataset, SequenceBatch};
use hmrec::diagnostics;
use hmrec::model::Model;
use hmrec::tensor::GradCheckReport;
use hmrec::Config;

#[allow(unused_imports)]
pub use hmrec::diagnostics::{tiny_config, tiny_dataset};

pub fn train_batches(ds: &Dataset, cfg: &Config) -> Vec<SequenceBatch> {
    diagnostics::train_batches(ds, cfg).unwrap()
}

pub fn tiny_batch(ds: &Dataset, cfg: &Config) -> SequenceBatch {
    diagnostics::tiny_batch(ds, cfg).unwrap()
}

/// Finite-difference check of the total loss over every trainable tensor.
pub fn check_model(model: &Model<f64>, batch: &SequenceBatch, tol: f64) -> GradCheckReport {
    diagnostics::model_grad_check(model, batch, None, tol).unwrap()
}

pub fn overfit_dataset(seed: u64) -> Dataset {
    let s = generate(&SynthConfig { n_users: 50, n_items: 30, seed, ..SynthConfig::default() }).unwrap();
    Dataset::build(&s.log, &s.items, Some(&s.text), Some(&s.image)).unwrap()
}
