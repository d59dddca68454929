mod common;

use common::*;
use hmrec::checkpoint;
use hmrec::data::synth::{generate, SynthConfig};
use hmrec::data::{Dataset, LoadOptions, IMG_FEATURES_FILE};
use hmrec::tensor::{ParamStore, Tensor};
use hmrec::train::{clip_grad_norm, evaluate, run, Adam, Trainer, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE};
use hmrec::{Config, Error, Model, Variant};

fn small_config() -> Config {
    Config { d: 16, max_len: 8, n_layers: 1, batch_size: 64, epochs: 3, ..Config::default() }
}

fn bits(store: &ParamStore<f32>) -> Vec<Vec<u32>> {
    store.iter().map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect()).collect()
}

fn store_with(values: &[f64], grads: &[f64]) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::from_f64(vec![values.len()], values).unwrap(), true).unwrap();
    store.get_mut(id).grad = Some(Tensor::from_f64(vec![grads.len()], grads).unwrap());
    store
}

#[test]
fn adam_ignores_zero_gradients() {
    let mut store = store_with(&[0.5, -1.25, 3.0], &[0.0, 0.0, 0.0]);
    let before = store.clone();
    let mut adam = Adam::new(&store, 1e-3);
    for _ in 0..5 {
        adam.update(&mut store);
    }
    assert_eq!(adam.step, 5);
    assert_eq!(store.value(store.id("w").unwrap()), before.value(before.id("w").unwrap()));
}

#[test]
fn adam_first_steps_match_hand_computation() {
    let g = [0.3, -2.0];
    let mut store = store_with(&[1.0, 1.0], &g);
    let mut adam = Adam::new(&store, 0.01);
    adam.update(&mut store);
    adam.update(&mut store);
    // Constant gradient: bias-corrected moments equal g and g^2 at every step.
    let w = store.value(store.id("w").unwrap()).data().to_vec();
    for (wi, gi) in w.iter().zip(g) {
        let step = 0.01 * gi / (gi.abs() + 1e-8);
        assert!((wi - (1.0 - 2.0 * step)).abs() < 1e-12);
    }
}

#[test]
fn clipping_rescales_to_the_global_norm() {
    let mut store = store_with(&[0.0, 0.0], &[3.0, 4.0]);
    assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
    let g = store.get(store.id("w").unwrap()).grad.clone().unwrap();
    assert!((g.data()[0] - 0.6).abs() < 1e-12 && (g.data()[1] - 0.8).abs() < 1e-12);
    let mut store = store_with(&[0.0, 0.0], &[3.0, 4.0]);
    clip_grad_norm(&mut store, 0.0);
    assert_eq!(store.get(store.id("w").unwrap()).grad.as_ref().unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let ds = overfit_dataset(2);
    let mut tr = Trainer::new(&Config { lr: 0.0, ..small_config() }, &ds).unwrap();
    let before = bits(&tr.model.params);
    let br = tr.train_epoch().unwrap();
    assert!(br.main > 0.0);
    assert_eq!(bits(&tr.model.params), before);
}

#[test]
fn seeded_training_is_reproducible() {
    let ds = overfit_dataset(4);
    let cfg = Config { dropout: 0.2, ..small_config() };
    let go = || {
        let mut tr = Trainer::new(&cfg, &ds).unwrap();
        let out = tr.fit(|_| Ok(())).unwrap();
        let losses: Vec<u64> = out.reports.iter().map(|r| r.loss.total.to_bits()).collect();
        (losses, out.test, bits(&tr.model.params))
    };
    assert_eq!(go(), go());
}

#[test]
fn fit_keeps_the_best_validation_parameters() {
    let ds = overfit_dataset(5);
    let mut tr = Trainer::new(&Config { epochs: 6, patience: 2, lr: 5e-3, ..small_config() }, &ds).unwrap();
    let out = tr.fit(|_| Ok(())).unwrap();
    let best = out.reports.iter().map(|r| r.ranking.ndcg10).fold(f64::MIN, f64::max);
    assert_eq!(out.best_valid.ndcg10, best);
    assert_eq!(out.reports[out.best_epoch].ranking, out.best_valid);
    assert_eq!(tr.evaluate(&tr.splits.valid.clone()).unwrap(), out.best_valid);
    assert!(out.reports.len() <= 6);
}

#[test]
fn run_writes_a_restorable_checkpoint() {
    let ds = overfit_dataset(6);
    let dir = tempfile::tempdir().unwrap();
    let cfg = Config { epochs: 2, ..small_config() };
    let mut seen = 0;
    let (out, model) = run(&cfg, &ds, dir.path(), |_| seen += 1).unwrap();
    assert_eq!(seen, out.reports.len() + 1);

    let lines = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let rows: Vec<serde_json::Value> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r["ndcg@10"].is_number() && r["main"].is_number()));
    assert_eq!(rows[2]["split"], "test");

    let saved = Config::load(&dir.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(saved, cfg);
    let mut restored: Model<f32> = Model::new(&saved, &ds).unwrap();
    checkpoint::load(&mut restored.params, &dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(bits(&restored.params), bits(&model.params));
    assert_eq!(checkpoint::to_bytes(&restored.params), checkpoint::to_bytes(&model.params));

    let splits = &Trainer::new(&cfg, &ds).unwrap().splits;
    let a = evaluate(&model, &ds, &splits.test, 64).unwrap();
    let b = evaluate(&restored, &ds, &splits.test, 64).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, out.test);
}

#[test]
fn truncated_checkpoint_leaves_the_model_untouched() {
    let ds = overfit_dataset(6);
    let model: Model<f32> = Model::new(&small_config(), &ds).unwrap();
    let bytes = checkpoint::to_bytes(&model.params);
    let mut other: Model<f32> = Model::new(&Config { seed: 99, ..small_config() }, &ds).unwrap();
    let before = bits(&other.params);
    for cut in [bytes.len() - 1, bytes.len() / 2, 10] {
        let entries = checkpoint::parse(&bytes[..cut]);
        assert!(entries.is_err(), "cut at {cut} accepted");
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(checkpoint::load(&mut other.params, &path).is_err());
    assert_eq!(bits(&other.params), before);
}

#[test]
fn image_ablation_never_opens_the_image_file() {
    let dir = tempfile::tempdir().unwrap();
    generate(&SynthConfig { seed: 8, ..SynthConfig::default() }).unwrap().write(dir.path()).unwrap();
    std::fs::remove_file(dir.path().join(IMG_FEATURES_FILE)).unwrap();
    assert!(Dataset::load(dir.path(), LoadOptions::default()).is_err());
    let ds = Dataset::load(dir.path(), LoadOptions { text: true, image: false }).unwrap();
    let mut cfg = small_config();
    cfg.apply_variant(Variant::NoImage);
    let mut tr = Trainer::new(&cfg, &ds).unwrap();
    assert!(tr.train_epoch().unwrap().is_finite());
}

#[test]
fn non_finite_loss_aborts_with_the_batch() {
    let ds = overfit_dataset(9);
    let mut tr = Trainer::new(&small_config(), &ds).unwrap();
    let id = tr.model.params.id("cp.bias").unwrap();
    tr.model.params.value_mut(id).data_mut()[0] = f32::NAN;
    match tr.train_epoch() {
        Err(Error::NonFinite { epoch: 0, batch: 0, breakdown }) => assert!(breakdown.cp.is_nan()),
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn empty_split_cannot_be_evaluated() {
    let ds = overfit_dataset(9);
    let model: Model<f32> = Model::new(&small_config(), &ds).unwrap();
    assert!(evaluate(&model, &ds, &[], 8).is_err());
}
