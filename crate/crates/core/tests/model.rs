mod common;

use common::*;
use hmrec::config::TimeVariant;
use hmrec::model::{Model, StepKey};
use hmrec::modality::Modality;
use hmrec::tensor::{DropoutContext, Gradients, Tape, Tensor};
use hmrec::train::Trainer;
use hmrec::{Config, Variant};

fn f64_model(cfg: &Config) -> (Model<f64>, hmrec::data::SequenceBatch) {
    let ds = tiny_dataset();
    let batch = tiny_batch(&ds, cfg);
    (Model::new(cfg, &ds).unwrap(), batch)
}

fn set(model: &mut Model<f64>, name: &str, f: impl Fn(usize) -> f64) {
    let id = model.params.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    model.params.value_mut(id).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
}

#[test]
fn constant_projection_gives_its_bias() {
    let cfg = tiny_config();
    let (mut model, batch) = f64_model(&cfg);
    set(&mut model, "item.txt.weight", |_| 0.0);
    set(&mut model, "item.txt.bias", |i| i as f64 - 2.5);
    let mut tape = Tape::new(DropoutContext::eval());
    let x = model.item_vectors(&mut tape, &batch.item_indices, &[batch.batch_size, batch.max_len]).unwrap();
    let x = tape.value(x[Modality::Text.index()]);
    for r in 0..x.rows() {
        assert_eq!(x.row(r), &[-2.5, -1.5, -0.5, 0.5, 1.5, 2.5, 3.5, 4.5]);
    }
}

#[test]
fn identity_projection_returns_stored_features() {
    let cfg = Config { d: 4, n_heads: 1, ..tiny_config() };
    let (mut model, _) = f64_model(&cfg);
    set(&mut model, "item.img.weight", |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    set(&mut model, "item.img.bias", |_| 0.0);
    let mut tape = Tape::new(DropoutContext::eval());
    let idx = vec![3, 0, 17];
    let x = model.item_vectors(&mut tape, &idx, &[3]).unwrap();
    let x = tape.value(x[Modality::Image.index()]);
    for (r, &i) in idx.iter().enumerate() {
        assert_eq!(x.row(r), model.features.image.row(i));
    }
    assert!(x.row(1).iter().all(|&v| v == 0.0));
}

#[test]
fn out_of_range_item_is_rejected() {
    let (model, _) = f64_model(&tiny_config());
    let mut tape = Tape::new(DropoutContext::eval());
    assert!(model.item_vectors(&mut tape, &[21], &[1]).is_err());
}

#[test]
fn positions_are_an_additive_shift() {
    let cfg = tiny_config();
    let (mut model, _) = f64_model(&cfg);
    let mut tape = Tape::new(DropoutContext::eval());
    let x = tape.constant(Tensor::zeros(vec![2, 6, 8]));
    let e = model.repr.add_position(&mut tape, &model.params, x).unwrap();
    let pos = model.params.by_name("item.pos_table").unwrap().value.clone();
    for b in 0..2 {
        for i in 0..6 {
            assert_eq!(tape.value(e).row(b * 6 + i), pos.row(i));
        }
    }
    set(&mut model, "item.pos_table", |_| 0.0);
    let mut tape = Tape::new(DropoutContext::eval());
    let x = tape.constant(Tensor::full(vec![1, 6, 8], 0.75));
    let e = model.repr.add_position(&mut tape, &model.params, x).unwrap();
    assert_eq!(tape.value(e), tape.value(x));
}

#[test]
fn frozen_features_and_padding_row_survive_training() {
    let ds = overfit_dataset(3);
    let cfg = Config { d: 16, max_len: 8, n_layers: 1, batch_size: 64, ..Config::default() };
    let mut tr = Trainer::new(&cfg, &ds).unwrap();
    let before = tr.model.features.clone();
    let id_table = tr.model.repr.id_table;
    tr.train_epoch().unwrap();
    tr.train_epoch().unwrap();
    assert_eq!(tr.model.features.text, before.text);
    assert_eq!(tr.model.features.image, before.image);
    assert!(tr.model.params.value(id_table).row(0).iter().all(|&v| v == 0.0));
    assert!(tr.model.params.iter().all(|(_, p)| !p.name.contains("feature")));
}

#[test]
fn loss_ignores_pad_slot_timestamps() {
    let cfg = Config { dropout: 0.3, ..tiny_config() };
    let (model, batch) = f64_model(&cfg);
    let key = StepKey { epoch: 1, step: 2 };
    let loss = |b: &hmrec::data::SequenceBatch| {
        let mut tape = Tape::new(DropoutContext::train(4, 1, 2));
        model.loss(&mut tape, b, key).unwrap().1
    };
    let mut moved = batch.clone();
    for i in 0..moved.timestamps.len() {
        if moved.item_indices[i] == 0 {
            moved.timestamps[i] = 987_654_321 + i as i64;
        }
    }
    assert_eq!(loss(&batch), loss(&moved));
}

#[test]
fn both_time_variant_is_the_default_path() {
    let default = tiny_config();
    let explicit = Config::parse(&format!("{default}\ntime_variant = both\n")).unwrap();
    let (a, batch) = f64_model(&default);
    let (b, _) = f64_model(&explicit);
    let run = |m: &Model<f64>| {
        let mut tape = Tape::new(DropoutContext::eval());
        let (l, br) = m.loss(&mut tape, &batch, StepKey::default()).unwrap();
        (tape.value(l).item().to_bits(), br)
    };
    assert_eq!(run(&a), run(&b));

    let tmoe = a.tmoe.as_ref().unwrap();
    let time = a.time_inputs(&batch);
    let mut tape = Tape::new(DropoutContext::eval());
    let gate = tmoe.gate_input(&mut tape, &a.params, &time).unwrap();
    let r1 = tmoe.interval_embedding(&mut tape, &a.params, &time).unwrap().unwrap();
    let r2 = tmoe.absolute_embedding(&mut tape, &a.params, &time).unwrap().unwrap();
    let manual = tape.concat(&[r1, r2]).unwrap();
    assert_eq!(tape.value(gate), tape.value(manual));
}

#[test]
fn every_time_variant_gradient_checks() {
    for variant in [TimeVariant::IntervalOnly, TimeVariant::AbsoluteOnly, TimeVariant::CosInterval] {
        let cfg = Config { time_variant: variant, p_max: 8, mu: 1.0, ..tiny_config() };
        let (model, batch) = f64_model(&cfg);
        let report = check_model(&model, &batch, 1e-4);
        let worst = report.worst().unwrap();
        assert!(report.passed(), "{variant:?}: {} {:.3e}", worst.name, worst.max_rel_error);
    }
}

fn grads(model: &Model<f64>, batch: &hmrec::data::SequenceBatch) -> (Gradients<f64>, hmrec::objectives::LossBreakdown) {
    let mut tape = Tape::new(DropoutContext::train(9, 0, 0));
    let (loss, br) = model.loss(&mut tape, batch, StepKey::default()).unwrap();
    (tape.backward(loss).unwrap(), br)
}

#[test]
fn zero_weight_matches_the_skipped_term() {
    let base = Config { dropout: 0.2, ..tiny_config() };
    for (variant, zeroed) in [
        (Variant::NoCp, Config { lambda1: 0.0, ..base.clone() }),
        (Variant::NoIdcl, Config { lambda2: 0.0, ..base.clone() }),
        (Variant::NoPcl, Config { lambda3: 0.0, ..base.clone() }),
    ] {
        let mut skipped = base.clone();
        skipped.apply_variant(variant);
        let (a, batch) = f64_model(&zeroed);
        let (b, _) = f64_model(&skipped);
        let (ga, la) = grads(&a, &batch);
        let (gb, lb) = grads(&b, &batch);
        assert_eq!(la.total, lb.total, "{variant:?}");
        let mut compared = 0;
        for (id, p) in b.params.iter() {
            let other = a.params.id(&p.name).unwrap();
            assert_eq!(a.params.value(other), &p.value);
            let (x, y) = (ga.get(other), gb.get(id));
            match (x, y) {
                (Some(x), Some(y)) => assert!(x.data() == y.data(), "{variant:?}: {}", p.name),
                (None, None) => {}
                _ => panic!("{variant:?}: {} reached in only one model", p.name),
            }
            compared += 1;
        }
        assert_eq!(compared, b.params.len());
    }
}

#[test]
fn ablations_isolate_their_term() {
    let base = Config { dropout: 0.2, ..tiny_config() };
    let (full, batch) = f64_model(&base);
    let (_, f) = grads(&full, &batch);
    let mut cfg = base.clone();
    cfg.apply_variant(Variant::NoCp);
    let (no_cp, _) = f64_model(&cfg);
    let (_, c) = grads(&no_cp, &batch);
    assert_eq!((f.main, f.idcl, f.pcl), (c.main, c.idcl, c.pcl));
    assert!(f.cp > 0.0 && c.cp == 0.0 && c.lambda1 == 0.0);

    let mut cfg = base.clone();
    cfg.apply_variant(Variant::NoTmoe);
    let (no_t, _) = f64_model(&cfg);
    let (_, t) = grads(&no_t, &batch);
    assert_eq!((t.pcl, t.lambda3), (0.0, 0.0));
    assert!(no_t.params.iter().all(|(_, p)| !p.name.starts_with("tmoe") && !p.name.starts_with("pcl")));
}

#[test]
fn disabled_modalities_drop_out_of_the_model() {
    let mut cfg = tiny_config();
    cfg.apply_variant(Variant::NoText);
    let (model, batch) = f64_model(&cfg);
    assert!(!model.is_active(Modality::Text));
    assert!(model.params.iter().all(|(_, p)| !p.name.contains(".txt")));
    let (_, br) = grads(&model, &batch);
    assert!(br.is_finite() && br.pcl > 0.0);
}

#[test]
fn beta_zero_contrast_has_unit_positive_similarity() {
    let cfg = Config { beta: 0.0, ..tiny_config() };
    let (model, batch) = f64_model(&cfg);
    let mut tape = Tape::new(DropoutContext::eval());
    let fwd = model.forward(&mut tape, &batch).unwrap();
    let slots = hmrec::objectives::placeholder_slots(&batch.valid_lengths, batch.max_len, 0.0, 5);
    for m in [Modality::Text, Modality::Image] {
        let enc = model.encoders[m.index()].as_ref().unwrap();
        let ph = tape.constant(Tensor::zeros(vec![batch.batch_size, batch.max_len, cfg.d]));
        let aug = hmrec::objectives::replace_slots(&mut tape, fwd.sequence[m.index()], ph, &slots).unwrap();
        let h_aug = enc.encode(&mut tape, &model.params, aug, &fwd.pad, model.encoder_settings(), "aug").unwrap();
        let h = fwd.states[m.index()].unwrap();
        let sim = tape.cosine_similarity(h, h_aug, 1e-12).unwrap();
        let sim = tape.value(sim);
        for i in 0..batch.batch_size {
            assert!((sim.data()[i * batch.batch_size + i] - 1.0).abs() <= 1e-6);
        }
    }
}
