//! Adam, the epoch loop with early stopping, evaluation and run outputs.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::checkpoint;
use crate::config::Config;
use crate::data::{make_batches, split_leave_one_out, BatchOptions, Dataset, Example, SplitOptions, Splits};
use crate::metrics::{rank_of, MetricsReport, RankingMetrics};
use crate::model::{Model, StepKey};
use crate::objectives::LossBreakdown;
use crate::tensor::{splitmix64, DropoutContext, ParamStore, Scalar, Tape};
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "run.cfg";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update from the gradients accumulated in `store`.
    pub fn update(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powf(self.step as f64));
        let c2 = T::of(1.0 - self.beta2.powf(self.step as f64));
        let (lr, eps, one) = (T::of(self.lr), T::of(self.eps), T::one());
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = &p.grad else { continue };
            for (i, (w, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Scales every accumulated gradient so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let sq: f64 = store
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.data().iter().map(|x| x.as_f64() * x.as_f64()))
        .sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for p in store.iter_mut() {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|x| *x = *x * s);
            }
        }
    }
    norm
}

/// Ranks the target of every example against the whole catalog.
pub fn evaluate<T: Scalar>(model: &Model<T>, dataset: &Dataset, examples: &[Example], batch_size: usize) -> Result<RankingMetrics> {
    if examples.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty split".into()));
    }
    let batches = make_batches(
        examples,
        &dataset.item_categories,
        dataset.n_categories,
        BatchOptions { batch_size, max_len: model.config.max_len, shuffle_seed: None },
    )?;
    let mut ranks = Vec::with_capacity(examples.len());
    for batch in &batches {
        let scores = model.predict(batch)?;
        let n = scores.last_dim();
        for (r, &target) in batch.target_index.iter().enumerate() {
            let row: Vec<f64> = scores.data()[r * n..(r + 1) * n].iter().map(|x| x.as_f64()).collect();
            ranks.push(rank_of(&row, target - 1));
        }
    }
    Ok(RankingMetrics::from_ranks(&ranks))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub reports: Vec<MetricsReport>,
    pub best_epoch: usize,
    pub best_valid: RankingMetrics,
    pub test: RankingMetrics,
}

/// Training state over one dataset.
pub struct Trainer<'a> {
    pub model: Model<f32>,
    pub dataset: &'a Dataset,
    pub splits: Splits,
    pub adam: Adam<f32>,
    pub epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &Config, dataset: &'a Dataset) -> Result<Self> {
        let model = Model::new(config, dataset)?;
        let splits = split_leave_one_out(
            &dataset.sequences,
            SplitOptions { max_len: config.max_len, per_target: config.per_target },
        )?;
        if splits.train.is_empty() {
            return Err(Error::Invalid("no training examples: every user needs at least 4 interactions".into()));
        }
        let adam = Adam::new(&model.params, config.lr);
        Ok(Self { model, dataset, splits, adam, epoch: 0 })
    }

    pub fn config(&self) -> &Config {
        &self.model.config
    }

    /// One pass over shuffled training batches. Returns the example-weighted
    /// mean loss breakdown.
    pub fn train_epoch(&mut self) -> Result<LossBreakdown> {
        let cfg = self.model.config.clone();
        let epoch = self.epoch;
        let batches = make_batches(
            &self.splits.train,
            &self.dataset.item_categories,
            self.dataset.n_categories,
            BatchOptions {
                batch_size: cfg.batch_size,
                max_len: cfg.max_len,
                shuffle_seed: Some(splitmix64(cfg.seed ^ splitmix64(epoch as u64))),
            },
        )?;
        let mut sum = LossBreakdown::default();
        let mut seen = 0usize;
        for (step, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new(DropoutContext::train(cfg.seed, epoch as u64, step as u64));
            let key = StepKey { epoch: epoch as u64, step: step as u64 };
            let (loss, br) = self.model.loss(&mut tape, batch, key)?;
            if !br.is_finite() {
                return Err(Error::NonFinite { epoch, batch: step, breakdown: br });
            }
            let grads = tape.backward(loss)?;
            let params = &mut self.model.params;
            params.zero_grad();
            params.accumulate(&grads);
            let id_table = self.model.repr.id_table;
            let d = cfg.d;
            if let Some(g) = &mut params.get_mut(id_table).grad {
                g.data_mut()[..d].iter_mut().for_each(|x| *x = 0.0);
            }
            clip_grad_norm(params, cfg.grad_clip);
            self.adam.update(params);

            let w = batch.batch_size as f64;
            sum.main += w * br.main;
            sum.cp += w * br.cp;
            sum.idcl += w * br.idcl;
            sum.pcl += w * br.pcl;
            sum.total += w * br.total;
            (sum.lambda1, sum.lambda2, sum.lambda3) = (br.lambda1, br.lambda2, br.lambda3);
            seen += batch.batch_size;
        }
        self.epoch += 1;
        let n = seen.max(1) as f64;
        Ok(LossBreakdown {
            main: sum.main / n,
            cp: sum.cp / n,
            idcl: sum.idcl / n,
            pcl: sum.pcl / n,
            total: sum.total / n,
            ..sum
        })
    }

    pub fn evaluate(&self, examples: &[Example]) -> Result<RankingMetrics> {
        evaluate(&self.model, self.dataset, examples, self.model.config.batch_size)
    }

    /// Trains until the epoch budget runs out or validation NDCG@10 stops
    /// improving for `patience` epochs, then restores the best parameters
    /// and scores the test split. `observe` sees each epoch's report.
    pub fn fit(&mut self, mut observe: impl FnMut(&MetricsReport) -> Result<()>) -> Result<TrainOutcome> {
        let start = Instant::now();
        let cfg = self.model.config.clone();
        let mut best: Option<(usize, RankingMetrics, ParamStore<f32>)> = None;
        let mut reports = Vec::new();
        let mut stale = 0;
        for _ in 0..cfg.epochs {
            let epoch = self.epoch;
            let loss = self.train_epoch()?;
            let valid = self.evaluate(&self.splits.valid)?;
            let report = MetricsReport {
                epoch,
                split: "valid".into(),
                loss,
                ranking: valid,
                wall_time_seconds: start.elapsed().as_secs_f64(),
            };
            observe(&report)?;
            reports.push(report);
            if best.as_ref().is_none_or(|(_, b, _)| valid.ndcg10 > b.ndcg10) {
                best = Some((epoch, valid, self.model.params.clone()));
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    break;
                }
            }
        }
        let (best_epoch, best_valid) = match best {
            Some((e, v, params)) => {
                self.model.params = params;
                (e, v)
            }
            None => (0, self.evaluate(&self.splits.valid)?),
        };
        let test = self.evaluate(&self.splits.test)?;
        Ok(TrainOutcome { reports, best_epoch, best_valid, test })
    }
}

/// Trains on `dataset` and writes `metrics.jsonl`, the best checkpoint and
/// the resolved configuration into `out`.
pub fn run(
    config: &Config,
    dataset: &Dataset,
    out: &Path,
    mut observe: impl FnMut(&MetricsReport),
) -> Result<(TrainOutcome, Model<f32>)> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::Io { path, source }
    };
    std::fs::create_dir_all(out).map_err(io(out))?;
    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = std::fs::File::create(&metrics_path).map_err(io(&metrics_path))?;
    let mut trainer = Trainer::new(config, dataset)?;
    let outcome = trainer.fit(|r| {
        let line = serde_json::to_string(r).map_err(|e| Error::Invalid(e.to_string()))?;
        writeln!(metrics, "{line}").map_err(io(&metrics_path))?;
        observe(r);
        Ok(())
    })?;
    let test = MetricsReport {
        epoch: outcome.best_epoch,
        split: "test".into(),
        loss: LossBreakdown::default(),
        ranking: outcome.test,
        wall_time_seconds: 0.0,
    };
    let line = serde_json::to_string(&test).map_err(|e| Error::Invalid(e.to_string()))?;
    writeln!(metrics, "{line}").map_err(io(&metrics_path))?;
    observe(&test);
    checkpoint::save(&trainer.model.params, &out.join(CHECKPOINT_FILE))?;
    trainer.model.config.save(&out.join(CONFIG_FILE))?;
    Ok((outcome, trainer.model))
}
