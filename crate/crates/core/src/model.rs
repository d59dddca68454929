//! The full recommender: item representation, the two mixtures, one
//! encoder per modality, catalog scoring and the combined objective.

use crate::config::{CatalogSide, Config};
use crate::data::{Dataset, SequenceBatch};
use crate::encoder::{score_items, Encoder, EncoderSettings, Linear};
use crate::init::Init;
use crate::modality::Modality;
use crate::moe::{interval_positions, InteractiveMoe, TemporalMoe, TimeInputs};
use crate::objectives::{self, LossBreakdown};
use crate::repr::{FrozenFeatures, ItemRepr};
use crate::tensor::{splitmix64, ParamStore, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

const SECONDS_PER_DAY: f64 = 86_400.0;

/// Identifies one optimisation step; keys placeholder sampling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepKey {
    pub epoch: u64,
    pub step: u64,
}

/// Intermediate results of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Initial item vectors (before positions), zero for disabled streams.
    pub x: [Var; 3],
    /// After the interactive mixture.
    pub interacted: [Var; 3],
    /// Encoder inputs (after the temporal mixture when enabled).
    pub sequence: [Var; 3],
    pub gate: Option<Var>,
    pub states: [Option<Var>; 3],
    pub pad: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: Config,
    pub params: ParamStore<T>,
    pub repr: ItemRepr,
    pub imoe: Option<InteractiveMoe>,
    pub tmoe: Option<TemporalMoe>,
    pub encoders: [Option<Encoder>; 3],
    pub cp_head: Option<Linear>,
    pub pcl_heads: [Option<Linear>; 3],
    pub features: FrozenFeatures<T>,
    pub n_items: usize,
    pub n_categories: usize,
    pub time_origin: i64,
    active: [bool; 3],
}

fn feature_tensor<T: Scalar>(m: &crate::data::FeatureMatrix) -> Result<Tensor<T>> {
    Ok(Tensor::new(vec![m.rows(), m.dim], m.data.iter().map(|&x| T::of(x as f64)).collect())?)
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &Config, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let n_items = dataset.n_items();
        if n_items == 0 {
            return Err(Error::Invalid("dataset has no items".into()));
        }
        for (on, want, got, what) in [
            (cfg.enable_text, cfg.d_txt, dataset.text.dim, "d_txt"),
            (cfg.enable_image, cfg.d_img, dataset.image.dim, "d_img"),
        ] {
            if on && want != 0 && want != got {
                return Err(Error::Invalid(format!("{what} = {want} but the feature file has width {got}")));
            }
        }
        let active = [true, cfg.enable_text, cfg.enable_image];
        let d = cfg.d;
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, cfg.seed, cfg.init_std);
        let repr = ItemRepr::register(
            &mut init,
            n_items,
            d,
            cfg.max_len,
            cfg.enable_text.then_some(dataset.text.dim),
            cfg.enable_image.then_some(dataset.image.dim),
        )?;
        let imoe = cfg
            .enable_imoe
            .then(|| InteractiveMoe::register(&mut init, d, cfg.k1, cfg.alpha_init, active))
            .transpose()?;
        let tmoe = cfg
            .enable_tmoe
            .then(|| TemporalMoe::register(&mut init, d, cfg.k2, cfg.p_max, cfg.freq, cfg.time_variant))
            .transpose()?;
        let mut encoders = [None, None, None];
        for m in Modality::ALL {
            if active[m.index()] {
                encoders[m.index()] = Some(Encoder::register(&mut init, &format!("enc.{}", m.name()), d, cfg.n_layers)?);
            }
        }
        let n_categories = dataset.n_categories;
        let cp_head = (cfg.enable_cp && n_categories > 0)
            .then(|| Linear::register_named(&mut init, "cp", 3 * d, n_categories))
            .transpose()?;
        let mut pcl_heads = [None, None, None];
        if cfg.enable_pcl && cfg.enable_tmoe {
            for m in [Modality::Text, Modality::Image] {
                if active[m.index()] {
                    pcl_heads[m.index()] = Some(Linear::register_named(&mut init, &format!("pcl.{}", m.name()), 2 * d, d)?);
                }
            }
        }
        let features = FrozenFeatures { text: feature_tensor(&dataset.text)?, image: feature_tensor(&dataset.image)? };
        Ok(Self {
            config: cfg,
            params,
            repr,
            imoe,
            tmoe,
            encoders,
            cp_head,
            pcl_heads,
            features,
            n_items,
            n_categories,
            time_origin: dataset.time_origin,
            active,
        })
    }

    pub fn is_active(&self, m: Modality) -> bool {
        self.active[m.index()]
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            repr: self.repr.clone(),
            imoe: self.imoe.clone(),
            tmoe: self.tmoe.clone(),
            encoders: self.encoders.clone(),
            cp_head: self.cp_head,
            pcl_heads: self.pcl_heads,
            features: FrozenFeatures { text: self.features.text.cast(), image: self.features.image.cast() },
            n_items: self.n_items,
            n_categories: self.n_categories,
            time_origin: self.time_origin,
            active: self.active,
        }
    }

    pub fn encoder_settings(&self) -> EncoderSettings {
        EncoderSettings { n_heads: self.config.n_heads, dropout: self.config.dropout, causal: self.config.causal }
    }

    pub fn time_inputs(&self, batch: &SequenceBatch) -> TimeInputs {
        let pad = batch.pad_mask();
        let days = batch
            .timestamps
            .iter()
            .zip(&pad)
            .map(|(&t, &p)| if p { 0.0 } else { (t - self.time_origin) as f64 / SECONDS_PER_DAY })
            .collect();
        TimeInputs {
            batch: batch.batch_size,
            len: batch.max_len,
            positions: interval_positions(&batch.intervals, self.config.mu, self.config.p_max),
            days,
            interval_days: batch.intervals.iter().map(|&a| a as f64 / SECONDS_PER_DAY).collect(),
        }
    }

    fn zeros(&self, tape: &mut Tape<T>, lead: &[usize]) -> Var {
        let mut shape = lead.to_vec();
        shape.push(self.config.d);
        tape.constant(Tensor::zeros(shape))
    }

    /// Initial vectors `x_m` for the given item indices; disabled streams
    /// are zero.
    pub fn item_vectors(&self, tape: &mut Tape<T>, indices: &[usize], shape: &[usize]) -> Result<[Var; 3]> {
        let x = self.repr.project_features(tape, &self.params, &self.features, indices, shape)?;
        let mut out = [x[0].expect("id stream"), x[0].unwrap(), x[0].unwrap()];
        for m in [Modality::Text, Modality::Image] {
            out[m.index()] = match x[m.index()] {
                Some(v) => v,
                None => self.zeros(tape, shape),
            };
        }
        Ok(out)
    }

    pub fn forward(&self, tape: &mut Tape<T>, batch: &SequenceBatch) -> Result<Forward> {
        if batch.max_len != self.config.max_len {
            return Err(Error::Invalid(format!(
                "batch length {} differs from the configured L = {}",
                batch.max_len, self.config.max_len
            )));
        }
        let lead = [batch.batch_size, batch.max_len];
        let x = self.item_vectors(tape, &batch.item_indices, &lead)?;
        let mut e = x;
        for m in Modality::ALL {
            if self.active[m.index()] {
                e[m.index()] = self.repr.add_position(tape, &self.params, x[m.index()])?;
            }
        }
        let interacted = match &self.imoe {
            Some(imoe) => imoe.forward(tape, &self.params, e)?,
            None => e,
        };
        let (sequence, gate) = match &self.tmoe {
            Some(tmoe) => {
                let time = self.time_inputs(batch);
                let gate = tmoe.gate_input(tape, &self.params, &time)?;
                (tmoe.forward(tape, &self.params, interacted, gate)?, Some(gate))
            }
            None => (interacted, None),
        };
        let pad = batch.pad_mask();
        let settings = self.encoder_settings();
        let mut states = [None, None, None];
        for m in Modality::ALL {
            if let Some(enc) = &self.encoders[m.index()] {
                states[m.index()] = Some(enc.encode(tape, &self.params, sequence[m.index()], &pad, settings, "main")?);
            }
        }
        Ok(Forward { x, interacted, sequence, gate, states, pad })
    }

    /// Catalog-side vectors of items `1..=n_items`, `[n, d]` per stream.
    pub fn catalog(&self, tape: &mut Tape<T>) -> Result<[Var; 3]> {
        let n = self.n_items;
        let x = self.item_vectors(tape, &(1..=n).collect::<Vec<_>>(), &[n])?;
        match (self.config.catalog_side, &self.imoe) {
            (CatalogSide::Interactive, Some(imoe)) => Ok(imoe.forward(tape, &self.params, x)?),
            _ => Ok(x),
        }
    }

    /// `[B, n_items]` scores; column `v - 1` belongs to item `v`.
    pub fn scores(&self, tape: &mut Tape<T>, fwd: &Forward) -> Result<Var> {
        let catalog = self.catalog(tape)?;
        let pairs: Vec<(Var, Var)> =
            Modality::ALL.iter().filter_map(|m| fwd.states[m.index()].map(|h| (h, catalog[m.index()]))).collect();
        Ok(score_items(tape, &pairs)?)
    }

    /// Scores without recording gradients or applying dropout.
    pub fn predict(&self, batch: &SequenceBatch) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let fwd = self.forward(&mut tape, batch)?;
        let s = self.scores(&mut tape, &fwd)?;
        Ok(tape.value(s).clone())
    }

    fn pcl_seed(&self, key: StepKey) -> u64 {
        splitmix64(splitmix64(splitmix64(self.config.seed ^ 0x5043_4c00) ^ key.epoch) ^ key.step)
    }

    /// Total objective of one batch and its components.
    pub fn loss(&self, tape: &mut Tape<T>, batch: &SequenceBatch, key: StepKey) -> Result<(Var, LossBreakdown)> {
        let cfg = &self.config;
        let fwd = self.forward(tape, batch)?;
        let scores = self.scores(tape, &fwd)?;
        let targets: Vec<usize> = batch.target_index.iter().map(|&t| t - 1).collect();
        let main = objectives::main_loss(tape, scores, &targets)?;

        let cp = match &self.cp_head {
            Some(head) => {
                let cat = tape.concat(&fwd.x)?;
                let logits = head.apply(tape, &self.params, cat)?;
                let valid: Vec<bool> = fwd.pad.iter().map(|p| !p).collect();
                Some(objectives::cp_loss(tape, logits, &batch.target_categories, &valid)?)
            }
            None => None,
        };

        let idcl = if cfg.enable_idcl {
            let h = fwd.states[Modality::Id.index()].expect("id encoder");
            let table = tape.param(&self.params, self.repr.id_table);
            let pos = tape.embedding(table, batch.target_index.clone(), vec![batch.batch_size])?;
            Some(objectives::info_nce(tape, h, pos, cfg.tau)?)
        } else {
            None
        };

        let pcl = self.pcl(tape, batch, &fwd, key)?;

        let total = objectives::total_loss(tape, main, [(cp, cfg.lambda1), (idcl, cfg.lambda2), (pcl, cfg.lambda3)])?;
        let val = |tape: &Tape<T>, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
        let breakdown = LossBreakdown {
            main: val(tape, Some(main)),
            cp: val(tape, cp),
            idcl: val(tape, idcl),
            pcl: val(tape, pcl),
            total: val(tape, Some(total)),
            lambda1: if cp.is_some() { cfg.lambda1 } else { 0.0 },
            lambda2: if idcl.is_some() { cfg.lambda2 } else { 0.0 },
            lambda3: if pcl.is_some() { cfg.lambda3 } else { 0.0 },
        };
        Ok((total, breakdown))
    }

    /// Mean over text and image of the contrast between each encoded
    /// sequence and a copy with some slots replaced by time placeholders.
    fn pcl(&self, tape: &mut Tape<T>, batch: &SequenceBatch, fwd: &Forward, key: StepKey) -> Result<Option<Var>> {
        let Some(gate) = fwd.gate else { return Ok(None) };
        let slots = objectives::placeholder_slots(&batch.valid_lengths, batch.max_len, self.config.beta, self.pcl_seed(key));
        let settings = self.encoder_settings();
        let mut terms = Vec::new();
        for m in [Modality::Text, Modality::Image] {
            let (Some(head), Some(enc), Some(h)) =
                (&self.pcl_heads[m.index()], &self.encoders[m.index()], fwd.states[m.index()])
            else {
                continue;
            };
            let placeholder = head.apply(tape, &self.params, gate)?;
            let aug = objectives::replace_slots(tape, fwd.sequence[m.index()], placeholder, &slots)?;
            let h_aug = enc.encode(tape, &self.params, aug, &fwd.pad, settings, "aug")?;
            terms.push(objectives::info_nce(tape, h, h_aug, 1.0)?);
        }
        match terms.as_slice() {
            [] => Ok(None),
            [one] => Ok(Some(*one)),
            [a, b] => {
                let s = tape.add(*a, *b)?;
                Ok(Some(tape.scale(s, 0.5)?))
            }
            _ => unreachable!("at most two contrasted streams"),
        }
    }
}
