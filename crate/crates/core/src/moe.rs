//! Two-level mixture of experts: cross-modal interaction experts routed by
//! each modality's own vector, then per-coordinate scaling experts routed by
//! time alone.

use crate::config::TimeVariant;
use crate::init::Init;
use crate::modality::Modality;
use crate::tensor::{ParamId, ParamStore, Result, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct InteractiveHead {
    pub router_weight: ParamId,
    pub router_bias: ParamId,
    pub expert_weights: Vec<ParamId>,
    pub expert_biases: Vec<ParamId>,
    pub alpha: ParamId,
}

/// One head per enabled target modality.
#[derive(Clone, Debug)]
pub struct InteractiveMoe {
    pub heads: [Option<InteractiveHead>; 3],
    pub d: usize,
    pub k: usize,
}

impl InteractiveMoe {
    pub(crate) fn register<T: Scalar>(
        init: &mut Init<'_, T>,
        d: usize,
        k: usize,
        alpha: f64,
        active: [bool; 3],
    ) -> Result<Self> {
        let mut heads = [None, None, None];
        for m in Modality::ALL {
            if !active[m.index()] {
                continue;
            }
            let p = format!("imoe.{}", m.name());
            let router_weight = init.normal(format!("{p}.router.weight"), &[d, k])?;
            let router_bias = init.constant(format!("{p}.router.bias"), &[k], 0.0)?;
            let mut expert_weights = Vec::with_capacity(k);
            let mut expert_biases = Vec::with_capacity(k);
            for i in 0..k {
                expert_weights.push(init.normal(format!("{p}.expert.{i}.weight"), &[3 * d, d])?);
                expert_biases.push(init.constant(format!("{p}.expert.{i}.bias"), &[d], 0.0)?);
            }
            let alpha = init.constant(format!("{p}.alpha"), &[1], alpha)?;
            heads[m.index()] = Some(InteractiveHead { router_weight, router_bias, expert_weights, expert_biases, alpha });
        }
        Ok(Self { heads, d, k })
    }

    /// Expert weights for modality `m`, `softmax(W e_m + b)` over the last axis.
    pub fn router<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, m: Modality, e_m: Var) -> Result<Option<Var>> {
        let Some(h) = &self.heads[m.index()] else { return Ok(None) };
        let (w, b) = (tape.param(store, h.router_weight), tape.param(store, h.router_bias));
        let logits = tape.linear(e_m, w, b)?;
        tape.softmax(logits).map(Some)
    }

    /// `e'_m = e_m + alpha_m * sum_i g_i (W_i [e_id; e_txt; e_img] + b_i)`.
    /// Streams without a head pass through unchanged.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, e: [Var; 3]) -> Result<[Var; 3]> {
        let inter = tape.concat(&e)?;
        let mut out = e;
        for m in Modality::ALL {
            let Some(h) = &self.heads[m.index()] else { continue };
            let shape = tape.shape(e[m.index()]).to_vec();
            let rows = tape.value(e[m.index()]).rows();
            let g = self.router(tape, store, m, e[m.index()])?.expect("head exists");
            let ws: Vec<Var> = h.expert_weights.iter().map(|&id| tape.param(store, id)).collect();
            let bs: Vec<Var> = h.expert_biases.iter().map(|&id| tape.param(store, id)).collect();
            let w = tape.concat(&ws)?;
            let b = tape.concat(&bs)?;
            let experts = tape.linear(inter, w, b)?;
            let experts = tape.reshape(experts, vec![rows, self.k, self.d])?;
            let g = tape.reshape(g, vec![rows, 1, self.k])?;
            let mix = tape.matmul(g, experts)?;
            let mix = tape.reshape(mix, shape)?;
            let alpha = tape.param(store, h.alpha);
            let scaled = tape.scale_by(mix, alpha)?;
            out[m.index()] = tape.add(e[m.index()], scaled)?;
        }
        Ok(out)
    }
}

/// `floor(mu * ln(a + 1))`, clamped to `p_max - 1`.
pub fn interval_position(a: i64, mu: f64, p_max: usize) -> usize {
    let pos = (mu * (a.max(0) as f64).ln_1p()).floor();
    (pos as usize).min(p_max - 1)
}

pub fn interval_positions(intervals: &[i64], mu: f64, p_max: usize) -> Vec<usize> {
    intervals.iter().map(|&a| interval_position(a, mu, p_max)).collect()
}

/// Time channels of a `[B, L]` batch, flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeInputs {
    pub batch: usize,
    pub len: usize,
    /// Interval-table rows.
    pub positions: Vec<usize>,
    /// Days since the corpus origin; 0 at padding.
    pub days: Vec<f64>,
    /// Interval lengths in days; 0 at padding.
    pub interval_days: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TemporalMoe {
    pub interval_table: Option<ParamId>,
    pub abs_scale: Option<ParamId>,
    pub abs_phase: Option<ParamId>,
    pub cos_scale: Option<ParamId>,
    pub cos_phase: Option<ParamId>,
    pub router_weight: ParamId,
    pub router_bias: ParamId,
    /// `k2 x 3d`; row `i` is the scaling vector of expert `i`.
    pub experts: ParamId,
    pub d: usize,
    pub k: usize,
    pub freq: f64,
    pub variant: TimeVariant,
}

impl TemporalMoe {
    pub(crate) fn register<T: Scalar>(
        init: &mut Init<'_, T>,
        d: usize,
        k: usize,
        p_max: usize,
        freq: f64,
        variant: TimeVariant,
    ) -> Result<Self> {
        let uses_table = matches!(variant, TimeVariant::Both | TimeVariant::IntervalOnly);
        let uses_abs = !matches!(variant, TimeVariant::IntervalOnly);
        let interval_table = uses_table.then(|| init.normal("tmoe.interval_table", &[p_max, d])).transpose()?;
        let (abs_scale, abs_phase) = if uses_abs {
            (Some(init.constant("tmoe.abs.scale", &[d], 1.0)?), Some(init.constant("tmoe.abs.phase", &[d], 0.0)?))
        } else {
            (None, None)
        };
        let (cos_scale, cos_phase) = if variant == TimeVariant::CosInterval {
            (Some(init.constant("tmoe.cos.scale", &[d], 1.0)?), Some(init.constant("tmoe.cos.phase", &[d], 0.0)?))
        } else {
            (None, None)
        };
        let router_weight = init.normal("tmoe.router.weight", &[2 * d, k])?;
        let router_bias = init.constant("tmoe.router.bias", &[k], 0.0)?;
        let experts = init.normal_around("tmoe.experts", &[k, 3 * d], 1.0)?;
        Ok(Self {
            interval_table,
            abs_scale,
            abs_phase,
            cos_scale,
            cos_phase,
            router_weight,
            router_bias,
            experts,
            d,
            k,
            freq,
            variant,
        })
    }

    /// `cos(scale_i * v / freq^(i/d) + phase_i)` for every value `v`; output
    /// shape `[B, L, d]`.
    pub fn cosine_embedding<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        values: &[f64],
        scale: ParamId,
        phase: ParamId,
        shape: [usize; 2],
    ) -> Result<Var> {
        let d = self.d;
        let inv: Vec<f64> = (0..d).map(|i| self.freq.powf(-(i as f64) / d as f64)).collect();
        let mut c = Vec::with_capacity(values.len() * d);
        for &v in values {
            c.extend(inv.iter().map(|&f| T::of(v * f)));
        }
        let c = tape.constant(Tensor::new(vec![shape[0], shape[1], d], c)?);
        let s = tape.param(store, scale);
        let s = tape.reshape(s, vec![1, d])?;
        let s = tape.embedding(s, vec![0; values.len()], shape.to_vec())?;
        let arg = tape.mul(c, s)?;
        let phase = tape.param(store, phase);
        let arg = tape.add(arg, phase)?;
        tape.cos(arg)
    }

    /// Interval embedding `r1`, `[B, L, d]`.
    pub fn interval_embedding<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, time: &TimeInputs) -> Result<Option<Var>> {
        let Some(table) = self.interval_table else { return Ok(None) };
        let t = tape.param(store, table);
        tape.embedding(t, time.positions.clone(), vec![time.batch, time.len]).map(Some)
    }

    /// Absolute-time embedding `r2`, `[B, L, d]`.
    pub fn absolute_embedding<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, time: &TimeInputs) -> Result<Option<Var>> {
        let (Some(s), Some(p)) = (self.abs_scale, self.abs_phase) else { return Ok(None) };
        self.cosine_embedding(tape, store, &time.days, s, p, [time.batch, time.len]).map(Some)
    }

    /// Router input `[B, L, 2d]` assembled according to the time variant.
    pub fn gate_input<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, time: &TimeInputs) -> Result<Var> {
        let zeros = |tape: &mut Tape<T>| tape.constant(Tensor::zeros(vec![time.batch, time.len, self.d]));
        let first = match self.variant {
            TimeVariant::Both | TimeVariant::IntervalOnly => self.interval_embedding(tape, store, time)?.expect("table"),
            TimeVariant::AbsoluteOnly => zeros(tape),
            TimeVariant::CosInterval => {
                let (s, p) = (self.cos_scale.expect("cos scale"), self.cos_phase.expect("cos phase"));
                self.cosine_embedding(tape, store, &time.interval_days, s, p, [time.batch, time.len])?
            }
        };
        let second = match self.variant {
            TimeVariant::IntervalOnly => zeros(tape),
            _ => self.absolute_embedding(tape, store, time)?.expect("absolute time"),
        };
        tape.concat(&[first, second])
    }

    /// Expert weights `softmax(W_2 gate + b_2)`, `[B, L, k2]`.
    pub fn router<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, gate: Var) -> Result<Var> {
        let (w, b) = (tape.param(store, self.router_weight), tape.param(store, self.router_bias));
        let logits = tape.linear(gate, w, b)?;
        tape.softmax(logits)
    }

    /// `(sum_i g'_i W_i) * [e_id; e_txt; e_img]`, split back into streams.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, e: [Var; 3], gate: Var) -> Result<[Var; 3]> {
        let g = self.router(tape, store, gate)?;
        let experts = tape.param(store, self.experts);
        let scale = tape.matmul(g, experts)?;
        let cat = tape.concat(&e)?;
        let x = tape.mul(scale, cat)?;
        let parts = tape.split(x, 3)?;
        Ok([parts[0], parts[1], parts[2]])
    }
}
