//! Per-modality transformer encoders and catalog scoring.

use crate::init::Init;
use crate::tensor::{ParamId, ParamStore, Result, Scalar, Tape, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-12;
/// Score given to masked attention entries; finite so fully masked rows
/// still produce a (uniform) distribution instead of NaN.
pub const MASK_FILL: f64 = -1e9;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub(crate) fn register_named<T: Scalar>(init: &mut Init<'_, T>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Self::register(init, name, fan_in, fan_out)
    }

    fn register<T: Scalar>(init: &mut Init<'_, T>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: init.normal(format!("{name}.weight"), &[fan_in, fan_out])?,
            bias: init.constant(format!("{name}.bias"), &[fan_out], 0.0)?,
        })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(store, self.weight), tape.param(store, self.bias));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    fn register<T: Scalar>(init: &mut Init<'_, T>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: init.constant(format!("{name}.gain"), &[d], 1.0)?,
            bias: init.constant(format!("{name}.bias"), &[d], 0.0)?,
        })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(store, self.gain), tape.param(store, self.bias));
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Post-norm block: attention and feed-forward sublayers, each followed by a
/// residual add and layer norm.
#[derive(Clone, Debug)]
pub struct Block {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm1: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: Norm,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderSettings {
    pub n_heads: usize,
    pub dropout: f64,
    pub causal: bool,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub name: String,
    pub input_norm: Norm,
    pub blocks: Vec<Block>,
    pub d: usize,
}

/// `[B, L, L]` attention mask, true where query `i` may not look at key `j`:
/// keys at padding slots, and keys after the query when `causal`.
pub fn attention_mask(pad: &[bool], batch: usize, len: usize, causal: bool) -> Vec<bool> {
    let mut mask = vec![false; batch * len * len];
    for b in 0..batch {
        for i in 0..len {
            for j in 0..len {
                mask[(b * len + i) * len + j] = pad[b * len + j] || (causal && j > i);
            }
        }
    }
    mask
}

impl Encoder {
    pub(crate) fn register<T: Scalar>(init: &mut Init<'_, T>, name: &str, d: usize, n_layers: usize) -> Result<Self> {
        let input_norm = Norm::register(init, &format!("{name}.norm"), d)?;
        let mut blocks = Vec::with_capacity(n_layers);
        for layer in 0..n_layers {
            let p = format!("{name}.{layer}");
            blocks.push(Block {
                query: Linear::register(init, &format!("{p}.query"), d, d)?,
                key: Linear::register(init, &format!("{p}.key"), d, d)?,
                value: Linear::register(init, &format!("{p}.value"), d, d)?,
                output: Linear::register(init, &format!("{p}.output"), d, d)?,
                norm1: Norm::register(init, &format!("{p}.norm1"), d)?,
                ffn_in: Linear::register(init, &format!("{p}.ffn_in"), d, 4 * d)?,
                ffn_out: Linear::register(init, &format!("{p}.ffn_out"), 4 * d, d)?,
                norm2: Norm::register(init, &format!("{p}.norm2"), d)?,
            });
        }
        Ok(Self { name: name.to_string(), input_norm, blocks, d })
    }

    /// Hidden states of every slot, `[B, L, d]`. `tag` distinguishes dropout
    /// masks of separate passes over the same encoder.
    pub fn hidden_states<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        s: Var,
        pad: &[bool],
        settings: EncoderSettings,
        tag: &str,
    ) -> Result<Var> {
        let shape = tape.shape(s).to_vec();
        if shape.len() != 3 || shape[2] != self.d || pad.len() != shape[0] * shape[1] {
            return Err(TensorError::ShapeMismatch { op: "encode_sequence", shapes: vec![shape, vec![pad.len()]] });
        }
        let (b, l) = (shape[0], shape[1]);
        let h = settings.n_heads;
        let dh = self.d / h;
        let mask = attention_mask(pad, b, l, settings.causal);
        let rate = settings.dropout;
        let name = |part: &str| format!("{tag}.{}.{part}", self.name);

        let x = self.input_norm.apply(tape, store, s)?;
        let mut x = tape.dropout(x, rate, &name("input"))?;
        for (layer, block) in self.blocks.iter().enumerate() {
            let q = block.query.apply(tape, store, x)?;
            let k = block.key.apply(tape, store, x)?;
            let v = block.value.apply(tape, store, x)?;
            let (qs, ks, vs) = (tape.split(q, h)?, tape.split(k, h)?, tape.split(v, h)?);
            let mut heads = Vec::with_capacity(h);
            for head in 0..h {
                let kt = tape.transpose(ks[head])?;
                let scores = tape.matmul(qs[head], kt)?;
                let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
                let scores = tape.masked_fill(scores, mask.clone(), MASK_FILL)?;
                let att = tape.softmax(scores)?;
                let att = tape.dropout(att, rate, &name(&format!("{layer}.attn.{head}")))?;
                heads.push(tape.matmul(att, vs[head])?);
            }
            let merged = tape.concat(&heads)?;
            let a = block.output.apply(tape, store, merged)?;
            let a = tape.dropout(a, rate, &name(&format!("{layer}.attn_out")))?;
            let r = tape.add(x, a)?;
            let x1 = block.norm1.apply(tape, store, r)?;
            let f = block.ffn_in.apply(tape, store, x1)?;
            let f = tape.gelu(f)?;
            let f = block.ffn_out.apply(tape, store, f)?;
            let f = tape.dropout(f, rate, &name(&format!("{layer}.ffn")))?;
            let r = tape.add(x1, f)?;
            x = block.norm2.apply(tape, store, r)?;
        }
        Ok(x)
    }

    /// Hidden state at the last slot, `[B, d]`. Every row needs a real item
    /// in slot `L - 1`.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        s: Var,
        pad: &[bool],
        settings: EncoderSettings,
        tag: &str,
    ) -> Result<Var> {
        let shape = tape.shape(s).to_vec();
        let (b, l) = (shape[0], shape[1]);
        if let Some(row) = (0..b).find(|&r| pad.get(r * l + l - 1).copied().unwrap_or(true)) {
            return Err(TensorError::Invalid(format!("sequence {row} has no item in its last slot")));
        }
        let hidden = self.hidden_states(tape, store, s, pad, settings, tag)?;
        last_slot(tape, hidden)
    }
}

/// Rows `[b, L - 1, :]` of a `[B, L, d]` tensor.
pub fn last_slot<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(x, vec![b * l, d])?;
    tape.embedding(flat, (0..b).map(|r| r * l + l - 1).collect(), vec![b])
}

/// `sum_m H_m . x_m(v)` for every candidate row; states `[B, d]`, candidates
/// `[n, d]`, result `[B, n]`.
pub fn score_items<T: Scalar>(tape: &mut Tape<T>, pairs: &[(Var, Var)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(h, x) in pairs {
        let xt = tape.transpose(x)?;
        let s = tape.matmul(h, xt)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| TensorError::Invalid("no modality to score with".into()))
}
