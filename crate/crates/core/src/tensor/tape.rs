//! Operation tape: records primitives during the forward pass and replays
//! their backward rules in reverse order.

use std::collections::HashMap;

use super::ops::{self, Primitive, Saved};
use super::params::{Gradients, ParamId, ParamStore};
use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a tensor living on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Keys the dropout masks drawn on a tape. Masks are a pure function of
/// `(seed, epoch, step, name)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DropoutContext {
    pub training: bool,
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
}

impl DropoutContext {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(seed: u64, epoch: u64, step: u64) -> Self {
        Self { training: true, seed, epoch, step }
    }

    fn key(&self, name: &str) -> u64 {
        let mut k = ops::splitmix64(self.seed);
        k = ops::splitmix64(k ^ self.epoch);
        k = ops::splitmix64(k ^ self.step);
        ops::splitmix64(k ^ ops::stable_hash(name))
    }
}

struct Record<T> {
    prim: Primitive,
    inputs: Vec<Var>,
    saved: Saved<T>,
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    record: Option<Record<T>>,
    param: Option<ParamId>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    dropout: DropoutContext,
    grad_enabled: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn new(dropout: DropoutContext) -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new(), dropout, grad_enabled: true }
    }

    /// A tape that never records: parameters enter as constants.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new(DropoutContext::eval()) }
    }

    pub fn training(&self) -> bool {
        self.dropout.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, record: Option<Record<T>>, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, requires_grad, record, param });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, None, None)
    }

    /// A free-standing leaf; its gradient is reported by [`Gradients::leaf`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.push(value, rg, None, None)
    }

    /// Binds a stored parameter; repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let rg = p.requires_grad() && self.grad_enabled;
        let v = self.push(p.value.clone(), rg, None, Some(id));
        self.bound.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Applies `prim` to `inputs`, recording it when any input requires a gradient.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        if let Primitive::Dropout { rate, .. } = &prim {
            if !(0.0..1.0).contains(rate) {
                return Err(TensorError::BadDropoutRate(*rate));
            }
            if !self.dropout.training || *rate == 0.0 {
                return Ok(inputs[0]);
            }
        }
        let (value, saved) = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let ctx = &self.dropout;
            ops::forward(&prim, &vals, ctx.training, |name| ctx.key(name))?
        };
        let rg = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let record = rg.then(|| Record { prim, inputs: inputs.to_vec(), saved });
        Ok(self.push(value, rg, record, None))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Matmul, &[a, b])
    }

    /// `x @ w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Subtract, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        self.apply(Primitive::ScaleBy, &[a, s])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::ElementwiseMul, &[a, b])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::ConcatLastDim, parts)
    }

    pub fn split(&mut self, x: Var, parts: usize) -> Result<Vec<Var>> {
        (0..parts).map(|index| self.apply(Primitive::SplitLastDim { parts, index }, &[x])).collect()
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::SoftmaxLastDim, &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::LogSoftmaxLastDim, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.apply(Primitive::LayerNorm { eps }, &[x, gain, bias])
    }

    pub fn dropout(&mut self, x: Var, rate: f64, name: &str) -> Result<Var> {
        self.apply(Primitive::Dropout { rate, name: name.to_string() }, &[x])
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Cos, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Gelu, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softplus, &[x])
    }

    pub fn embedding(&mut self, table: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::EmbeddingLookup { indices, shape }, &[table])
    }

    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.apply(Primitive::CosineSimilarity { eps }, &[a, b])
    }

    pub fn masked_fill(&mut self, x: Var, mask: Vec<bool>, value: f64) -> Result<Var> {
        self.apply(Primitive::MaskedFill { mask, value }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::TransposeLastTwo, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Reshape(shape), &[x])
    }

    /// Consumes the tape and returns `d loss / d x` for every parameter and
    /// leaf that requires a gradient.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(record) = &node.record else { continue };
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> = record.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let vals: Vec<&Tensor<T>> = record.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = ops::backward(&record.prim, &vals, &node.value, &record.saved, &g, &needs);
            for (v, ig) in record.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(ig).for_each(|(a, b)| *a = *a + b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        let mut out = Gradients::default();
        for (i, node) in self.nodes.into_iter().enumerate() {
            if !node.requires_grad || node.record.is_some() {
                continue;
            }
            let data = grads[i].take().unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
            let g = Tensor::new(node.value.shape().to_vec(), data)?;
            match node.param {
                Some(id) => out.grads.push((id, g)),
                None => out.leaves.push((Var(i), g)),
            }
        }
        Ok(out)
    }
}
