//! Primitive forward kernels and their vector-Jacobian products.

use std::fmt;
use std::str::FromStr;

use super::{Result, Scalar, Tensor, TensorError};

/// Name of a primitive, as accepted by [`Tape::apply`](super::Tape::apply).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Matmul,
    Add,
    Subtract,
    Scale,
    ScaleBy,
    ElementwiseMul,
    ConcatLastDim,
    SplitLastDim,
    SoftmaxLastDim,
    LogSoftmaxLastDim,
    LayerNorm,
    Dropout,
    Cos,
    Exp,
    Log,
    Gelu,
    Softplus,
    EmbeddingLookup,
    CosineSimilarity,
    MaskedFill,
    TransposeLastTwo,
    Mean,
    Sum,
    Reshape,
}

const KIND_NAMES: &[(PrimitiveKind, &str)] = &[
    (PrimitiveKind::Matmul, "matmul"),
    (PrimitiveKind::Add, "add"),
    (PrimitiveKind::Subtract, "subtract"),
    (PrimitiveKind::Scale, "scale"),
    (PrimitiveKind::ScaleBy, "scale_by"),
    (PrimitiveKind::ElementwiseMul, "elementwise_mul"),
    (PrimitiveKind::ConcatLastDim, "concat_last_dim"),
    (PrimitiveKind::SplitLastDim, "split_last_dim"),
    (PrimitiveKind::SoftmaxLastDim, "softmax_last_dim"),
    (PrimitiveKind::LogSoftmaxLastDim, "log_softmax_last_dim"),
    (PrimitiveKind::LayerNorm, "layer_norm"),
    (PrimitiveKind::Dropout, "dropout"),
    (PrimitiveKind::Cos, "cos"),
    (PrimitiveKind::Exp, "exp"),
    (PrimitiveKind::Log, "log"),
    (PrimitiveKind::Gelu, "gelu"),
    (PrimitiveKind::Softplus, "softplus"),
    (PrimitiveKind::EmbeddingLookup, "embedding_lookup"),
    (PrimitiveKind::CosineSimilarity, "cosine_similarity"),
    (PrimitiveKind::MaskedFill, "masked_fill"),
    (PrimitiveKind::TransposeLastTwo, "transpose_last_two"),
    (PrimitiveKind::Mean, "mean"),
    (PrimitiveKind::Sum, "sum"),
    (PrimitiveKind::Reshape, "reshape"),
];

impl PrimitiveKind {
    pub fn name(self) -> &'static str {
        KIND_NAMES.iter().find(|(k, _)| *k == self).map(|(_, n)| *n).unwrap_or("?")
    }

    pub fn all() -> impl Iterator<Item = PrimitiveKind> {
        KIND_NAMES.iter().map(|(k, _)| *k)
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrimitiveKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        KIND_NAMES
            .iter()
            .find(|(_, n)| *n == s)
            .map(|(k, _)| *k)
            .ok_or_else(|| TensorError::UnknownOp(s.to_string()))
    }
}

/// A primitive together with its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `[.., m, k] x [k, n]` (shared right operand) or `[.., m, k] x [.., k, n]` (batched).
    Matmul,
    /// Same-shape sum, or row-wise bias add when the right operand is `[last_dim]`.
    Add,
    Subtract,
    Scale(f64),
    /// Tensor times a one-element tensor.
    ScaleBy,
    ElementwiseMul,
    ConcatLastDim,
    SplitLastDim { parts: usize, index: usize },
    SoftmaxLastDim,
    LogSoftmaxLastDim,
    /// Inputs: `x`, `gain [n]`, `bias [n]`.
    LayerNorm { eps: f64 },
    Dropout { rate: f64, name: String },
    Cos,
    Exp,
    Log,
    Gelu,
    Softplus,
    /// Input: table `[rows, d]`; output `shape ++ [d]`.
    EmbeddingLookup { indices: Vec<usize>, shape: Vec<usize> },
    /// `[n, d] x [m, d] -> [n, m]`; each norm is floored at `eps`.
    CosineSimilarity { eps: f64 },
    MaskedFill { mask: Vec<bool>, value: f64 },
    TransposeLastTwo,
    Mean,
    Sum,
    Reshape(Vec<usize>),
}

impl Primitive {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Primitive::Matmul => PrimitiveKind::Matmul,
            Primitive::Add => PrimitiveKind::Add,
            Primitive::Subtract => PrimitiveKind::Subtract,
            Primitive::Scale(_) => PrimitiveKind::Scale,
            Primitive::ScaleBy => PrimitiveKind::ScaleBy,
            Primitive::ElementwiseMul => PrimitiveKind::ElementwiseMul,
            Primitive::ConcatLastDim => PrimitiveKind::ConcatLastDim,
            Primitive::SplitLastDim { .. } => PrimitiveKind::SplitLastDim,
            Primitive::SoftmaxLastDim => PrimitiveKind::SoftmaxLastDim,
            Primitive::LogSoftmaxLastDim => PrimitiveKind::LogSoftmaxLastDim,
            Primitive::LayerNorm { .. } => PrimitiveKind::LayerNorm,
            Primitive::Dropout { .. } => PrimitiveKind::Dropout,
            Primitive::Cos => PrimitiveKind::Cos,
            Primitive::Exp => PrimitiveKind::Exp,
            Primitive::Log => PrimitiveKind::Log,
            Primitive::Gelu => PrimitiveKind::Gelu,
            Primitive::Softplus => PrimitiveKind::Softplus,
            Primitive::EmbeddingLookup { .. } => PrimitiveKind::EmbeddingLookup,
            Primitive::CosineSimilarity { .. } => PrimitiveKind::CosineSimilarity,
            Primitive::MaskedFill { .. } => PrimitiveKind::MaskedFill,
            Primitive::TransposeLastTwo => PrimitiveKind::TransposeLastTwo,
            Primitive::Mean => PrimitiveKind::Mean,
            Primitive::Sum => PrimitiveKind::Sum,
            Primitive::Reshape(_) => PrimitiveKind::Reshape,
        }
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::Matmul
            | Primitive::Add
            | Primitive::Subtract
            | Primitive::ScaleBy
            | Primitive::ElementwiseMul
            | Primitive::CosineSimilarity { .. } => 2,
            Primitive::LayerNorm { .. } => 3,
            Primitive::ConcatLastDim => 0,
            _ => 1,
        }
    }
}

/// Values kept from the forward pass for the backward rule.
#[derive(Clone, Debug)]
pub(crate) enum Saved<T> {
    Nothing,
    Mask(Vec<T>),
    Norm { xhat: Vec<T>, rstd: Vec<T> },
    Norms { a: Vec<T>, b: Vec<T> },
}

fn mismatch(op: PrimitiveKind, shapes: &[&Tensor<impl Scalar>]) -> TensorError {
    TensorError::ShapeMismatch {
        op: op.name(),
        shapes: shapes.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn map<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| f(v)).collect() }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let one = T::one();
    let u = c * (x + k * x * x * x);
    let th = T::of(2.0) * sigmoid(u + u) - one;
    let y = half * x * (one + th);
    let dy = half * (one + th) + half * x * (one - th * th) * c * (one + T::of(3.0) * k * x * x);
    (y, dy)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

fn matmul_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<MatmulDims> {
    let err = || mismatch(PrimitiveKind::Matmul, &[a, b]);
    if a.rank() < 2 || b.rank() < 2 {
        return Err(err());
    }
    let (ra, rb) = (a.rank(), b.rank());
    let k = a.shape[ra - 1];
    if b.shape[rb - 2] != k {
        return Err(err());
    }
    let n = b.shape[rb - 1];
    if rb == 2 {
        Ok(MatmulDims { batch: 1, m: a.numel() / k, k, n, shared_rhs: true })
    } else {
        if ra != rb || a.shape[..ra - 2] != b.shape[..rb - 2] {
            return Err(err());
        }
        let batch = a.shape[..ra - 2].iter().product();
        Ok(MatmulDims { batch, m: a.shape[ra - 2], k, n, shared_rhs: false })
    }
}

pub(crate) fn forward<T: Scalar>(
    prim: &Primitive,
    inputs: &[&Tensor<T>],
    training: bool,
    dropout_key: impl Fn(&str) -> u64,
) -> Result<(Tensor<T>, Saved<T>)> {
    let kind = prim.kind();
    let arity = prim.arity();
    if (arity > 0 && inputs.len() != arity) || inputs.is_empty() {
        return Err(TensorError::ShapeMismatch {
            op: kind.name(),
            shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
        });
    }
    let x = inputs[0];
    let out = match prim {
        Primitive::Matmul => {
            let b = inputs[1];
            let dims = matmul_dims(x, b)?;
            let mut shape = x.shape.clone();
            *shape.last_mut().unwrap() = dims.n;
            let mut out = vec![T::zero(); dims.batch * dims.m * dims.n];
            let (sa, sb, sc) = (dims.m * dims.k, dims.k * dims.n, dims.m * dims.n);
            for bi in 0..dims.batch {
                let bslice = if dims.shared_rhs { &b.data[..] } else { &b.data[bi * sb..(bi + 1) * sb] };
                T::gemm(
                    dims.m,
                    dims.k,
                    dims.n,
                    T::one(),
                    &x.data[bi * sa..(bi + 1) * sa],
                    dims.k as isize,
                    1,
                    bslice,
                    dims.n as isize,
                    1,
                    T::zero(),
                    &mut out[bi * sc..(bi + 1) * sc],
                    dims.n as isize,
                    1,
                );
            }
            (Tensor { shape, data: out }, Saved::Nothing)
        }
        Primitive::Add | Primitive::Subtract => {
            let b = inputs[1];
            let sign = if matches!(prim, Primitive::Add) { T::one() } else { -T::one() };
            if x.shape == b.shape {
                let data = x.data.iter().zip(&b.data).map(|(&p, &q)| p + sign * q).collect();
                (Tensor { shape: x.shape.clone(), data }, Saved::Nothing)
            } else if b.rank() == 1 && b.numel() == x.last_dim() {
                let w = x.last_dim();
                let data = x.data.iter().enumerate().map(|(i, &p)| p + sign * b.data[i % w]).collect();
                (Tensor { shape: x.shape.clone(), data }, Saved::Nothing)
            } else {
                return Err(mismatch(kind, &[x, b]));
            }
        }
        Primitive::Scale(c) => {
            let c = T::of(*c);
            (map(x, |v| v * c), Saved::Nothing)
        }
        Primitive::ScaleBy => {
            let s = inputs[1];
            if !s.is_scalar() {
                return Err(mismatch(kind, &[x, s]));
            }
            let c = s.data[0];
            (map(x, |v| v * c), Saved::Nothing)
        }
        Primitive::ElementwiseMul => {
            let b = inputs[1];
            if x.shape != b.shape {
                return Err(mismatch(kind, &[x, b]));
            }
            let data = x.data.iter().zip(&b.data).map(|(&p, &q)| p * q).collect();
            (Tensor { shape: x.shape.clone(), data }, Saved::Nothing)
        }
        Primitive::ConcatLastDim => {
            let lead = &x.shape[..x.rank() - 1];
            if inputs.iter().any(|t| t.rank() != x.rank() || &t.shape[..t.rank() - 1] != lead) {
                return Err(mismatch(kind, inputs));
            }
            let widths: Vec<usize> = inputs.iter().map(|t| t.last_dim()).collect();
            let total: usize = widths.iter().sum();
            let rows = x.rows();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (t, &w) in inputs.iter().zip(&widths) {
                    data.extend_from_slice(&t.data[r * w..(r + 1) * w]);
                }
            }
            let mut shape = x.shape.clone();
            *shape.last_mut().unwrap() = total;
            (Tensor { shape, data }, Saved::Nothing)
        }
        Primitive::SplitLastDim { parts, index } => {
            let w = x.last_dim();
            if *parts == 0 || w % parts != 0 || index >= parts {
                return Err(TensorError::ShapeMismatch {
                    op: kind.name(),
                    shapes: vec![x.shape.clone(), vec![*parts, *index]],
                });
            }
            let cw = w / parts;
            let off = index * cw;
            let mut data = Vec::with_capacity(x.rows() * cw);
            for r in 0..x.rows() {
                data.extend_from_slice(&x.data[r * w + off..r * w + off + cw]);
            }
            let mut shape = x.shape.clone();
            *shape.last_mut().unwrap() = cw;
            (Tensor { shape, data }, Saved::Nothing)
        }
        Primitive::SoftmaxLastDim | Primitive::LogSoftmaxLastDim => {
            let log = matches!(prim, Primitive::LogSoftmaxLastDim);
            let w = x.last_dim();
            let mut data = vec![T::zero(); x.numel()];
            for (src, dst) in x.data.chunks(w).zip(data.chunks_mut(w)) {
                let max = src.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let sum: T = src.iter().map(|&v| (v - max).exp()).sum();
                if log {
                    let lse = max + sum.ln();
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s - lse;
                    }
                } else {
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = (s - max).exp() / sum;
                    }
                }
            }
            (Tensor { shape: x.shape.clone(), data }, Saved::Nothing)
        }
        Primitive::LayerNorm { eps } => {
            let (gain, bias) = (inputs[1], inputs[2]);
            let w = x.last_dim();
            if gain.shape != [w] || bias.shape != [w] {
                return Err(mismatch(kind, inputs));
            }
            let eps = T::of(*eps);
            let wt = T::of(w as f64);
            let mut xhat = vec![T::zero(); x.numel()];
            let mut rstd = Vec::with_capacity(x.rows());
            let mut data = vec![T::zero(); x.numel()];
            for r in 0..x.rows() {
                let row = &x.data[r * w..(r + 1) * w];
                let mean = row.iter().copied().sum::<T>() / wt;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / wt;
                let rs = T::one() / (var + eps).sqrt();
                rstd.push(rs);
                for j in 0..w {
                    let h = (row[j] - mean) * rs;
                    xhat[r * w + j] = h;
                    data[r * w + j] = h * gain.data[j] + bias.data[j];
                }
            }
            (Tensor { shape: x.shape.clone(), data }, Saved::Norm { xhat, rstd })
        }
        Primitive::Dropout { rate, name } => {
            if !(0.0..1.0).contains(rate) {
                return Err(TensorError::BadDropoutRate(*rate));
            }
            if !training || *rate == 0.0 {
                (x.clone(), Saved::Nothing)
            } else {
                let key = dropout_key(name);
                let keep = T::of(1.0 / (1.0 - rate));
                let mask: Vec<T> = (0..x.numel())
                    .map(|i| if unit_uniform(key, i as u64) < *rate { T::zero() } else { keep })
                    .collect();
                let data = x.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                (Tensor { shape: x.shape.clone(), data }, Saved::Mask(mask))
            }
        }
        Primitive::Cos => (map(x, |v| v.cos()), Saved::Nothing),
        Primitive::Exp => (map(x, |v| v.exp()), Saved::Nothing),
        Primitive::Log => {
            if let Some((index, v)) = x.data.iter().enumerate().find(|(_, v)| !(**v > T::zero())) {
                return Err(TensorError::LogNonPositive { index, value: v.as_f64() });
            }
            (map(x, |v| v.ln()), Saved::Nothing)
        }
        Primitive::Gelu => (map(x, |v| gelu_parts(v).0), Saved::Nothing),
        Primitive::Softplus => (
            map(x, |v| v.max(T::zero()) + (T::one() + (-v.abs()).exp()).ln()),
            Saved::Nothing,
        ),
        Primitive::EmbeddingLookup { indices, shape } => {
            if x.rank() != 2 || shape.iter().product::<usize>() != indices.len() || shape.is_empty() {
                return Err(TensorError::ShapeMismatch {
                    op: kind.name(),
                    shapes: vec![x.shape.clone(), shape.clone()],
                });
            }
            let (rows, d) = (x.shape[0], x.shape[1]);
            let mut data = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                if i >= rows {
                    return Err(TensorError::IndexOutOfRange { op: kind.name(), index: i, bound: rows });
                }
                data.extend_from_slice(&x.data[i * d..(i + 1) * d]);
            }
            let mut out_shape = shape.clone();
            out_shape.push(d);
            (Tensor::new(out_shape, data)?, Saved::Nothing)
        }
        Primitive::CosineSimilarity { eps } => {
            let b = inputs[1];
            if x.rank() != 2 || b.rank() != 2 || x.shape[1] != b.shape[1] {
                return Err(mismatch(kind, &[x, b]));
            }
            let eps = T::of(*eps);
            let (n, m, d) = (x.shape[0], b.shape[0], x.shape[1]);
            let norms = |t: &Tensor<T>| -> Vec<T> {
                t.data.chunks(d).map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps)).collect()
            };
            let (na, nb) = (norms(x), norms(b));
            let mut data = vec![T::zero(); n * m];
            for i in 0..n {
                let ra = &x.data[i * d..(i + 1) * d];
                for j in 0..m {
                    let rb = &b.data[j * d..(j + 1) * d];
                    let dot: T = ra.iter().zip(rb).map(|(&p, &q)| p * q).sum();
                    data[i * m + j] = dot / (na[i] * nb[j]);
                }
            }
            (Tensor { shape: vec![n, m], data }, Saved::Norms { a: na, b: nb })
        }
        Primitive::MaskedFill { mask, value } => {
            if mask.len() != x.numel() {
                return Err(TensorError::ShapeMismatch {
                    op: kind.name(),
                    shapes: vec![x.shape.clone(), vec![mask.len()]],
                });
            }
            let fill = T::of(*value);
            let data = x.data.iter().zip(mask).map(|(&v, &m)| if m { fill } else { v }).collect();
            (Tensor { shape: x.shape.clone(), data }, Saved::Nothing)
        }
        Primitive::TransposeLastTwo => {
            if x.rank() < 2 {
                return Err(mismatch(kind, &[x]));
            }
            let r = x.rank();
            let (m, n) = (x.shape[r - 2], x.shape[r - 1]);
            let mut data = vec![T::zero(); x.numel()];
            for (src, dst) in x.data.chunks(m * n).zip(data.chunks_mut(m * n)) {
                for i in 0..m {
                    for j in 0..n {
                        dst[j * m + i] = src[i * n + j];
                    }
                }
            }
            let mut shape = x.shape.clone();
            shape.swap(r - 2, r - 1);
            (Tensor { shape, data }, Saved::Nothing)
        }
        Primitive::Mean => {
            let s: T = x.data.iter().copied().sum();
            (Tensor::scalar(s / T::of(x.numel() as f64)), Saved::Nothing)
        }
        Primitive::Sum => (Tensor::scalar(x.data.iter().copied().sum()), Saved::Nothing),
        Primitive::Reshape(shape) => (x.clone().reshaped(shape.clone())?, Saved::Nothing),
    };
    Ok(out)
}

/// Input gradients given the output gradient `g`. Entries are `None` where
/// `needs[i]` is false.
pub(crate) fn backward<T: Scalar>(
    prim: &Primitive,
    inputs: &[&Tensor<T>],
    out: &Tensor<T>,
    saved: &Saved<T>,
    g: &[T],
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let x = inputs[0];
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let mut res: Vec<Option<Vec<T>>> = vec![None; inputs.len()];
    match prim {
        Primitive::Matmul => {
            let b = inputs[1];
            let dims = matmul_dims(x, b).expect("validated in forward");
            let (m, k, n) = (dims.m, dims.k, dims.n);
            let (sa, sb, sc) = (m * k, k * n, m * n);
            if want(0) {
                let mut da = vec![T::zero(); x.numel()];
                for bi in 0..dims.batch {
                    let bs = if dims.shared_rhs { &b.data[..] } else { &b.data[bi * sb..(bi + 1) * sb] };
                    // dA = G B^T
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &g[bi * sc..(bi + 1) * sc],
                        n as isize,
                        1,
                        bs,
                        1,
                        n as isize,
                        T::zero(),
                        &mut da[bi * sa..(bi + 1) * sa],
                        k as isize,
                        1,
                    );
                }
                res[0] = Some(da);
            }
            if want(1) {
                let mut db = vec![T::zero(); b.numel()];
                for bi in 0..dims.batch {
                    let (dst, beta) = if dims.shared_rhs {
                        (&mut db[..], if bi == 0 { T::zero() } else { T::one() })
                    } else {
                        (&mut db[bi * sb..(bi + 1) * sb], T::zero())
                    };
                    // dB = A^T G
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        &x.data[bi * sa..(bi + 1) * sa],
                        1,
                        k as isize,
                        &g[bi * sc..(bi + 1) * sc],
                        n as isize,
                        1,
                        beta,
                        dst,
                        n as isize,
                        1,
                    );
                }
                res[1] = Some(db);
            }
        }
        Primitive::Add | Primitive::Subtract => {
            let b = inputs[1];
            if want(0) {
                res[0] = Some(g.to_vec());
            }
            if want(1) {
                let neg = matches!(prim, Primitive::Subtract);
                let mut db = if x.shape == b.shape {
                    g.to_vec()
                } else {
                    let w = b.numel();
                    let mut acc = vec![T::zero(); w];
                    for row in g.chunks(w) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    acc
                };
                if neg {
                    db.iter_mut().for_each(|v| *v = -*v);
                }
                res[1] = Some(db);
            }
        }
        Primitive::Scale(c) => {
            let c = T::of(*c);
            res[0] = Some(g.iter().map(|&v| v * c).collect());
        }
        Primitive::ScaleBy => {
            let s = inputs[1].data[0];
            if want(0) {
                res[0] = Some(g.iter().map(|&v| v * s).collect());
            }
            if want(1) {
                res[1] = Some(vec![g.iter().zip(&x.data).map(|(&p, &q)| p * q).sum()]);
            }
        }
        Primitive::ElementwiseMul => {
            let b = inputs[1];
            if want(0) {
                res[0] = Some(g.iter().zip(&b.data).map(|(&p, &q)| p * q).collect());
            }
            if want(1) {
                res[1] = Some(g.iter().zip(&x.data).map(|(&p, &q)| p * q).collect());
            }
        }
        Primitive::ConcatLastDim => {
            let widths: Vec<usize> = inputs.iter().map(|t| t.last_dim()).collect();
            let total: usize = widths.iter().sum();
            let mut off = 0;
            for (i, &w) in widths.iter().enumerate() {
                if want(i) {
                    let mut d = Vec::with_capacity(inputs[i].numel());
                    for row in g.chunks(total) {
                        d.extend_from_slice(&row[off..off + w]);
                    }
                    res[i] = Some(d);
                }
                off += w;
            }
        }
        Primitive::SplitLastDim { parts, index } => {
            let w = x.last_dim();
            let cw = w / parts;
            let off = index * cw;
            let mut d = vec![T::zero(); x.numel()];
            for (r, row) in g.chunks(cw).enumerate() {
                d[r * w + off..r * w + off + cw].copy_from_slice(row);
            }
            res[0] = Some(d);
        }
        Primitive::SoftmaxLastDim => {
            let w = x.last_dim();
            let mut d = vec![T::zero(); x.numel()];
            for ((y, gr), dr) in out.data.chunks(w).zip(g.chunks(w)).zip(d.chunks_mut(w)) {
                let dot: T = y.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                for j in 0..w {
                    dr[j] = y[j] * (gr[j] - dot);
                }
            }
            res[0] = Some(d);
        }
        Primitive::LogSoftmaxLastDim => {
            let w = x.last_dim();
            let mut d = vec![T::zero(); x.numel()];
            for ((y, gr), dr) in out.data.chunks(w).zip(g.chunks(w)).zip(d.chunks_mut(w)) {
                let total: T = gr.iter().copied().sum();
                for j in 0..w {
                    dr[j] = gr[j] - y[j].exp() * total;
                }
            }
            res[0] = Some(d);
        }
        Primitive::LayerNorm { .. } => {
            let Saved::Norm { xhat, rstd } = saved else { unreachable!("layer_norm saves stats") };
            let gain = inputs[1];
            let w = x.last_dim();
            let wt = T::of(w as f64);
            if want(1) || want(2) {
                let mut dg = vec![T::zero(); w];
                let mut dbias = vec![T::zero(); w];
                for (gr, hr) in g.chunks(w).zip(xhat.chunks(w)) {
                    for j in 0..w {
                        dg[j] = dg[j] + gr[j] * hr[j];
                        dbias[j] = dbias[j] + gr[j];
                    }
                }
                if want(1) {
                    res[1] = Some(dg);
                }
                if want(2) {
                    res[2] = Some(dbias);
                }
            }
            if want(0) {
                let mut dx = vec![T::zero(); x.numel()];
                let mut dh = vec![T::zero(); w];
                for r in 0..x.rows() {
                    let gr = &g[r * w..(r + 1) * w];
                    let hr = &xhat[r * w..(r + 1) * w];
                    for j in 0..w {
                        dh[j] = gr[j] * gain.data[j];
                    }
                    let mean_dh = dh.iter().copied().sum::<T>() / wt;
                    let mean_dhh = dh.iter().zip(hr).map(|(&p, &q)| p * q).sum::<T>() / wt;
                    for j in 0..w {
                        dx[r * w + j] = rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                    }
                }
                res[0] = Some(dx);
            }
        }
        Primitive::Dropout { .. } => {
            res[0] = Some(match saved {
                Saved::Mask(mask) => g.iter().zip(mask).map(|(&p, &q)| p * q).collect(),
                _ => g.to_vec(),
            });
        }
        Primitive::Cos => {
            res[0] = Some(g.iter().zip(&x.data).map(|(&p, &v)| -p * v.sin()).collect());
        }
        Primitive::Exp => {
            res[0] = Some(g.iter().zip(&out.data).map(|(&p, &y)| p * y).collect());
        }
        Primitive::Log => {
            res[0] = Some(g.iter().zip(&x.data).map(|(&p, &v)| p / v).collect());
        }
        Primitive::Gelu => {
            res[0] = Some(g.iter().zip(&x.data).map(|(&p, &v)| p * gelu_parts(v).1).collect());
        }
        Primitive::Softplus => {
            res[0] = Some(g.iter().zip(&x.data).map(|(&p, &v)| p * sigmoid(v)).collect());
        }
        Primitive::EmbeddingLookup { indices, .. } => {
            let d = x.shape[1];
            let mut dt = vec![T::zero(); x.numel()];
            for (&i, gr) in indices.iter().zip(g.chunks(d)) {
                for (a, &v) in dt[i * d..(i + 1) * d].iter_mut().zip(gr) {
                    *a = *a + v;
                }
            }
            res[0] = Some(dt);
        }
        Primitive::CosineSimilarity { eps } => {
            let Saved::Norms { a: na, b: nb } = saved else { unreachable!("cosine saves norms") };
            let b = inputs[1];
            let eps = T::of(*eps);
            let (n, m, d) = (x.shape[0], b.shape[0], x.shape[1]);
            let ahat: Vec<T> = (0..n * d).map(|i| x.data[i] / na[i / d]).collect();
            let bhat: Vec<T> = (0..m * d).map(|i| b.data[i] / nb[i / d]).collect();
            // d(ahat) = G bhat ; d(bhat) = G^T ahat, then project through the normalisation.
            let unnormalise = |hat: &[T], dhat: Vec<T>, norms: &[T], raw: &Tensor<T>| -> Vec<T> {
                let mut out = vec![T::zero(); dhat.len()];
                for r in 0..norms.len() {
                    let h = &hat[r * d..(r + 1) * d];
                    let dh = &dhat[r * d..(r + 1) * d];
                    let raw_norm = raw.data[r * d..(r + 1) * d].iter().map(|&v| v * v).sum::<T>().sqrt();
                    if raw_norm > eps {
                        let proj: T = h.iter().zip(dh).map(|(&p, &q)| p * q).sum();
                        for j in 0..d {
                            out[r * d + j] = (dh[j] - h[j] * proj) / norms[r];
                        }
                    } else {
                        for j in 0..d {
                            out[r * d + j] = dh[j] / norms[r];
                        }
                    }
                }
                out
            };
            if want(0) {
                let mut dah = vec![T::zero(); n * d];
                T::gemm(n, m, d, T::one(), g, m as isize, 1, &bhat, d as isize, 1, T::zero(), &mut dah, d as isize, 1);
                res[0] = Some(unnormalise(&ahat, dah, na, x));
            }
            if want(1) {
                let mut dbh = vec![T::zero(); m * d];
                T::gemm(m, n, d, T::one(), g, 1, m as isize, &ahat, d as isize, 1, T::zero(), &mut dbh, d as isize, 1);
                res[1] = Some(unnormalise(&bhat, dbh, nb, b));
            }
        }
        Primitive::MaskedFill { mask, .. } => {
            res[0] = Some(g.iter().zip(mask).map(|(&p, &m)| if m { T::zero() } else { p }).collect());
        }
        Primitive::TransposeLastTwo => {
            let r = x.rank();
            let (m, n) = (x.shape[r - 2], x.shape[r - 1]);
            let mut d = vec![T::zero(); x.numel()];
            for (src, dst) in g.chunks(m * n).zip(d.chunks_mut(m * n)) {
                for i in 0..m {
                    for j in 0..n {
                        dst[i * n + j] = src[j * m + i];
                    }
                }
            }
            res[0] = Some(d);
        }
        Primitive::Mean => {
            let v = g[0] / T::of(x.numel() as f64);
            res[0] = Some(vec![v; x.numel()]);
        }
        Primitive::Sum => res[0] = Some(vec![g[0]; x.numel()]),
        Primitive::Reshape(_) => res[0] = Some(g.to_vec()),
    }
    for (i, r) in res.iter_mut().enumerate() {
        if !want(i) {
            *r = None;
        }
    }
    res
}

/// Counter-based uniform in `[0, 1)`: a pure function of `(key, counter)`.
pub(crate) fn unit_uniform(key: u64, counter: u64) -> f64 {
    let z = splitmix64(key ^ splitmix64(counter.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a, stable across runs and platforms.
pub(crate) fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
