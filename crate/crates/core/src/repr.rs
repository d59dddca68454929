//! Initial item vectors: ID embeddings, projected frozen features and the
//! shared position table.

use crate::init::Init;
use crate::modality::Modality;
use crate::tensor::{ParamId, ParamStore, Result, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Parameter handles of the item representation. A projection is absent when
/// its modality is disabled.
#[derive(Clone, Debug)]
pub struct ItemRepr {
    pub id_table: ParamId,
    pub text: Option<Projection>,
    pub image: Option<Projection>,
    pub pos_table: ParamId,
    pub d: usize,
    pub n_items: usize,
}

/// Frozen `(n_items + 1) x dim` feature tables with a zero padding row.
#[derive(Clone, Debug)]
pub struct FrozenFeatures<T> {
    pub text: Tensor<T>,
    pub image: Tensor<T>,
}

impl ItemRepr {
    pub(crate) fn register<T: Scalar>(
        init: &mut Init<'_, T>,
        n_items: usize,
        d: usize,
        max_len: usize,
        text_dim: Option<usize>,
        image_dim: Option<usize>,
    ) -> Result<Self> {
        let id_table = init.normal("item.id_table", &[n_items + 1, d])?;
        init.store.value_mut(id_table).data_mut()[..d].iter_mut().for_each(|x| *x = T::zero());
        let mut proj = |name: &str, dim: Option<usize>| -> Result<Option<Projection>> {
            dim.map(|dim| {
                Ok(Projection {
                    weight: init.normal(format!("item.{name}.weight"), &[dim, d])?,
                    bias: init.constant(format!("item.{name}.bias"), &[d], 0.0)?,
                })
            })
            .transpose()
        };
        let text = proj("txt", text_dim)?;
        let image = proj("img", image_dim)?;
        let pos_table = init.normal("item.pos_table", &[max_len, d])?;
        Ok(Self { id_table, text, image, pos_table, d, n_items })
    }

    pub fn projection(&self, m: Modality) -> Option<Projection> {
        match m {
            Modality::Id => None,
            Modality::Text => self.text,
            Modality::Image => self.image,
        }
    }

    /// `x_m` for every slot of `indices` (shape `shape ++ [d]`). Disabled
    /// modalities yield `None`.
    pub fn project_features<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: &FrozenFeatures<T>,
        indices: &[usize],
        shape: &[usize],
    ) -> Result<[Option<Var>; 3]> {
        if let Some(&bad) = indices.iter().find(|&&i| i > self.n_items) {
            return Err(TensorError::IndexOutOfRange { op: "project_features", index: bad, bound: self.n_items + 1 });
        }
        let table = tape.param(store, self.id_table);
        let x_id = tape.embedding(table, indices.to_vec(), shape.to_vec())?;
        let mut out = [Some(x_id), None, None];
        for (m, feats) in [(Modality::Text, &features.text), (Modality::Image, &features.image)] {
            let Some(p) = self.projection(m) else { continue };
            // Gather on the host: the table is frozen, so only the gathered rows
            // enter the tape, as a constant.
            let dim = feats.last_dim();
            let mut rows = Vec::with_capacity(indices.len() * dim);
            for &i in indices {
                rows.extend_from_slice(feats.row(i));
            }
            let mut fshape = shape.to_vec();
            fshape.push(dim);
            let f = tape.constant(Tensor::new(fshape, rows)?);
            let (w, b) = (tape.param(store, p.weight), tape.param(store, p.bias));
            out[m.index()] = Some(tape.linear(f, w, b)?);
        }
        Ok(out)
    }

    /// `e = x + pos_table[slot]` for an input of shape `[B, L, d]`.
    pub fn add_position<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::ShapeMismatch { op: "add_position", shapes: vec![shape] });
        }
        let (b, l) = (shape[0], shape[1]);
        let pos = tape.param(store, self.pos_table);
        let slots: Vec<usize> = (0..b * l).map(|i| i % l).collect();
        let p = tape.embedding(pos, slots, vec![b, l])?;
        tape.add(x, p)
    }
}
