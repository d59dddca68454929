//! Training objectives: next-item cross-entropy, category prediction, and
//! the two in-batch contrastive terms.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Scalar, Tape, Tensor, TensorError, Var};

pub const COSINE_EPS: f64 = 1e-12;

/// Softmax cross-entropy of `scores [B, n]` against 0-based target columns,
/// averaged over rows.
pub fn main_loss<T: Scalar>(tape: &mut Tape<T>, scores: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(scores).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(TensorError::ShapeMismatch { op: "main_loss", shapes: vec![shape, vec![targets.len()]] });
    }
    let (b, n) = (shape[0], shape[1]);
    let mut onehot = vec![T::zero(); b * n];
    for (r, &t) in targets.iter().enumerate() {
        if t >= n {
            return Err(TensorError::IndexOutOfRange { op: "main_loss", index: t, bound: n });
        }
        onehot[r * n + t] = T::one();
    }
    nll(tape, scores, Tensor::new(vec![b, n], onehot)?, b)
}

/// `-sum(log_softmax(x) * selector) / rows`.
fn nll<T: Scalar>(tape: &mut Tape<T>, logits: Var, selector: Tensor<T>, rows: usize) -> Result<Var> {
    let logp = tape.log_softmax(logits)?;
    let sel = tape.constant(selector);
    let picked = tape.mul(logp, sel)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / rows as f64)
}

/// Multi-label binary cross-entropy on logits `[B, L, C]`, summed over
/// categories and valid slots, averaged over sequences. `labels` is the
/// `B x L x C` multi-hot matrix and `valid` the `B x L` slot mask.
pub fn cp_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[u8], valid: &[bool]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let n = tape.value(logits).numel();
    if shape.len() != 3 || labels.len() != n || valid.len() != shape[0] * shape[1] {
        return Err(TensorError::ShapeMismatch {
            op: "cp_loss",
            shapes: vec![shape, vec![labels.len()], vec![valid.len()]],
        });
    }
    let c = shape[2];
    let y = tape.constant(Tensor::new(shape.clone(), labels.iter().map(|&v| T::of(v as f64)).collect())?);
    let keep = tape.constant(Tensor::new(
        shape.clone(),
        (0..n).map(|i| if valid[i / c] { T::one() } else { T::zero() }).collect(),
    )?);
    // softplus(z) - y z == -[y ln s(z) + (1 - y) ln(1 - s(z))]
    let sp = tape.softplus(logits)?;
    let yz = tape.mul(y, logits)?;
    let per = tape.sub(sp, yz)?;
    let per = tape.mul(per, keep)?;
    let total = tape.sum(per)?;
    tape.scale(total, 1.0 / shape[0] as f64)
}

/// In-batch InfoNCE over cosine similarities between rows of `a` and `b`
/// (both `[B, d]`), positives on the diagonal, logits divided by `tau`.
pub fn info_nce<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, tau: f64) -> Result<Var> {
    let rows = tape.shape(a)[0];
    let sim = tape.cosine_similarity(a, b, COSINE_EPS)?;
    let logits = if tau == 1.0 { sim } else { tape.scale(sim, 1.0 / tau)? };
    let mut eye = vec![T::zero(); rows * rows];
    (0..rows).for_each(|i| eye[i * rows + i] = T::one());
    nll(tape, logits, Tensor::new(vec![rows, rows], eye)?, rows)
}

/// Picks `round(beta * valid_len)` valid slots of each row to replace with a
/// placeholder. Returns the `B x L` mask; deterministic in `seed`.
pub fn placeholder_slots(valid_lengths: &[usize], len: usize, beta: f64, seed: u64) -> Vec<bool> {
    let mut mask = vec![false; valid_lengths.len() * len];
    for (row, &v) in valid_lengths.iter().enumerate() {
        let count = ((beta * v as f64).round() as usize).min(v);
        if count == 0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (row as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        for k in sample(&mut rng, v, count) {
            mask[row * len + (len - v) + k] = true;
        }
    }
    mask
}

/// `s` with the slots flagged in `slots` (`B x L`) taken from `placeholder`.
/// Returns `s` itself when no slot is flagged.
pub fn replace_slots<T: Scalar>(tape: &mut Tape<T>, s: Var, placeholder: Var, slots: &[bool]) -> Result<Var> {
    if !slots.iter().any(|&m| m) {
        return Ok(s);
    }
    let shape = tape.shape(s).to_vec();
    let d = shape[shape.len() - 1];
    let pick = |on: bool| -> Vec<T> {
        (0..slots.len() * d).map(|i| if slots[i / d] == on { T::one() } else { T::zero() }).collect()
    };
    let keep = tape.constant(Tensor::new(shape.clone(), pick(false))?);
    let put = tape.constant(Tensor::new(shape, pick(true))?);
    let kept = tape.mul(s, keep)?;
    let placed = tape.mul(placeholder, put)?;
    tape.add(kept, placed)
}

/// Weighted combination of the four objectives. Terms given as `None` are
/// left out of the graph entirely.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, main: Var, aux: [(Option<Var>, f64); 3]) -> Result<Var> {
    let mut total = main;
    for (term, weight) in aux {
        if let Some(t) = term {
            let w = tape.scale(t, weight)?;
            total = tape.add(total, w)?;
        }
    }
    Ok(total)
}

/// Loss components of one batch (or their epoch average).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub main: f64,
    pub cp: f64,
    pub idcl: f64,
    pub pcl: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.main, self.cp, self.idcl, self.pcl, self.total].iter().all(|x| x.is_finite())
    }

    /// `main + l1 cp + l2 idcl + l3 pcl` recomputed from the parts.
    pub fn combined(&self) -> f64 {
        self.main + self.lambda1 * self.cp + self.lambda2 * self.idcl + self.lambda3 * self.pcl
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DropoutContext;
    use proptest::prelude::*;

    fn tape() -> Tape<f64> {
        Tape::new(DropoutContext::eval())
    }

    fn c(tape: &mut Tape<f64>, shape: &[usize], data: &[f64]) -> Var {
        tape.constant(Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    fn value(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn main_loss_examples() {
        let mut t = tape();
        let s = c(&mut t, &[1, 20], &[0.3; 20]);
        let l = main_loss(&mut t, s, &[4]).unwrap();
        assert!((value(&t, l) - 20f64.ln()).abs() < 1e-12);

        let mut big = vec![0.0; 5];
        big[2] = 1000.0;
        let s = c(&mut t, &[1, 5], &big);
        let l = main_loss(&mut t, s, &[2]).unwrap();
        assert!(value(&t, l).abs() < 1e-12);

        let s = c(&mut t, &[1, 3], &[1.0, 2.0, 3.0]);
        let l = main_loss(&mut t, s, &[2]).unwrap();
        assert!((value(&t, l) - 0.407_605_964).abs() < 1e-8);
    }

    #[test]
    fn category_loss_examples() {
        let mut t = tape();
        let z = c(&mut t, &[1, 2, 4], &[0.0; 8]);
        let l = cp_loss(&mut t, z, &[1, 0, 1, 1, 0, 1, 0, 0], &[false, true]).unwrap();
        assert!((value(&t, l) - 4.0 * 2f64.ln()).abs() < 1e-12);

        let logit = |p: f64| (p / (1.0 - p)).ln();
        let z = c(&mut t, &[1, 1, 2], &[logit(0.9), logit(0.2)]);
        let l = cp_loss(&mut t, z, &[1, 0], &[true]).unwrap();
        assert!((value(&t, l) - 0.328_504_066).abs() < 1e-8);

        let z = c(&mut t, &[1, 1, 2], &[40.0, -40.0]);
        let l = cp_loss(&mut t, z, &[1, 0], &[true]).unwrap();
        assert!(value(&t, l) < 1e-15);
    }

    #[test]
    fn contrastive_examples() {
        let mut t = tape();
        let a = c(&mut t, &[1, 3], &[0.2, -1.0, 0.5]);
        let b = c(&mut t, &[1, 3], &[3.0, 1.0, 0.0]);
        let l = info_nce(&mut t, a, b, 0.2).unwrap();
        assert_eq!(value(&t, l), 0.0);

        let h = c(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let l = info_nce(&mut t, h, h, 1.0).unwrap();
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((value(&t, l) - want).abs() < 1e-12);
        assert!((want - 0.313_261_687).abs() < 1e-8);
    }

    #[test]
    fn placeholder_slot_counts() {
        assert!(placeholder_slots(&[4, 6, 1], 6, 0.0, 1).iter().all(|&m| !m));
        for seed in 0..50 {
            let mask = placeholder_slots(&[4, 6], 6, 0.5, seed);
            assert_eq!(mask[..6].iter().filter(|&&m| m).count(), 2);
            assert!(!mask[0] && !mask[1], "padding is never replaced");
            assert_eq!(mask[6..].iter().filter(|&&m| m).count(), 3);
        }
        assert_eq!(placeholder_slots(&[4, 6], 6, 0.5, 9), placeholder_slots(&[4, 6], 6, 0.5, 9));
    }

    #[test]
    fn replaced_slots_take_the_placeholder() {
        let mut t = tape();
        let s = c(&mut t, &[1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = c(&mut t, &[1, 3, 2], &[-7.0; 6]);
        assert_eq!(replace_slots(&mut t, s, p, &[false; 3]).unwrap(), s);
        let r = replace_slots(&mut t, s, p, &[false, true, false]).unwrap();
        assert_eq!(t.value(r).data(), &[1.0, 2.0, -7.0, -7.0, 5.0, 6.0]);
    }

    #[test]
    fn total_loss_examples() {
        let mut t = tape();
        let parts: Vec<Var> = [0.5, 2.0, 0.3, 0.4].iter().map(|&v| c(&mut t, &[1], &[v])).collect();
        let total = total_loss(&mut t, parts[0], [(Some(parts[1]), 1.0), (Some(parts[2]), 0.5), (Some(parts[3]), 0.5)]).unwrap();
        assert!((value(&t, total) - 2.85).abs() < 1e-12);
        let total = total_loss(&mut t, parts[0], [(Some(parts[1]), 0.0), (Some(parts[2]), 0.0), (Some(parts[3]), 0.0)]).unwrap();
        assert_eq!(value(&t, total), 0.5);
        let ones: Vec<Var> = (0..4).map(|_| c(&mut t, &[1], &[1.0])).collect();
        let total = total_loss(&mut t, ones[0], [(Some(ones[1]), 1.0), (Some(ones[2]), 1.0), (Some(ones[3]), 1.0)]).unwrap();
        assert_eq!(value(&t, total), 4.0);
        let b = LossBreakdown { main: 0.5, cp: 2.0, idcl: 0.3, pcl: 0.4, total: 2.85, lambda1: 1.0, lambda2: 0.5, lambda3: 0.5 };
        assert!((b.combined() - b.total).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn info_nce_ignores_row_scale_and_joint_permutation(
            rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 6), 2..5),
            scales in prop::collection::vec(0.1f64..10.0, 5),
            rot in 0usize..4,
        ) {
            let b = rows.len();
            let a: Vec<f64> = rows.iter().flat_map(|r| r[..3].to_vec()).collect();
            let p: Vec<f64> = rows.iter().flat_map(|r| r[3..].to_vec()).collect();
            prop_assume!(rows.iter().all(|r| r[..3].iter().any(|v| v.abs() > 1e-3) && r[3..].iter().any(|v| v.abs() > 1e-3)));
            let mut t = tape();
            let (av, pv) = (c(&mut t, &[b, 3], &a), c(&mut t, &[b, 3], &p));
            let base = info_nce(&mut t, av, pv, 0.2).unwrap();
            let base = value(&t, base);

            let scaled: Vec<f64> = a.iter().enumerate().map(|(i, v)| v * scales[i / 3]).collect();
            let sv = c(&mut t, &[b, 3], &scaled);
            let l = info_nce(&mut t, sv, pv, 0.2).unwrap();
            prop_assert!((value(&t, l) - base).abs() < 1e-9);

            let perm: Vec<usize> = (0..b).map(|i| (i + rot) % b).collect();
            let pa: Vec<f64> = perm.iter().flat_map(|&r| a[r * 3..r * 3 + 3].to_vec()).collect();
            let pp: Vec<f64> = perm.iter().flat_map(|&r| p[r * 3..r * 3 + 3].to_vec()).collect();
            let (x, y) = (c(&mut t, &[b, 3], &pa), c(&mut t, &[b, 3], &pp));
            let l = info_nce(&mut t, x, y, 0.2).unwrap();
            prop_assert!((value(&t, l) - base).abs() < 1e-9);
        }

        #[test]
        fn main_loss_falls_as_target_score_rises(
            scores in prop::collection::vec(-5.0f64..5.0, 2..12),
            bump in 0.01f64..3.0,
            target in 0usize..12,
        ) {
            let n = scores.len();
            let target = target % n;
            let mut t = tape();
            let s = c(&mut t, &[1, n], &scores);
            let l0 = main_loss(&mut t, s, &[target]).unwrap();
            let mut up = scores.clone();
            up[target] += bump;
            let s = c(&mut t, &[1, n], &up);
            let l1 = main_loss(&mut t, s, &[target]).unwrap();
            prop_assert!(value(&t, l0) >= 0.0);
            prop_assert!(value(&t, l1) < value(&t, l0));
        }
    }
}
