//! Central-difference check of analytic gradients.

use super::{DropoutContext, ParamStore, Result, Tape, TensorError, Var};

/// Floor on the denominator of the relative error, so entries whose true
/// gradient is (numerically) zero are compared on an absolute scale. Central
/// differences at `h = 1e-5` on an O(10) loss carry about 1e-10 of rounding
/// noise; this floor keeps that noise two orders below a 1e-4 tolerance.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(move |t| t.max_rel_error > self.tolerance)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, params: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let loss = f(&mut tape, params)?;
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares the tape gradient of `f` with `(f(x+h) - f(x-h)) / 2h` for every
/// entry of every trainable tensor in `params`.
///
/// `f` must build the scalar objective on the tape it is given; it is called
/// `2 * entries + 2` times.
pub fn grad_check<F>(f: F, params: &mut ParamStore<f64>, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(TensorError::Invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let mut tape = Tape::new(DropoutContext::eval());
    let loss = f(&mut tape, params)?;
    let first = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let second = evaluate(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let ids: Vec<_> = params.iter().filter(|(_, p)| p.requires_grad()).map(|(id, _)| id).collect();
    let mut tensors = Vec::with_capacity(ids.len());
    for id in ids {
        let n = params.value(id).numel();
        let analytic: Vec<f64> = match grads.get(id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; n],
        };
        let mut check = TensorCheck {
            name: params.get(id).name.clone(),
            entries: n,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for i in 0..n {
            let orig = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = orig + step;
            let plus = evaluate(&f, params);
            params.value_mut(id).data_mut()[i] = orig - step;
            let minus = evaluate(&f, params);
            params.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * step);
            let abs = (analytic[i] - numeric).abs();
            check.max_abs_error = check.max_abs_error.max(abs);
            check.max_rel_error = check.max_rel_error.max(relative_error(analytic[i], numeric));
        }
        tensors.push(check);
    }
    Ok(GradCheckReport { tolerance, tensors })
}
