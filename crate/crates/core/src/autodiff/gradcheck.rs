use super::tape::{Tape, Var};
use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn eval_at<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let out = f(&mut tape, v)?;
    Ok(tape.scalar(out))
}

/// Largest relative discrepancy between the tape gradient of `f` at `x` and
/// central differences with step `eps`, normalised by `max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::contract("grad_check eps must be positive"));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(&x.clone().with_requires_grad(true));
    let out = f(&mut tape, xv)?;
    let f0 = tape.scalar(out);
    tape.backward(out)?;
    let analytic = tape
        .leaf_grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    if eval_at(&f, x)?.to_bits() != f0.to_bits() {
        return Err(Error::contract("function is not deterministic"));
    }

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval_at(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval_at(&f, &probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}

/// Anything that owns a [`ParamStore`] and computes with it.
pub trait Parameterized {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl Parameterized for ParamStore {
    fn params(&self) -> &ParamStore {
        self
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self
    }
}

/// Finite-difference check of a loss with respect to the parameters owned by
/// `model`. At most `max_per_tensor` evenly spaced coordinates of each
/// parameter are probed.
pub fn grad_check_params<M, F>(model: &mut M, f: F, eps: f64, max_per_tensor: usize) -> Result<f64>
where
    M: Parameterized,
    F: Fn(&mut Tape, &M) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::contract("grad_check eps must be positive"));
    }
    let eval = |m: &M| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, m)?;
        Ok(tape.scalar(out))
    };

    model.params_mut().zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, model)?;
    let f0 = tape.scalar(out);
    tape.backward(out)?;
    tape.accumulate_param_grads(model.params_mut());
    drop(tape);
    if eval(model)?.to_bits() != f0.to_bits() {
        return Err(Error::contract("function is not deterministic"));
    }

    let mut worst = 0.0f64;
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let n = model.params().get(id).numel();
        let analytic = model
            .params()
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let stride = n.div_ceil(max_per_tensor.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = model.params().get(id).data()[i];
            model.params_mut().get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(model)?;
            model.params_mut().get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(model)?;
            model.params_mut().get_mut(id).data_mut()[i] = orig;
            worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * eps)));
        }
    }
    model.params_mut().zero_grad();
    Ok(worst)
}
