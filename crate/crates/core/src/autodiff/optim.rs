use super::tensor::ParamStore;
use crate::error::{Error, Result};

/// Per-parameter running averages kept by [`Adadelta`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdadeltaSlot {
    pub sq_grad: Vec<f64>,
    pub sq_delta: Vec<f64>,
}

/// Adadelta: `E[g²] ← ρE[g²] + (1-ρ)g²`,
/// `Δ = -√(E[Δ²]+ε)/√(E[g²]+ε) · g`, `E[Δ²] ← ρE[Δ²] + (1-ρ)Δ²`.
#[derive(Clone, Debug)]
pub struct Adadelta {
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
    slots: Vec<AdadeltaSlot>,
}

impl Adadelta {
    pub fn new(rho: f64, eps: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) || !(eps > 0.0) {
            return Err(Error::Config(format!(
                "adadelta needs 0 < rho < 1 and eps > 0 (rho={rho}, eps={eps})"
            )));
        }
        Ok(Adadelta {
            rho,
            eps,
            lr: 1.0,
            slots: Vec::new(),
        })
    }

    pub fn slots(&self) -> &[AdadeltaSlot] {
        &self.slots
    }

    pub fn set_slots(&mut self, slots: Vec<AdadeltaSlot>) {
        self.slots = slots;
    }

    fn ensure_slots(&mut self, store: &ParamStore) {
        if self.slots.len() != store.len() {
            self.slots = store
                .iter()
                .map(|(_, t)| AdadeltaSlot {
                    sq_grad: vec![0.0; t.numel()],
                    sq_delta: vec![0.0; t.numel()],
                })
                .collect();
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        require_grads(store)?;
        self.ensure_slots(store);
        let (rho, eps, lr) = (self.rho, self.eps, self.lr);
        for (tensor, slot) in store.iter_mut().zip(self.slots.iter_mut()) {
            let grad = tensor.grad().expect("checked above").to_vec();
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                slot.sq_grad[i] = rho * slot.sq_grad[i] + (1.0 - rho) * g * g;
                let delta = -((slot.sq_delta[i] + eps).sqrt() / (slot.sq_grad[i] + eps).sqrt()) * g;
                slot.sq_delta[i] = rho * slot.sq_delta[i] + (1.0 - rho) * delta * delta;
                data[i] += lr * delta;
            }
        }
        Ok(())
    }
}

/// Plain gradient descent.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        require_grads(store)?;
        for tensor in store.iter_mut() {
            let grad = tensor.grad().expect("checked above").to_vec();
            tensor
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .for_each(|(w, g)| *w -= self.lr * g);
        }
        Ok(())
    }
}

fn require_grads(store: &ParamStore) -> Result<()> {
    for (name, t) in store.iter() {
        if t.grad().is_none() {
            return Err(Error::contract(format!("parameter {name} has no gradient")));
        }
    }
    Ok(())
}

/// Rescales all gradients in `stores` so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(stores: &mut [&mut ParamStore], max_norm: f64) -> f64 {
    let norm = stores.iter().map(|s| s.grad_sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for s in stores.iter_mut() {
            s.scale_grads(factor);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn scalar_store(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(&[1], vec![value]).unwrap());
        s.get_mut(id).accumulate_grad(&[grad]);
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(0.5, 0.0);
        let mut opt = Adadelta::new(0.95, 1e-6).unwrap();
        opt.step(&mut s).unwrap();
        assert_eq!(s.flat_values(), vec![0.5]);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let mut s = scalar_store(0.0, 1.0);
        let mut opt = Adadelta::new(0.95, 1e-6).unwrap();
        opt.step(&mut s).unwrap();
        let expected = -(1e-6f64 / (0.05 + 1e-6)).sqrt();
        assert!((s.flat_values()[0] - expected).abs() < 1e-15);
        assert!((expected + 4.4721e-3).abs() < 1e-7);
    }

    #[test]
    fn step_size_grows_under_constant_gradient() {
        let mut s = scalar_store(0.0, 1.0);
        let mut opt = Adadelta::new(0.95, 1e-6).unwrap();
        opt.step(&mut s).unwrap();
        let d1 = s.flat_values()[0];
        opt.step(&mut s).unwrap();
        let d2 = s.flat_values()[0] - d1;
        assert!(d2.abs() > d1.abs());
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2]));
        let mut opt = Adadelta::new(0.95, 1e-6).unwrap();
        assert!(matches!(opt.step(&mut s), Err(Error::Contract(_))));
        assert!(matches!(Sgd { lr: 0.1 }.step(&mut s), Err(Error::Contract(_))));
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut s = scalar_store(1.0, 2.0);
        Sgd { lr: 0.25 }.step(&mut s).unwrap();
        assert_eq!(s.flat_values(), vec![0.5]);
    }

    #[test]
    fn clipping_bounds_joint_norm() {
        let mut a = scalar_store(0.0, 3.0);
        let mut b = scalar_store(0.0, 4.0);
        let norm = clip_grad_norm(&mut [&mut a, &mut b], 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let after = (a.grad_sq_norm() + b.grad_sq_norm()).sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
