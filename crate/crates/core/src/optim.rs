//! Adam with bias correction and a constant step size.

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First moments in parameter order.
    pub m: Vec<Tensor>,
    /// Second moments in parameter order.
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(Error::config(format!(
                "optimizer tracks {} tensors but the model has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (id, name, p) in store.iter() {
            let i = id.index();
            if self.m[i].shape() != p.shape() || self.v[i].shape() != p.shape() {
                return Err(Error::config(format!("optimizer moment shape mismatch for {name}")));
            }
        }
        Ok(())
    }
}

/// One Adam update of every parameter in `store`. `grads` must hold exactly
/// one gradient per parameter, shaped like it.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    state.check(store)?;
    if grads.len() != store.len() || grads.keys().any(|id| id.index() >= store.len()) {
        let have: Vec<usize> = grads.keys().map(|id| id.index()).collect();
        return Err(Error::config(format!(
            "gradient keys {have:?} do not match the {} model parameters",
            store.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (&id, g) in grads {
        let i = id.index();
        if g.shape() != store.get(id).shape() {
            return Err(Error::shape("adam_step gradient", g.shape(), store.get(id).shape()));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = store.get_mut(id).data_mut();
        for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
