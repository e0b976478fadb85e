//! Adam.

use crate::autograd::Grads;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moment estimates, one pair per parameter of the store
/// the optimiser was created for.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Grads<F>, lr: f64) {
        assert_eq!(self.m.len(), store.len(), "optimiser state does not match the parameter store");
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        let step_size = F::of(lr / bc1);
        let (b1, b2) = (F::of(BETA1), F::of(BETA2));
        let (one_b1, one_b2) = (F::of(1.0 - BETA1), F::of(1.0 - BETA2));
        let inv_sqrt_bc2 = F::of(1.0 / bc2.sqrt());
        let eps = F::of(EPS);
        for (id, g) in grads.iter() {
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                p[j] -= step_size * m[j] / (v[j].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
    }

    /// `(name, tensor)` pairs for serialisation, keyed by parameter name.
    pub fn state_tensors(&self, store: &ParamStore<F>) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for id in store.ids() {
            out.push((format!("adam.m.{}", store.name(id)), self.m[id.index()].clone()));
            out.push((format!("adam.v.{}", store.name(id)), self.v[id.index()].clone()));
        }
        out
    }

    /// Rebuild from [`Adam::state_tensors`] output.
    pub fn restore(store: &ParamStore<F>, step: u64, lookup: impl Fn(&str) -> Option<Tensor<F>>) -> Result<Self> {
        let mut adam = Self::new(store);
        adam.step = step;
        for id in store.ids() {
            let name = store.name(id);
            for (slot, kind) in [(&mut adam.m, "m"), (&mut adam.v, "v")] {
                let key = format!("adam.{kind}.{name}");
                let t = lookup(&key).ok_or_else(|| Error::Checkpoint(format!("missing optimiser state {key}")))?;
                if t.shape() != store.get(id).shape() {
                    return Err(Error::Checkpoint(format!("optimiser state {key} has shape {:?}", t.shape())));
                }
                slot[id.index()] = t;
            }
        }
        Ok(adam)
    }
}
