//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::nn::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Every registered parameter must have a
    /// gradient; nothing is modified otherwise.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::invalid(
                "adam_step",
                format!("state tracks {} parameters, store has {}", self.m.len(), store.len()),
            ));
        }
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for &id in &ids {
            match grads.get(id) {
                Some(g) if g.shape() == store.get(id).shape() => {}
                Some(g) => {
                    return Err(Error::ShapeMismatch {
                        op: "adam_step",
                        lhs: store.get(id).shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    })
                }
                None => return Err(Error::MissingGradient(store.name(id).to_string())),
            }
        }

        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, &id) in ids.iter().enumerate() {
            let g = grads.get(id).expect("checked above").data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
