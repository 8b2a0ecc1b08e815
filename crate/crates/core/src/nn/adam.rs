use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::Tensor2;
use crate::scalar::Real;

/// Bias-corrected Adam over a fixed group of parameters.
///
/// Parameters whose accumulated gradient is exactly zero are skipped, moments
/// included, so an all-zero gradient never moves a parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u64,
    params: Vec<ParamId>,
    m: Vec<Tensor2<T>>,
    v: Vec<Tensor2<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, params: Vec<ParamId>, lr: T) -> Self {
        let zeros = |id: &ParamId| {
            let (r, c) = store.value(*id).shape();
            Tensor2::zeros(r, c)
        };
        Self {
            lr,
            beta1: T::from_f64_lossy(0.9),
            beta2: T::from_f64_lossy(0.999),
            eps: T::from_f64_lossy(1e-8),
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            params,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// One update from the gradients currently accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for &id in &self.params {
            let g = store.grad(id);
            if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("adam step {} gradient of `{}`", self.step + 1, store.name(id)),
                    detail: format!("entry {pos} = {}", g.data()[pos]),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let one = T::one();
        let bc1 = one - self.beta1.powi(t);
        let bc2 = one - self.beta2.powi(t);
        for (i, &id) in self.params.iter().enumerate() {
            let grad = store.grad(id).clone();
            if grad.data().iter().all(|&x| x == T::zero()) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let value = store.value_mut(id);
            for (((p, &g), mm), vv) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mm = self.beta1 * *mm + (one - self.beta1) * g;
                *vv = self.beta2 * *vv + (one - self.beta2) * g * g;
                let mhat = *mm / bc1;
                let vhat = *vv / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
