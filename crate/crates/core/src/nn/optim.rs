use super::{Grads, ParamStore};
use crate::real::Real;

/// Adam with bias correction; updates trainable entries only.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Vec<T>> = store
            .entries()
            .iter()
            .map(|e| vec![T::zero(); e.data.len()])
            .collect();
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

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            if !entry.trainable {
                continue;
            }
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.data[i]);
            for j in 0..entry.data.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                entry.data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
