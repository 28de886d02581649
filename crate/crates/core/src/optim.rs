//! Adam without weight decay.

use ndarray::Array2;

use crate::autograd::{Gradients, ParamStore, Real};

#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Array2<F>>,
    v: Vec<Array2<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(store: &ParamStore<F>, lr: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, p)| Array2::zeros(p.raw_dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Gradients<F>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let one = F::one();
        let bc1 = F::of(1.0 - self.beta1.powi(t));
        let bc2 = F::of(1.0 - self.beta2.powi(t));
        let lr = F::of(self.lr);
        let eps = F::of(self.eps);
        for ((id, g), (m, v)) in store
            .ids()
            .collect::<Vec<_>>()
            .into_iter()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}
