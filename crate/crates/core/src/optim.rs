//! Adam with bias correction.

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape("adam_step", &[params.len()], &[grads.len()]));
        }
        for ((p, g), m) in params.values().iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![w]));
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = scalar_store(0.7);
        let mut adam = AdamState::new(&store, 0.1);
        for _ in 0..5 {
            adam.step(&mut store, &[Tensor::zeros(&[1])]).unwrap();
        }
        assert_eq!(store.values()[0].data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(0.0);
        let mut adam = AdamState::new(&store, 0.1);
        adam.step(&mut store, &[Tensor::vector(vec![1.0])]).unwrap();
        let w = store.values()[0].data()[0];
        assert!((w + 0.1).abs() < 1e-8, "{w}");
    }

    #[test]
    fn descends_quadratic() {
        let mut store = scalar_store(1.0);
        let mut adam = AdamState::new(&store, 0.1);
        for _ in 0..100 {
            let w = store.values()[0].data()[0];
            adam.step(&mut store, &[Tensor::vector(vec![2.0 * w])]).unwrap();
        }
        let w = store.values()[0].data()[0];
        assert!(w.abs() < 0.05, "{w}");
    }

    #[test]
    fn shape_mismatch() {
        let mut store = scalar_store(1.0);
        let mut adam = AdamState::new(&store, 0.1);
        assert!(adam.step(&mut store, &[Tensor::zeros(&[2])]).is_err());
    }
}
