//! SGD with momentum and weight decay.

use super::Element;
use crate::error::{CoreError, Result};
use crate::params::{ParamId, ParamStore};
use std::collections::HashMap;

/// Mini-batch SGD: `v <- momentum*v + grad + weight_decay*param`,
/// `param <- param - lr*v`. Velocity buffers are kept per parameter.
#[derive(Debug, Clone)]
pub struct SgdMomentum<E: Element> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<ParamId, Vec<E>>,
}

impl<E: Element> SgdMomentum<E> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        assert!(lr >= 0.0 && momentum >= 0.0 && weight_decay >= 0.0);
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Update every trainable weight from its accumulated gradient, then
    /// clear all gradients. A trainable weight without a gradient is an
    /// error: it means the forward pass never touched it.
    pub fn step(&mut self, store: &mut ParamStore<E>) -> Result<()> {
        let lr = E::from_f64(self.lr);
        let mom = E::from_f64(self.momentum);
        let wd = E::from_f64(self.weight_decay);
        let ids: Vec<ParamId> = store
            .ids()
            .filter(|&id| store.is_trainable(id))
            .collect();
        for id in ids {
            let numel = store.get(id).numel();
            let grad = match store.get(id).grad.clone() {
                Some(g) => g,
                None => {
                    return Err(CoreError::MissingGrad {
                        name: store.name(id).to_string(),
                    })
                }
            };
            let vel = self
                .velocity
                .entry(id)
                .or_insert_with(|| vec![E::ZERO; numel]);
            let tensor = store.get_mut(id);
            let data = tensor.data_mut();
            for i in 0..numel {
                vel[i] = mom * vel[i] + grad[i] + wd * data[i];
                data[i] -= lr * vel[i];
            }
        }
        store.clear_grads();
        Ok(())
    }

    /// Drop all velocity state (used between training phases).
    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(value: f64, grad: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store
            .add_weight("p", Tensor::from_vec(vec![1], vec![value]).unwrap())
            .unwrap();
        store.get_mut(id).accumulate_grad(&[grad]);
        (store, id)
    }

    #[test]
    fn vanilla_step() {
        // momentum 0, wd 0, lr 0.1, grad 1, param 1 -> 0.9
        let (mut store, id) = store_with(1.0, 1.0);
        let mut opt = SgdMomentum::new(0.1, 0.0, 0.0);
        opt.step(&mut store).unwrap();
        assert!((store.get(id).data()[0] - 0.9).abs() < 1e-12);
        assert!(store.get(id).grad.is_none(), "grads cleared after step");
    }

    #[test]
    fn zero_lr_keeps_params() {
        let (mut store, id) = store_with(1.25, 3.0);
        let mut opt = SgdMomentum::new(0.0, 0.9, 0.0);
        opt.step(&mut store).unwrap();
        assert_eq!(store.get(id).data()[0], 1.25);
    }

    #[test]
    fn momentum_recurrence_over_two_steps() {
        // constant grad g: total delta = -lr*(g + (0.9g + g))
        let g = 2.0;
        let lr = 0.05;
        let (mut store, id) = store_with(1.0, g);
        let mut opt = SgdMomentum::new(lr, 0.9, 0.0);
        opt.step(&mut store).unwrap();
        store.get_mut(id).accumulate_grad(&[g]);
        opt.step(&mut store).unwrap();
        let expected = 1.0 - lr * (g + (0.9 * g + g));
        assert!((store.get(id).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        store
            .add_weight("p", Tensor::from_vec(vec![1], vec![1.0]).unwrap())
            .unwrap();
        let mut opt = SgdMomentum::new(0.1, 0.0, 0.0);
        assert!(matches!(
            opt.step(&mut store),
            Err(CoreError::MissingGrad { .. })
        ));
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let (mut store, id) = store_with(1.0, 0.0);
        let mut opt = SgdMomentum::new(0.1, 0.0, 0.5);
        opt.step(&mut store).unwrap();
        // v = 0 + 0 + 0.5*1, p = 1 - 0.1*0.5
        assert!((store.get(id).data()[0] - 0.95).abs() < 1e-12);
    }
}
