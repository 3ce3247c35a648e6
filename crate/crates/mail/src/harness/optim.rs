//! Adam optimizer over a parameter store.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// First/second-moment state aligned with the store's parameter order.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        let v = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Adam { m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Bias-corrected update. Parameters with no gradient this step decay
    /// their moments with a zero gradient, leaving the values unchanged
    /// when the moments are zero too.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Shape(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        for (slot, id) in store.ids().enumerate() {
            if let Some(g) = &grads[slot] {
                if g.shape() != store.get(id).shape() {
                    return Err(Error::Shape(format!(
                        "gradient shape {:?} for parameter {} of shape {:?}",
                        g.shape(),
                        store.name(id),
                        store.get(id).shape()
                    )));
                }
            }
            let zero = vec![0.0; store.get(id).numel()];
            let gd = grads[slot].as_ref().map(|t| t.data()).unwrap_or(&zero);
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let p = store.get_mut(id);
            for ((pi, mi), (vi, gi)) in
                p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut().zip(gd))
            {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= lr * m_hat / (v_hat.sqrt() + EPS);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![2], vec![1.5, -0.5]).unwrap());
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &[Some(Tensor::zeros(&[2]))], 0.1).unwrap();
        adam.step(&mut store, &[None], 0.1).unwrap();
        assert_eq!(store.get(id).data(), &[1.5, -0.5]);
    }

    #[test]
    fn first_step_is_signed_learning_rate() {
        // With bias correction, step 1 moves by ~lr * sign(g).
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0));
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &[Some(Tensor::scalar(0.37))], 0.01).unwrap();
        let moved = 2.0 - store.get(id).data()[0];
        assert!((moved - 0.01).abs() < 1e-6, "moved {moved}");

        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0));
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &[Some(Tensor::scalar(-5.0))], 0.01).unwrap();
        let moved = 2.0 - store.get(id).data()[0];
        assert!((moved + 0.01).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(w) = w^2, grad = 2w; 500 steps at lr 0.05 reach |w| < 1e-3.
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(3.0));
        let mut adam = Adam::new(&store);
        for _ in 0..500 {
            let g = 2.0 * store.get(id).data()[0];
            adam.step(&mut store, &[Some(Tensor::scalar(g))], 0.05).unwrap();
        }
        assert!(store.get(id).data()[0].abs() < 1e-3);
    }

    #[test]
    fn mismatched_gradient_shape_is_an_error() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2]));
        let mut adam = Adam::new(&store);
        assert!(adam.step(&mut store, &[Some(Tensor::zeros(&[3]))], 0.1).is_err());
        assert!(adam.step(&mut store, &[], 0.1).is_err());
    }
}
