//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{config_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to rank-2 parameters only.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First/second moments for every parameter of a store, plus the step count.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.first, &self.second)
    }

    /// Apply one bias-corrected update. `grads` is in store order.
    ///
    /// A non-finite gradient aborts before any parameter is touched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.first.len() {
            return Err(config_err!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                params.len()
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(config_err!("adam: gradient shape {:?} for {} {:?}", g.shape(), p.name, p.value.shape()));
            }
            if let Some(pos) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite gradient in {} at flat index {pos} (step {})",
                    p.name,
                    self.step + 1
                )));
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let bc1 = T::of(1.0 - c.beta1.powf(t));
        let bc2 = T::of(1.0 - c.beta2.powf(t));
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);
        let wd = T::of(c.weight_decay);

        for (i, p) in params.iter_mut().enumerate() {
            let decays = p.value.shape().len() == 2 && c.weight_decay > 0.0;
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let g = grads[i].data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut update = mhat / (vhat.sqrt() + eps);
                if decays {
                    update = update + wd * *w;
                }
                *w = *w - lr * update;
            }
        }
        Ok(())
    }
}

/// Rescale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm().f64()).sum::<f64>().sqrt();
    if norm.is_finite() && norm > max_norm && max_norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x = *x * s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(x)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::<f64>::full(&[2, 2], 0.7)).unwrap();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(&store, cfg);
        for _ in 0..3 {
            adam.step(&mut store, &[Tensor::zeros(&[2, 2])]).unwrap();
        }
        assert!(store.get("w").unwrap().data().iter().all(|&v| v == 0.7));
        assert_eq!(adam.step_count(), 3);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // m̂ = g and v̂ = g² on step one, so the update is lr·g/(|g|+eps).
        for g in [3.0, -0.25] {
            let mut store = scalar_store(1.0);
            let cfg = AdamConfig {
                lr: 0.01,
                weight_decay: 0.0,
                ..AdamConfig::default()
            };
            let mut adam = AdamState::new(&store, cfg);
            adam.step(&mut store, &[Tensor::scalar(g)]).unwrap();
            let expected = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((store.get("x").unwrap().data()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn hundred_steps_on_quadratic_approach_zero() {
        let mut store = scalar_store(1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(&store, cfg);
        for _ in 0..100 {
            let x = store.get("x").unwrap().data()[0];
            adam.step(&mut store, &[Tensor::scalar(2.0 * x)]).unwrap();
        }
        let x = store.get("x").unwrap().data()[0];
        assert!(x.abs() < 0.1, "x = {x}");
    }

    #[test]
    fn nan_gradient_aborts_untouched() {
        let mut store = scalar_store(1.0);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let err = adam.step(&mut store, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)));
        assert_eq!(store.get("x").unwrap().data()[0], 1.0);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn weight_decay_only_touches_matrices() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::<f64>::full(&[1, 1], 1.0)).unwrap();
        store.insert("b", Tensor::<f64>::full(&[1], 1.0)).unwrap();
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(&store, cfg);
        adam.step(&mut store, &[Tensor::zeros(&[1, 1]), Tensor::zeros(&[1])]).unwrap();
        assert!((store.get("w").unwrap().data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(store.get("b").unwrap().data()[0], 1.0);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap()];
        let before = clip_grad_norm(&mut g, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((g[0].sq_norm().sqrt() - 1.0).abs() < 1e-12);
    }
}
