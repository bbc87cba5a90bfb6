use ndarray::{ArrayD, Zip};

use crate::{Grads, Scalar};

/// Hyperparameters of adaptive moment estimation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
}

/// Adam optimizer bound to a single parameter group.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &[&ArrayD<T>]) -> Self {
        let zeros = || params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        Self { config, state: AdamState { step: 0, m: zeros(), v: zeros() } }
    }

    /// Applies one update. Parameters and gradients must be aligned.
    pub fn step(&mut self, params: Vec<&mut ArrayD<T>>, grads: &Grads<T>) {
        assert_eq!(params.len(), grads.tensors.len(), "adam: gradient count");
        self.state.step += 1;
        let t = self.state.step as i32;
        let c = &self.config;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(&grads.tensors)
            .zip(self.state.m.iter_mut().zip(self.state.v.iter_mut()))
        {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}
