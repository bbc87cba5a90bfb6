use ndarray::ArrayD;
use rand::RngCore;

use crate::layer::{Cache, Layer};
use crate::{Scalar, Tensor};

/// Evaluation mode. `Train` uses batch statistics and active dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-layer caches recorded by [`Sequential::forward`].
#[derive(Clone, Debug)]
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
}

/// Gradient buffers aligned with [`Sequential::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    pub tensors: Vec<ArrayD<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn scale(&mut self, factor: T) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| *v == T::zero()))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// A feed-forward chain of layers.
#[derive(Clone, Debug, Default)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        mut rng: Option<&mut dyn RngCore>,
    ) -> (Tensor<T>, Tape<T>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let r: Option<&mut dyn RngCore> = match &mut rng {
                Some(r) => Some(&mut **r),
                None => None,
            };
            let (y, cache) = layer.forward(&h, mode, r);
            caches.push(cache);
            h = y;
        }
        (h, Tape { caches })
    }

    /// Evaluation-mode forward pass without keeping a tape.
    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.forward(x, Mode::Eval, None).0
    }

    /// Backpropagates `gy` through the whole chain. Parameter gradients are
    /// accumulated into `grads` when given; the input gradient is returned
    /// only when `need_input` is set.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        gy: Tensor<T>,
        mut grads: Option<&mut Grads<T>>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        assert_eq!(tape.caches.len(), self.layers.len(), "tape from a different network");
        let offsets = self.param_offsets();
        let mut g = gy;
        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            let want_input = idx > 0 || need_input;
            let layer_grads = grads
                .as_deref_mut()
                .map(|gr| &mut gr.tensors[offsets[idx]..offsets[idx + 1]]);
            {
                let next = layer.backward(&tape.caches[idx], g, layer_grads, want_input)?;
                g = next
            }
        }
        Some(g)
    }

    /// Folds training-mode batch statistics from `tape` into running estimates.
    pub fn absorb_stats(&mut self, tape: &Tape<T>) {
        for (layer, cache) in self.layers.iter_mut().zip(&tape.caches) {
            if let (Layer::BatchNorm(bn), Cache::BatchNorm(c)) = (layer, cache) {
                bn.absorb(c);
            }
        }
    }

    fn param_offsets(&self) -> Vec<usize> {
        let mut offsets = vec![0];
        for layer in &self.layers {
            offsets.push(offsets.last().unwrap() + layer.param_names().len());
        }
        offsets
    }

    pub fn params(&self) -> Vec<&ArrayD<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn buffers(&self) -> Vec<&ArrayD<T>> {
        self.layers.iter().flat_map(|l| l.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut ArrayD<T>> {
        self.layers.iter_mut().flat_map(|l| l.buffers_mut()).collect()
    }

    /// Stable names for parameters, e.g. `"3.weight"`.
    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.param_names().iter().map(move |n| format!("{i}.{n}")))
            .collect()
    }

    pub fn buffer_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::BatchNorm(_)))
            .flat_map(|(i, _)| [format!("{i}.running_mean"), format!("{i}.running_var")])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            tensors: self.params().iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
        }
    }
}
