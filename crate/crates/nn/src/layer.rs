use ndarray::{Array2, ArrayD, IxDyn, Zip};
use rand::{Rng, RngCore};

use crate::norm::BatchNormCache;
use crate::sequential::Mode;
use crate::{BatchNorm, Conv2d, ConvTranspose2d, Linear, MaxPool2d, Scalar, Tensor};

/// One stage of a [`crate::Sequential`] network.
#[derive(Clone, Debug)]
pub enum Layer<T> {
    Linear(Linear<T>),
    Conv2d(Conv2d<T>),
    ConvTranspose2d(ConvTranspose2d<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
    LeakyRelu(T),
    Tanh,
    Sigmoid,
    /// `[N, ...]` to `[N, prod(...)]`.
    Flatten,
    /// `[N, prod(shape)]` to `[N, shape...]`.
    Unflatten(Vec<usize>),
    MaxPool2d(MaxPool2d),
    /// Inverted dropout with the given drop probability.
    Dropout(T),
}

/// Forward-pass state retained for the backward pass of one layer.
#[derive(Clone, Debug)]
pub enum Cache<T> {
    Input(Tensor<T>),
    Patches(Array2<T>, Vec<usize>),
    ChannelMajor(Array2<T>, Vec<usize>),
    BatchNorm(BatchNormCache<T>),
    Output(Tensor<T>),
    Shape(Vec<usize>),
    Pool(Vec<usize>, Vec<usize>),
    /// Per-element dropout scale; empty when dropout was inactive.
    Mask(Vec<T>),
}

fn pair<T>(g: &mut [ArrayD<T>]) -> (&mut ArrayD<T>, &mut ArrayD<T>) {
    match g {
        [a, b] => (a, b),
        _ => panic!("expected two gradient buffers"),
    }
}

impl<T: Scalar> Layer<T> {
    pub fn params(&self) -> Vec<&ArrayD<T>> {
        match self {
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::Conv2d(l) => vec![&l.weight, &l.bias],
            Layer::ConvTranspose2d(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<T>> {
        match self {
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Conv2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::ConvTranspose2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            _ => Vec::new(),
        }
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<&ArrayD<T>> {
        match self {
            Layer::BatchNorm(l) => vec![&l.running_mean, &l.running_var],
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut ArrayD<T>> {
        match self {
            Layer::BatchNorm(l) => vec![&mut l.running_mean, &mut l.running_var],
            _ => Vec::new(),
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            Layer::Linear(_) | Layer::Conv2d(_) | Layer::ConvTranspose2d(_) => &["weight", "bias"],
            Layer::BatchNorm(_) => &["gamma", "beta"],
            _ => &[],
        }
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        rng: Option<&mut dyn RngCore>,
    ) -> (Tensor<T>, Cache<T>) {
        match self {
            Layer::Linear(l) => (l.forward(x), Cache::Input(x.clone())),
            Layer::Conv2d(l) => {
                let (y, cols) = l.forward(x);
                (y, Cache::Patches(cols, x.shape().to_vec()))
            }
            Layer::ConvTranspose2d(l) => {
                let (y, x2) = l.forward(x);
                (y, Cache::ChannelMajor(x2, x.shape().to_vec()))
            }
            Layer::BatchNorm(l) => {
                let (y, cache) = l.forward(x, mode == Mode::Train);
                (y, Cache::BatchNorm(cache))
            }
            Layer::Relu => {
                let y = x.mapv(|v| if v > T::zero() { v } else { T::zero() });
                (y.clone(), Cache::Output(y))
            }
            Layer::LeakyRelu(slope) => {
                let s = *slope;
                let y = x.mapv(|v| if v > T::zero() { v } else { v * s });
                (y, Cache::Input(x.clone()))
            }
            Layer::Tanh => {
                let y = x.mapv(T::tanh);
                (y.clone(), Cache::Output(y))
            }
            Layer::Sigmoid => {
                let y = x.mapv(|v| T::one() / (T::one() + (-v).exp()));
                (y.clone(), Cache::Output(y))
            }
            Layer::Flatten => {
                let n = x.shape()[0];
                let rest = x.len() / n.max(1);
                let y = x
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&[n, rest]))
                    .expect("flatten");
                (y, Cache::Shape(x.shape().to_vec()))
            }
            Layer::Unflatten(shape) => {
                let n = x.shape()[0];
                let mut full = vec![n];
                full.extend_from_slice(shape);
                let y = x
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&full))
                    .expect("unflatten: element count");
                (y, Cache::Shape(x.shape().to_vec()))
            }
            Layer::MaxPool2d(p) => {
                let (y, argmax) = p.forward(x);
                (y, Cache::Pool(argmax, x.shape().to_vec()))
            }
            Layer::Dropout(p) => {
                if mode != Mode::Train || *p <= T::zero() {
                    return (x.clone(), Cache::Mask(Vec::new()));
                }
                let rng = rng.expect("dropout in training mode needs a random source");
                let keep = T::one() - *p;
                let scale = T::one() / keep;
                let keep_f = keep.to_f64().expect("probability");
                let mask: Vec<T> = (0..x.len())
                    .map(|_| if rng.random::<f64>() < keep_f { scale } else { T::zero() })
                    .collect();
                let mut y = x.as_standard_layout().into_owned();
                y.iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
                (y, Cache::Mask(mask))
            }
        }
    }

    /// Backpropagates `gy` through this layer. `grads` holds this layer's
    /// parameter gradient buffers (same order as [`Self::params`]).
    pub fn backward(
        &self,
        cache: &Cache<T>,
        gy: Tensor<T>,
        grads: Option<&mut [ArrayD<T>]>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        match (self, cache) {
            (Layer::Linear(l), Cache::Input(x)) => l.backward(x, &gy, grads.map(pair), need_input),
            (Layer::Conv2d(l), Cache::Patches(cols, shape)) => {
                l.backward(cols, shape, &gy, grads.map(pair), need_input)
            }
            (Layer::ConvTranspose2d(l), Cache::ChannelMajor(x2, shape)) => {
                l.backward(x2, shape, &gy, grads.map(pair), need_input)
            }
            (Layer::BatchNorm(l), Cache::BatchNorm(c)) => l.backward(c, &gy, grads.map(pair), need_input),
            (Layer::Relu, Cache::Output(y)) => {
                let mut g = gy;
                Zip::from(&mut g).and(y).for_each(|g, &y| {
                    if y <= T::zero() {
                        *g = T::zero();
                    }
                });
                Some(g)
            }
            (Layer::LeakyRelu(slope), Cache::Input(x)) => {
                let mut g = gy;
                Zip::from(&mut g).and(x).for_each(|g, &x| {
                    if x <= T::zero() {
                        *g *= *slope;
                    }
                });
                Some(g)
            }
            (Layer::Tanh, Cache::Output(y)) => {
                let mut g = gy;
                Zip::from(&mut g).and(y).for_each(|g, &y| *g *= T::one() - y * y );
                Some(g)
            }
            (Layer::Sigmoid, Cache::Output(y)) => {
                let mut g = gy;
                Zip::from(&mut g).and(y).for_each(|g, &y| *g = *g * y * (T::one() - y));
                Some(g)
            }
            (Layer::Flatten | Layer::Unflatten(_), Cache::Shape(shape)) => Some(
                gy.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(shape))
                    .expect("reshape grad"),
            ),
            (Layer::MaxPool2d(p), Cache::Pool(argmax, shape)) => Some(p.backward(argmax, shape, &gy)),
            (Layer::Dropout(_), Cache::Mask(mask)) => {
                if mask.is_empty() {
                    return Some(gy);
                }
                let mut g = gy.as_standard_layout().into_owned();
                g.iter_mut().zip(mask).for_each(|(v, &m)| *v *= m);
                Some(g)
            }
            (layer, _) => panic!("cache does not belong to layer {layer:?}"),
        }
    }
}
