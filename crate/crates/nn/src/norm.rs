use ndarray::{ArrayD, IxDyn};

use crate::{Scalar, Tensor};

/// Batch normalization over dimension 1 of `[N, C]` or `[N, C, H, W]` inputs.
///
/// Running statistics are buffers, not parameters: they are left untouched
/// by the forward pass and only change through [`BatchNorm::absorb`].
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: ArrayD<T>,
    pub beta: ArrayD<T>,
    pub running_mean: ArrayD<T>,
    pub running_var: ArrayD<T>,
    pub eps: T,
    pub momentum: T,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
    batch_stats: bool,
    count: usize,
}

fn layout(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "batch norm needs [N, C, ..] input");
    (shape[0], shape[1], shape[2..].iter().product())
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: ArrayD::from_elem(IxDyn(&[channels]), T::one()),
            beta: ArrayD::zeros(IxDyn(&[channels])),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::from_elem(IxDyn(&[channels]), T::one()),
            eps: T::from_f64_lossy(1e-5),
            momentum: T::from_f64_lossy(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes with batch statistics when `batch_stats` is set, otherwise
    /// with the running estimates.
    pub fn forward(&self, x: &Tensor<T>, batch_stats: bool) -> (Tensor<T>, BatchNormCache<T>) {
        let (n, c, s) = layout(x.shape());
        assert_eq!(c, self.channels(), "batch norm: channel count");
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let m = n * s;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if batch_stats {
            let inv_m = T::one() / T::from_usize(m).expect("count");
            for b in 0..n {
                for ch in 0..c {
                    let row = &xs[(b * c + ch) * s..][..s];
                    mean[ch] += row.iter().fold(T::zero(), |a, &v| a + v);
                }
            }
            mean.iter_mut().for_each(|v| *v *= inv_m);
            for b in 0..n {
                for ch in 0..c {
                    let row = &xs[(b * c + ch) * s..][..s];
                    let mu = mean[ch];
                    var[ch] += row.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu));
                }
            }
            var.iter_mut().for_each(|v| *v *= inv_m);
        } else {
            mean.copy_from_slice(self.running_mean.as_slice().expect("contiguous"));
            var.copy_from_slice(self.running_var.as_slice().expect("contiguous"));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + self.eps).sqrt()).collect();
        let gamma = self.gamma.as_slice().expect("contiguous");
        let beta = self.beta.as_slice().expect("contiguous");
        let mut xhat = vec![T::zero(); xs.len()];
        let mut y = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * s;
                let (mu, is, g, be) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
                for i in off..off + s {
                    let h = (xs[i] - mu) * is;
                    xhat[i] = h;
                    y[i] = g * h + be;
                }
            }
        }
        let y = ArrayD::from_shape_vec(IxDyn(x.shape()), y).expect("batch norm output");
        let cache = BatchNormCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            batch_stats,
            count: m,
        };
        (y, cache)
    }

    pub fn backward(
        &self,
        cache: &BatchNormCache<T>,
        gy: &Tensor<T>,
        grads: Option<(&mut ArrayD<T>, &mut ArrayD<T>)>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let (n, c, s) = layout(gy.shape());
        let gy_std = gy.as_standard_layout();
        let g = gy_std.as_slice().expect("standard layout");
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * s;
                for i in off..off + s {
                    sum_dy[ch] += g[i];
                    sum_dy_xhat[ch] += g[i] * cache.xhat[i];
                }
            }
        }
        if let Some((dgamma, dbeta)) = grads {
            for ch in 0..c {
                dgamma[ch] += sum_dy_xhat[ch];
                dbeta[ch] += sum_dy[ch];
            }
        }
        if !need_input {
            return None;
        }
        let gamma = self.gamma.as_slice().expect("contiguous");
        let mut dx = vec![T::zero(); g.len()];
        let inv_m = T::one() / T::from_usize(cache.count).expect("count");
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * s;
                let scale = gamma[ch] * cache.inv_std[ch];
                if cache.batch_stats {
                    let (mdy, mdyx) = (sum_dy[ch] * inv_m, sum_dy_xhat[ch] * inv_m);
                    for i in off..off + s {
                        dx[i] = scale * (g[i] - mdy - cache.xhat[i] * mdyx);
                    }
                } else {
                    for i in off..off + s {
                        dx[i] = scale * g[i];
                    }
                }
            }
        }
        Some(ArrayD::from_shape_vec(IxDyn(gy.shape()), dx).expect("batch norm input grad"))
    }

    /// Folds the batch statistics of a training-mode forward pass into the
    /// running estimates (unbiased variance, exponential moving average).
    pub fn absorb(&mut self, cache: &BatchNormCache<T>) {
        if !cache.batch_stats {
            return;
        }
        let m = T::from_usize(cache.count).expect("count");
        let unbias = if cache.count > 1 { m / (m - T::one()) } else { T::one() };
        let mom = self.momentum;
        let keep = T::one() - mom;
        for ch in 0..self.channels() {
            self.running_mean[ch] = keep * self.running_mean[ch] + mom * cache.batch_mean[ch];
            self.running_var[ch] = keep * self.running_var[ch] + mom * cache.batch_var[ch] * unbias;
        }
    }
}
