use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal, Uniform};

use crate::layer::Layer;
use crate::{Scalar, Sequential};

/// Parameter initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Weights `N(0, 0.02)`, batch-norm scale `N(1, 0.02)`, zero biases.
    Dcgan,
    /// Weights `U(-b, b)` with `b = sqrt(6 / fan_in)`, zero biases.
    HeUniform,
}

impl Init {
    pub fn apply<T: Scalar>(self, net: &mut Sequential<T>, rng: &mut dyn RngCore) {
        let small = Normal::new(0.0, 0.02).expect("valid normal");
        for layer in &mut net.layers {
            let (weight, bias, fan_in) = match layer {
                Layer::Linear(l) => {
                    let fan_in = l.in_features();
                    (&mut l.weight, &mut l.bias, fan_in)
                }
                Layer::Conv2d(l) => {
                    let s = l.weight.shape();
                    let fan_in = s[1] * s[2] * s[3];
                    (&mut l.weight, &mut l.bias, fan_in)
                }
                Layer::ConvTranspose2d(l) => {
                    let s = l.weight.shape();
                    let fan_in = s[0] * s[2] * s[3];
                    (&mut l.weight, &mut l.bias, fan_in)
                }
                Layer::BatchNorm(bn) => {
                    if self == Init::Dcgan {
                        bn.gamma.mapv_inplace(|_| T::from_f64_lossy(1.0 + small.sample(rng)));
                    }
                    continue;
                }
                _ => continue,
            };
            match self {
                Init::Dcgan => weight.mapv_inplace(|_| T::from_f64_lossy(small.sample(rng))),
                Init::HeUniform => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                    weight.mapv_inplace(|_| T::from_f64_lossy(rng.sample(dist)));
                }
            }
            bias.fill(T::zero());
        }
    }
}
