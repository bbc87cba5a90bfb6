use ndarray::{linalg::general_mat_mul, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn};

use crate::{Scalar, Tensor};

/// Fully connected layer `y = x·Wᵀ + b`, weights `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: ArrayD<T>,
    pub bias: ArrayD<T>,
}

fn as_matrix<T: Scalar>(x: &Tensor<T>) -> ArrayView2<'_, T> {
    x.view().into_dimensionality::<Ix2>().expect("linear layers take [batch, features]")
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Self {
            weight: ArrayD::zeros(IxDyn(&[out_features, in_features])),
            bias: ArrayD::zeros(IxDyn(&[out_features])),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    fn weight2(&self) -> ArrayView2<'_, T> {
        self.weight.view().into_dimensionality::<Ix2>().expect("2-D weight")
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let x = as_matrix(x);
        assert_eq!(x.ncols(), self.in_features(), "linear: input width");
        let mut y = Array2::zeros((x.nrows(), self.out_features()));
        general_mat_mul(T::one(), &x, &self.weight2().t(), T::zero(), &mut y);
        let bias = self.bias.view().into_dimensionality::<ndarray::Ix1>().expect("1-D bias");
        y += &bias;
        y.into_dyn()
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        gy: &Tensor<T>,
        grads: Option<(&mut ArrayD<T>, &mut ArrayD<T>)>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let x = as_matrix(x);
        let gy = as_matrix(gy);
        if let Some((dw, db)) = grads {
            let mut dw2 = dw.view_mut().into_dimensionality::<Ix2>().expect("2-D weight grad");
            general_mat_mul(T::one(), &gy.t(), &x, T::one(), &mut dw2);
            let sums = gy.sum_axis(Axis(0));
            for (d, s) in db.iter_mut().zip(sums.iter()) {
                *d += *s;
            }
        }
        if !need_input {
            return None;
        }
        let mut dx = Array2::zeros((gy.nrows(), self.in_features()));
        general_mat_mul(T::one(), &gy, &self.weight2(), T::zero(), &mut dx);
        Some(dx.into_dyn())
    }
}
