use ndarray::{ArrayD, IxDyn};

use crate::{Scalar, Tensor};

/// Non-overlapping max pooling with a square window.
#[derive(Clone, Copy, Debug)]
pub struct MaxPool2d {
    pub size: usize,
}

impl MaxPool2d {
    /// Returns the pooled tensor and the flat index of each selected input.
    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
        let (n, c, h, w) = match *x.shape() {
            [n, c, h, w] => (n, c, h, w),
            ref s => panic!("max pool expects NCHW, got {s:?}"),
        };
        let k = self.size;
        let (oh, ow) = (h / k, w / k);
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * k + dy) * w + ox * k + dx;
                            if xs[idx] > xs[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xs[best]);
                    argmax.push(best);
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).expect("pool output");
        (out, argmax)
    }

    pub fn backward<T: Scalar>(&self, argmax: &[usize], in_shape: &[usize], gy: &Tensor<T>) -> Tensor<T> {
        let mut dx = ArrayD::zeros(IxDyn(in_shape));
        let dxs = dx.as_slice_mut().expect("fresh tensor");
        for (&idx, &g) in argmax.iter().zip(gy.iter()) {
            dxs[idx] += g;
        }
        dx
    }
}
