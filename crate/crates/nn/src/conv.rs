use ndarray::{linalg::general_mat_mul, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn};

use crate::{Scalar, Tensor};

/// Geometry of a square-kernel 2-D convolution over one image plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfolds `batch` NCHW images into a `[C·k·k, batch·OH·OW]` patch matrix.
pub fn im2col<T: Scalar>(x: &[T], batch: usize, g: &ConvGeom) -> Array2<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = g.height * g.width;
    let ncols = batch * oh * ow;
    let mut out = vec![T::zero(); g.rows() * ncols];
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut out[row * ncols..(row + 1) * ncols];
                for b in 0..batch {
                    let src = &x[(b * g.channels + c) * plane..][..plane];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..][..g.width];
                        let dst_row = &mut dst[(b * oh + oy) * ow..][..ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((g.rows(), ncols), out).expect("im2col shape")
}

/// Adjoint of [`im2col`]: scatters a patch matrix back onto NCHW images,
/// summing overlapping contributions.
pub fn col2im<T: Scalar>(cols: &ArrayView2<T>, batch: usize, g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = g.height * g.width;
    let ncols = batch * oh * ow;
    assert_eq!(cols.dim(), (g.rows(), ncols), "col2im: patch matrix shape");
    let cols = cols.as_standard_layout();
    let cols = cols.as_slice().expect("standard layout");
    let mut out = vec![T::zero(); batch * g.channels * plane];
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..batch {
                    let dst = &mut out[(b * g.channels + c) * plane..][..plane];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.width..][..g.width];
                        let src_row = &src[(b * oh + oy) * ow..][..ow];
                        for (ox, &s) in src_row.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[N, C, S]` (flattened NCHW) to `[C, N·S]`.
fn to_channel_major<T: Scalar>(x: &[T], batch: usize, channels: usize, spatial: usize) -> Array2<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = &x[(b * channels + c) * spatial..][..spatial];
            out[c * batch * spatial + b * spatial..][..spatial].copy_from_slice(src);
        }
    }
    Array2::from_shape_vec((channels, batch * spatial), out).expect("channel-major shape")
}

/// Inverse of [`to_channel_major`], optionally adding a per-channel bias.
fn from_channel_major<T: Scalar>(
    y: &ArrayView2<T>,
    batch: usize,
    spatial: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let channels = y.nrows();
    let y = y.as_standard_layout();
    let y = y.as_slice().expect("standard layout");
    let mut out = vec![T::zero(); y.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = &y[c * batch * spatial + b * spatial..][..spatial];
            let dst = &mut out[(b * channels + c) * spatial..][..spatial];
            match bias {
                Some(bias) => {
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + bias[c];
                    }
                }
                None => dst.copy_from_slice(src),
            }
        }
    }
    out
}

fn dims4(x: &Tensor<impl Scalar>) -> (usize, usize, usize, usize) {
    match *x.shape() {
        [n, c, h, w] => (n, c, h, w),
        ref s => panic!("expected NCHW tensor, got shape {s:?}"),
    }
}

fn accumulate_bias<T: Scalar>(db: &mut ArrayD<T>, gy2: &Array2<T>) {
    let sums = gy2.sum_axis(Axis(1));
    for (d, s) in db.iter_mut().zip(sums.iter()) {
        *d += *s;
    }
}

/// Strided 2-D convolution, weights `[out, in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: ArrayD<T>,
    pub bias: ArrayD<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            weight: ArrayD::zeros(IxDyn(&[out_ch, in_ch, kernel, kernel])),
            bias: ArrayD::zeros(IxDyn(&[out_ch])),
            stride,
            pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn geom(&self, c: usize, h: usize, w: usize) -> ConvGeom {
        ConvGeom {
            channels: c,
            height: h,
            width: w,
            kernel: self.weight.shape()[2],
            stride: self.stride,
            pad: self.pad,
        }
    }

    fn weight2(&self) -> ArrayView2<'_, T> {
        let o = self.out_channels();
        let view = self.weight.view();
        let rows = view.len() / o;
        view.into_shape_with_order((o, rows))
            .expect("contiguous weight")
            .into_dimensionality::<Ix2>()
            .expect("2-D weight view")
    }

    /// Returns the output and the patch matrix needed by [`Self::backward`].
    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, Array2<T>) {
        let (n, c, h, w) = dims4(x);
        assert_eq!(c, self.in_channels(), "conv2d: input channels");
        let g = self.geom(c, h, w);
        let x = x.as_standard_layout();
        let cols = im2col(x.as_slice().expect("standard layout"), n, &g);
        let (oh, ow) = (g.out_height(), g.out_width());
        let o = self.out_channels();
        let mut y2 = Array2::zeros((o, n * oh * ow));
        general_mat_mul(T::one(), &self.weight2(), &cols, T::zero(), &mut y2);
        let bias = self.bias.as_slice().expect("contiguous bias");
        let out = from_channel_major(&y2.view(), n, oh * ow, Some(bias));
        let out = ArrayD::from_shape_vec(IxDyn(&[n, o, oh, ow]), out).expect("conv2d output");
        (out, cols)
    }

    /// Backpropagates `gy`; accumulates `(d_weight, d_bias)` when given and
    /// returns the input gradient when `need_input` is set.
    pub fn backward(
        &self,
        cols: &Array2<T>,
        in_shape: &[usize],
        gy: &Tensor<T>,
        grads: Option<(&mut ArrayD<T>, &mut ArrayD<T>)>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let (n, o, oh, ow) = dims4(gy);
        let gy = gy.as_standard_layout();
        let gy2 = to_channel_major(gy.as_slice().expect("standard layout"), n, o, oh * ow);
        if let Some((dw, db)) = grads {
            let rows = dw.len() / o;
            let mut dw2 = dw
                .view_mut()
                .into_shape_with_order((o, rows))
                .expect("contiguous weight grad");
            general_mat_mul(T::one(), &gy2, &cols.t(), T::one(), &mut dw2);
            accumulate_bias(db, &gy2);
        }
        if !need_input {
            return None;
        }
        let g = self.geom(in_shape[1], in_shape[2], in_shape[3]);
        let mut dcols = Array2::zeros(cols.raw_dim());
        general_mat_mul(T::one(), &self.weight2().t(), &gy2, T::zero(), &mut dcols);
        let dx = col2im(&dcols.view(), n, &g);
        Some(ArrayD::from_shape_vec(IxDyn(in_shape), dx).expect("conv2d input grad"))
    }
}

/// Fractionally-strided (transposed) convolution, weights `[in, out, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub weight: ArrayD<T>,
    pub bias: ArrayD<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            weight: ArrayD::zeros(IxDyn(&[in_ch, out_ch, kernel, kernel])),
            bias: ArrayD::zeros(IxDyn(&[out_ch])),
            stride,
            pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_size(&self, h: usize) -> usize {
        (h - 1) * self.stride + self.weight.shape()[2] - 2 * self.pad
    }

    /// Geometry of the equivalent forward convolution over the output plane.
    fn geom(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom {
            channels: self.out_channels(),
            height: self.out_size(h),
            width: self.out_size(w),
            kernel: self.weight.shape()[2],
            stride: self.stride,
            pad: self.pad,
        }
    }

    fn weight2(&self) -> ArrayView2<'_, T> {
        let i = self.in_channels();
        let view = self.weight.view();
        let cols = view.len() / i;
        view.into_shape_with_order((i, cols))
            .expect("contiguous weight")
            .into_dimensionality::<Ix2>()
            .expect("2-D weight view")
    }

    /// Returns the output and the channel-major input kept for backward.
    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, Array2<T>) {
        let (n, c, h, w) = dims4(x);
        assert_eq!(c, self.in_channels(), "conv_transpose2d: input channels");
        let g = self.geom(h, w);
        let x = x.as_standard_layout();
        let x2 = to_channel_major(x.as_slice().expect("standard layout"), n, c, h * w);
        let mut cols = Array2::zeros((g.rows(), n * h * w));
        general_mat_mul(T::one(), &self.weight2().t(), &x2, T::zero(), &mut cols);
        let mut out = col2im(&cols.view(), n, &g);
        let plane = g.height * g.width;
        let bias = self.bias.as_slice().expect("contiguous bias");
        for (idx, chunk) in out.chunks_mut(plane).enumerate() {
            let b = bias[idx % g.channels];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, g.channels, g.height, g.width]), out)
            .expect("conv_transpose2d output");
        (out, x2)
    }

    pub fn backward(
        &self,
        x2: &Array2<T>,
        in_shape: &[usize],
        gy: &Tensor<T>,
        grads: Option<(&mut ArrayD<T>, &mut ArrayD<T>)>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let g = self.geom(h, w);
        let gy = gy.as_standard_layout();
        let gy_slice = gy.as_slice().expect("standard layout");
        let gcols = im2col(gy_slice, n, &g);
        if let Some((dw, db)) = grads {
            let cols = dw.len() / c;
            let mut dw2 = dw
                .view_mut()
                .into_shape_with_order((c, cols))
                .expect("contiguous weight grad");
            general_mat_mul(T::one(), x2, &gcols.t(), T::one(), &mut dw2);
            let plane = g.height * g.width;
            for (idx, chunk) in gy_slice.chunks(plane).enumerate() {
                let s = chunk.iter().fold(T::zero(), |a, &v| a + v);
                let ch = idx % g.channels;
                db[ch] += s;
            }
        }
        if !need_input {
            return None;
        }
        let mut dx2 = Array2::zeros((c, n * h * w));
        general_mat_mul(T::one(), &self.weight2(), &gcols, T::zero(), &mut dx2);
        let dx = from_channel_major(&dx2.view(), n, h * w, None);
        Some(ArrayD::from_shape_vec(IxDyn(in_shape), dx).expect("conv_transpose2d input grad"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(x: &Tensor<f64>, conv: &Conv2d<f64>) -> Tensor<f64> {
        let (n, c, h, w) = dims4(x);
        let g = conv.geom(c, h, w);
        let (oh, ow) = (g.out_height(), g.out_width());
        let o = conv.out_channels();
        let k = g.kernel;
        let mut out = ArrayD::zeros(IxDyn(&[n, o, oh, ow]));
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias[oc];
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x[[b, ic, iy as usize, ix as usize]]
                                            * conv.weight[[oc, ic, ki, kj]];
                                    }
                                }
                            }
                        }
                        out[[b, oc, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let len: usize = shape.iter().product();
        ArrayD::from_shape_vec(
            IxDyn(shape),
            (0..len).map(|i| ((i * 7 % 13) as f64 - 6.0) * scale).collect(),
        )
        .unwrap()
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut conv = Conv2d::<f64>::new(3, 4, 4, 2, 1);
        conv.weight = ramp(&[4, 3, 4, 4], 0.1);
        conv.bias = ramp(&[4], 0.5);
        let x = ramp(&[2, 3, 6, 6], 0.3);
        let (y, _) = conv.forward(&x);
        let expected = naive_conv(&x, &conv);
        assert_eq!(y.shape(), &[2, 4, 3, 3]);
        for (a, b) in y.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for arbitrary x, y
        let g = ConvGeom { channels: 2, height: 5, width: 5, kernel: 3, stride: 2, pad: 1 };
        let x = ramp(&[2, 2, 5, 5], 0.2);
        let cols = im2col(x.as_slice().unwrap(), 2, &g);
        let y = ramp(&[cols.nrows(), cols.ncols()], 0.05).into_dimensionality::<Ix2>().unwrap();
        let lhs: f64 = cols.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let back = col2im(&y.view(), 2, &g);
        let rhs: f64 = x.iter().zip(back.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn transpose_conv_doubles_spatial_size() {
        let deconv = ConvTranspose2d::<f32>::new(8, 3, 4, 2, 1);
        let x = ArrayD::zeros(IxDyn(&[2, 8, 7, 7]));
        let (y, _) = deconv.forward(&x);
        assert_eq!(y.shape(), &[2, 3, 14, 14]);
    }

    #[test]
    fn transpose_conv_is_adjoint_of_conv() {
        // conv_transpose(y; W) is the adjoint of conv(x; W) when biases are zero
        let mut conv = Conv2d::<f64>::new(2, 3, 4, 2, 1);
        conv.weight = ramp(&[3, 2, 4, 4], 0.1);
        let mut deconv = ConvTranspose2d::<f64>::new(3, 2, 4, 2, 1);
        deconv.weight = ramp(&[3, 2, 4, 4], 0.1);
        let x = ramp(&[1, 2, 6, 6], 0.3);
        let (cx, _) = conv.forward(&x);
        let y = ramp(cx.shape(), 0.7);
        let (dy, _) = deconv.forward(&y);
        let lhs: f64 = cx.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}
