use approx::assert_relative_eq;
use infogan_nn::{
    BatchNorm, Conv2d, ConvTranspose2d, Init, Layer, Linear, MaxPool2d, Mode, Scalar, Sequential, Tensor,
};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalar objective `sum(w ⊙ net(x))` with dropout re-seeded identically per call.
fn objective(net: &Sequential<f64>, x: &Tensor<f64>, w: &Tensor<f64>, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (y, _) = net.forward(x, Mode::Train, Some(&mut rng));
    y.iter().zip(w.iter()).map(|(a, b)| a * b).sum()
}

fn check(mut net: Sequential<f64>, in_shape: &[usize]) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    Init::HeUniform.apply(&mut net, &mut rng);
    for p in net.params_mut() {
        p.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
    }
    let x = random_tensor(in_shape, &mut rng);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(5);
    let (y, tape) = net.forward(&x, Mode::Train, Some(&mut drop_rng));
    let w = random_tensor(y.shape(), &mut rng);
    let mut grads = net.zero_grads();
    let dx = net.backward(&tape, w.clone(), Some(&mut grads), true).unwrap();

    let h = 1e-6;
    let n_params = net.params().len();
    for pi in 0..n_params {
        let len = net.params()[pi].len();
        for j in 0..len {
            let orig = net.params()[pi].as_slice().unwrap()[j];
            net.params_mut()[pi].as_slice_mut().unwrap()[j] = orig + h;
            let plus = objective(&net, &x, &w, 5);
            net.params_mut()[pi].as_slice_mut().unwrap()[j] = orig - h;
            let minus = objective(&net, &x, &w, 5);
            net.params_mut()[pi].as_slice_mut().unwrap()[j] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let an = grads.tensors[pi].as_slice().unwrap()[j];
            assert_relative_eq!(an, fd, epsilon = 1e-7, max_relative = 1e-4);
        }
    }
    let mut xp = x.clone();
    for j in 0..x.len() {
        let orig = x.as_slice().unwrap()[j];
        xp.as_slice_mut().unwrap()[j] = orig + h;
        let plus = objective(&net, &xp, &w, 5);
        xp.as_slice_mut().unwrap()[j] = orig - h;
        let minus = objective(&net, &xp, &w, 5);
        xp.as_slice_mut().unwrap()[j] = orig;
        let fd = (plus - minus) / (2.0 * h);
        assert_relative_eq!(dx.as_slice().unwrap()[j], fd, epsilon = 1e-7, max_relative = 1e-4);
    }
}

fn lrelu<T: Scalar>() -> Layer<T> {
    Layer::LeakyRelu(T::from_f64_lossy(0.2))
}

#[test]
fn conv_stack_gradients_match_central_differences() {
    let net = Sequential::new(vec![
        Layer::Conv2d(Conv2d::new(2, 3, 3, 2, 1)),
        Layer::BatchNorm(BatchNorm::new(3)),
        lrelu(),
        Layer::ConvTranspose2d(ConvTranspose2d::new(3, 2, 4, 2, 1)),
        Layer::Tanh,
        Layer::Flatten,
        Layer::Linear(Linear::new(2 * 6 * 6, 4)),
        Layer::BatchNorm(BatchNorm::new(4)),
        Layer::Sigmoid,
    ]);
    check(net, &[3, 2, 6, 6]);
}

#[test]
fn classifier_stack_gradients_match_central_differences() {
    let net = Sequential::new(vec![
        Layer::Conv2d(Conv2d::new(1, 2, 3, 1, 1)),
        Layer::Relu,
        Layer::MaxPool2d(MaxPool2d { size: 2 }),
        Layer::Flatten,
        Layer::Linear(Linear::new(2 * 2 * 2, 5)),
        Layer::Dropout(0.5),
        Layer::Linear(Linear::new(5, 3)),
        Layer::Unflatten(vec![3, 1, 1]),
        Layer::Flatten,
    ]);
    check(net, &[2, 1, 4, 4]);
}

#[test]
fn eval_mode_is_batch_independent() {
    let mut net = Sequential::<f32>::new(vec![
        Layer::Linear(Linear::new(3, 4)),
        Layer::BatchNorm(BatchNorm::new(4)),
        Layer::Relu,
    ]);
    Init::Dcgan.apply(&mut net, &mut ChaCha8Rng::seed_from_u64(1));
    let row = ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![0.3f32, -0.2, 0.9]).unwrap();
    let batch = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![0.3f32, -0.2, 0.9, 5.0, 1.0, -3.0]).unwrap();
    let a = net.infer(&row);
    let b = net.infer(&batch);
    for j in 0..4 {
        assert_eq!(a[[0, j]], b[[0, j]]);
    }
}
