//! Generator and discriminator networks in the DCGAN layout.
//!
//! The discriminator is a shared convolutional trunk producing a feature
//! vector, read by three linear heads: realness (`head_d`), free-code
//! predictions (`head_q_us`) and supervised-code predictions (`head_q_ss`).
//! Backpropagation is routed: each loss term's gradient only reaches the
//! parameter groups its [`Route`] lists, so a term can, for example, train the
//! generator through `Q_ss` without ever touching `Q_ss` itself.

use infogan_nn::{
    BatchNorm, Conv2d, ConvTranspose2d, Grads, Init, Layer, Linear, Mode, Scalar, Sequential, Tape, Tensor,
};
use ndarray::{s, Array2, ArrayD, IxDyn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latent::LatentSpec;
use crate::objectives::{clamp_prob, ParamGroup, Route, PROB_EPS};

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("image side {0} must be a positive multiple of 4")]
    ImageSide(usize),
    #[error("only square images are supported (got {0}x{1})")]
    NonSquare(usize, usize),
    #[error("latent width {got} does not match generator input width {expected}")]
    LatentWidth { expected: usize, got: usize },
    #[error("image batch shape {got:?} does not match expected [N, {expected:?}]")]
    ImageShape { expected: [usize; 3], got: Vec<usize> },
    #[error("image batch contains non-finite values")]
    NonFinite,
    #[error("architecture width `{0}` must be positive")]
    Width(&'static str),
}

/// Channel-first image geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const MNIST: ImageShape = ImageShape { channels: 1, height: 28, width: 28 };

    pub fn validate(&self) -> Result<(), NetError> {
        if self.height != self.width {
            return Err(NetError::NonSquare(self.height, self.width));
        }
        if self.height == 0 || !self.height.is_multiple_of(4) {
            return Err(NetError::ImageSide(self.height));
        }
        if self.channels == 0 {
            return Err(NetError::Width("channels"));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    #[default]
    Dcgan,
    HeUniform,
}

impl From<InitScheme> for Init {
    fn from(s: InitScheme) -> Self {
        match s {
            InitScheme::Dcgan => Init::Dcgan,
            InitScheme::HeUniform => Init::HeUniform,
        }
    }
}

/// Layer widths. Both networks work at two spatial scales, `side/2` and
/// `side/4`; `g_channels` and `d_channels` list the channel counts at those
/// scales (finest first).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub g_hidden: usize,
    pub g_channels: [usize; 2],
    pub d_channels: [usize; 2],
    pub d_hidden: usize,
    pub leak: f64,
    pub init: InitScheme,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { g_hidden: 512, g_channels: [32, 64], d_channels: [32, 64], d_hidden: 512, leak: 0.2, init: InitScheme::Dcgan }
    }
}

impl ArchConfig {
    /// A network family small enough for finite-difference checks on 4×4 images.
    pub fn tiny() -> Self {
        Self { g_hidden: 4, g_channels: [2, 2], d_channels: [2, 2], d_hidden: 4, leak: 0.2, init: InitScheme::HeUniform }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let widths = [
            ("g_hidden", self.g_hidden),
            ("g_channels", self.g_channels[0].min(self.g_channels[1])),
            ("d_channels", self.d_channels[0].min(self.d_channels[1])),
            ("d_hidden", self.d_hidden),
        ];
        for (name, w) in widths {
            if w == 0 {
                return Err(NetError::Width(name));
            }
        }
        Ok(())
    }
}

pub fn to_tensor<T: Scalar>(a: &Array2<f64>) -> Tensor<T> {
    a.mapv(T::from_f64_lossy).into_dyn()
}

pub fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.iter().map(|v| v.to_f64().expect("finite")).collect()
}

fn to_f64_2d<T: Scalar>(t: &Tensor<T>) -> Array2<f64> {
    let (n, w) = (t.shape()[0], t.len() / t.shape()[0].max(1));
    Array2::from_shape_vec((n, w), to_f64(t)).expect("2-d head output")
}

fn from_f64_2d<T: Scalar>(a: &Array2<f64>) -> Tensor<T> {
    to_tensor(a)
}

/// `G(z, c)`: fully connected projection to `side/4`, then two
/// fractionally-strided convolutions to full resolution with `tanh` output.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub net: Sequential<T>,
    input_width: usize,
    shape: ImageShape,
}

impl<T: Scalar> Generator<T> {
    pub fn new(input_width: usize, shape: ImageShape, arch: &ArchConfig) -> Result<Self, NetError> {
        shape.validate()?;
        arch.validate()?;
        let base = shape.height / 4;
        let [c1, c2] = arch.g_channels;
        let net = Sequential::new(vec![
            Layer::Linear(Linear::new(input_width, arch.g_hidden)),
            Layer::BatchNorm(BatchNorm::new(arch.g_hidden)),
            Layer::Relu,
            Layer::Linear(Linear::new(arch.g_hidden, c2 * base * base)),
            Layer::BatchNorm(BatchNorm::new(c2 * base * base)),
            Layer::Relu,
            Layer::Unflatten(vec![c2, base, base]),
            Layer::ConvTranspose2d(ConvTranspose2d::new(c2, c1, 4, 2, 1)),
            Layer::BatchNorm(BatchNorm::new(c1)),
            Layer::Relu,
            Layer::ConvTranspose2d(ConvTranspose2d::new(c1, shape.channels, 4, 2, 1)),
            Layer::Tanh,
        ]);
        Ok(Self { net, input_width, shape })
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    fn check(&self, z: &Array2<f64>) -> Result<(), NetError> {
        if z.ncols() != self.input_width {
            return Err(NetError::LatentWidth { expected: self.input_width, got: z.ncols() });
        }
        Ok(())
    }

    /// Training-mode forward pass, keeping the tape for backpropagation.
    pub fn forward(&self, encoded: &Array2<f64>) -> Result<(Tensor<T>, Tape<T>), NetError> {
        self.check(encoded)?;
        Ok(self.net.forward(&to_tensor(encoded), Mode::Train, None))
    }

    /// Evaluation-mode generation using running batch-norm statistics.
    pub fn generate(&self, encoded: &Array2<f64>) -> Result<Tensor<T>, NetError> {
        self.check(encoded)?;
        Ok(self.net.infer(&to_tensor(encoded)))
    }

    pub fn backward(
        &self,
        tape: &Tape<T>,
        grad_images: Tensor<T>,
        grads: Option<&mut Grads<T>>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        self.net.backward(tape, grad_images, grads, need_input)
    }
}

/// Which discriminator heads a forward pass should evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heads {
    pub d: bool,
    pub q_us: bool,
    pub q_ss: bool,
}

impl Heads {
    pub const ALL: Heads = Heads { d: true, q_us: true, q_ss: true };
    pub const D: Heads = Heads { d: true, q_us: false, q_ss: false };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    D,
    QUs,
    QSs,
}

impl Head {
    pub fn group(self) -> ParamGroup {
        match self {
            Head::D => ParamGroup::HeadD,
            Head::QUs => ParamGroup::HeadQUs,
            Head::QSs => ParamGroup::HeadQSs,
        }
    }
}

/// Readouts of one discriminator pass, in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorOutput {
    /// `D(x)` clamped to `[ε, 1 − ε]`; empty when the head was not evaluated.
    pub d_prob: Vec<f64>,
    /// One block per free code (logits `[N, K]` or predictions `[N, 1]`).
    pub q_us: Vec<Array2<f64>>,
    /// One block per supervised code.
    pub q_ss: Vec<Array2<f64>>,
}

/// A discriminator pass with everything needed to backpropagate it.
#[derive(Clone, Debug)]
pub struct DiscriminatorPass<T> {
    pub output: DiscriminatorOutput,
    pub(crate) trunk_tape: Tape<T>,
    pub(crate) d_tape: Option<Tape<T>>,
    pub(crate) us_tape: Option<Tape<T>>,
    pub(crate) ss_tape: Option<Tape<T>>,
    /// Unclamped sigmoid values, for the clamp-aware derivative.
    raw_prob: Vec<f64>,
    batch: usize,
}

/// Gradient of one weighted loss term with respect to one head's output.
#[derive(Clone, Debug)]
pub struct HeadGrad<'a> {
    pub route: &'a Route,
    pub head: Head,
    /// For [`Head::D`] the gradient with respect to `d_prob` as `[N, 1]`;
    /// for code heads one block per code, as in [`DiscriminatorOutput`].
    pub blocks: Vec<Array2<f64>>,
}

/// Gradient buffers for every parameter group, allocated on first use.
#[derive(Clone, Debug, Default)]
pub struct GroupGrads<T> {
    slots: [Option<Grads<T>>; 5],
}

impl<T: Scalar> GroupGrads<T> {
    pub fn get(&self, group: ParamGroup) -> Option<&Grads<T>> {
        self.slots[group.index()].as_ref()
    }

    pub fn slot(&mut self, group: ParamGroup, net: &Sequential<T>) -> &mut Grads<T> {
        self.slots[group.index()].get_or_insert_with(|| net.zero_grads())
    }

    pub fn touched(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL.into_iter().filter(|g| self.slots[g.index()].is_some()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(Grads::all_finite)
    }
}

/// Shared trunk plus the three heads.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub trunk: Sequential<T>,
    pub head_d: Sequential<T>,
    pub head_q_us: Sequential<T>,
    pub head_q_ss: Sequential<T>,
    us_widths: Vec<usize>,
    ss_widths: Vec<usize>,
    shape: ImageShape,
}

fn lrelu<T: Scalar>(arch: &ArchConfig) -> Layer<T> {
    Layer::LeakyRelu(T::from_f64_lossy(arch.leak))
}

fn head<T: Scalar>(features: usize, width: usize) -> Sequential<T> {
    if width == 0 {
        Sequential::new(vec![])
    } else {
        Sequential::new(vec![Layer::Linear(Linear::new(features, width))])
    }
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(spec: &LatentSpec, shape: ImageShape, arch: &ArchConfig) -> Result<Self, NetError> {
        shape.validate()?;
        arch.validate()?;
        let base = shape.height / 4;
        let [c1, c2] = arch.d_channels;
        let trunk = Sequential::new(vec![
            Layer::Conv2d(Conv2d::new(shape.channels, c1, 4, 2, 1)),
            lrelu(arch),
            Layer::Conv2d(Conv2d::new(c1, c2, 4, 2, 1)),
            Layer::BatchNorm(BatchNorm::new(c2)),
            lrelu(arch),
            Layer::Flatten,
            Layer::Linear(Linear::new(c2 * base * base, arch.d_hidden)),
            Layer::BatchNorm(BatchNorm::new(arch.d_hidden)),
            lrelu(arch),
        ]);
        let widths = |idx: Vec<usize>| -> Vec<usize> {
            idx.into_iter().map(|i| spec.codes()[i].kind.width()).collect()
        };
        let us_widths = widths(spec.unsupervised_indices());
        let ss_widths = widths(spec.supervised_indices());
        Ok(Self {
            trunk,
            head_d: head(arch.d_hidden, 1),
            head_q_us: head(arch.d_hidden, us_widths.iter().sum()),
            head_q_ss: head(arch.d_hidden, ss_widths.iter().sum()),
            us_widths,
            ss_widths,
            shape,
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn head(&self, head: Head) -> &Sequential<T> {
        match head {
            Head::D => &self.head_d,
            Head::QUs => &self.head_q_us,
            Head::QSs => &self.head_q_ss,
        }
    }

    fn widths(&self, head: Head) -> &[usize] {
        match head {
            Head::D => &[1],
            Head::QUs => &self.us_widths,
            Head::QSs => &self.ss_widths,
        }
    }

    fn check(&self, images: &Tensor<T>) -> Result<(), NetError> {
        let got = images.shape();
        if got.len() != 4 || got[1..] != self.shape.dims() {
            return Err(NetError::ImageShape { expected: self.shape.dims(), got: got.to_vec() });
        }
        if !images.iter().all(|v| v.is_finite()) {
            return Err(NetError::NonFinite);
        }
        Ok(())
    }

    /// One trunk evaluation and the requested head readouts.
    pub fn forward(&self, images: &Tensor<T>, mode: Mode, heads: Heads) -> Result<DiscriminatorPass<T>, NetError> {
        self.check(images)?;
        let (features, trunk_tape) = self.trunk.forward(images, mode, None);
        let mut output = DiscriminatorOutput { d_prob: Vec::new(), q_us: Vec::new(), q_ss: Vec::new() };
        let mut raw_prob = Vec::new();
        let d_tape = heads.d.then(|| {
            let (logit, tape) = self.head_d.forward(&features, mode, None);
            raw_prob = to_f64(&logit).into_iter().map(|l| 1.0 / (1.0 + (-l).exp())).collect();
            output.d_prob = raw_prob.iter().map(|&p| clamp_prob(p)).collect();
            tape
        });
        let code_head = |head: &Sequential<T>, widths: &[usize], want: bool, out: &mut Vec<Array2<f64>>| {
            if !want || widths.is_empty() {
                return None;
            }
            let (y, tape) = head.forward(&features, mode, None);
            let y = to_f64_2d(&y);
            let mut offset = 0;
            for &w in widths {
                out.push(y.slice(s![.., offset..offset + w]).to_owned());
                offset += w;
            }
            Some(tape)
        };
        let us_tape = code_head(&self.head_q_us, &self.us_widths, heads.q_us, &mut output.q_us);
        let ss_tape = code_head(&self.head_q_ss, &self.ss_widths, heads.q_ss, &mut output.q_ss);
        Ok(DiscriminatorPass { output, trunk_tape, d_tape, us_tape, ss_tape, raw_prob, batch: images.shape()[0] })
    }

    /// Evaluation-mode readout of every head.
    pub fn infer(&self, images: &Tensor<T>) -> Result<DiscriminatorOutput, NetError> {
        Ok(self.forward(images, Mode::Eval, Heads::ALL)?.output)
    }

    /// Folds the pass's batch statistics into the trunk's running estimates.
    pub fn absorb_stats(&mut self, pass: &DiscriminatorPass<T>) {
        self.trunk.absorb_stats(&pass.trunk_tape);
    }

    /// Gradient with respect to the realness logit given one with respect to
    /// the clamped probability.
    pub fn logit_grad(&self, pass: &DiscriminatorPass<T>, grad_prob: &[f64]) -> Tensor<T> {
        let g = Array2::from_shape_fn((pass.batch, 1), |(row, _)| {
            let p = pass.raw_prob[row];
            let inside = p > PROB_EPS && p < 1.0 - PROB_EPS;
            grad_prob[row] * if inside { p * (1.0 - p) } else { 0.0 }
        });
        from_f64_2d(&g)
    }

    /// Gradient with respect to a head's raw output for the selected terms.
    fn head_output_grad(&self, pass: &DiscriminatorPass<T>, head: Head, terms: &[&HeadGrad<'_>]) -> Option<Tensor<T>> {
        if terms.is_empty() {
            return None;
        }
        let width: usize = self.widths(head).iter().sum();
        let mut g = Array2::<f64>::zeros((pass.batch, width));
        for t in terms {
            let mut offset = 0;
            for block in &t.blocks {
                let w = block.ncols();
                g.slice_mut(s![.., offset..offset + w]).scaled_add(t.route.weight, block);
                offset += w;
            }
        }
        if head == Head::D {
            // Through the clamp and the sigmoid, into the logit.
            for (row, &p) in pass.raw_prob.iter().enumerate() {
                let inside = p > PROB_EPS && p < 1.0 - PROB_EPS;
                g[[row, 0]] *= if inside { p * (1.0 - p) } else { 0.0 };
            }
        }
        Some(from_f64_2d(&g))
    }

    /// Backpropagates the given term gradients of one pass, honouring each
    /// term's route: a head's parameters receive only terms routed to that
    /// head, the trunk only terms routed to [`ParamGroup::Trunk`], and the
    /// returned image gradient only terms routed to
    /// [`ParamGroup::Generator`].
    pub fn backward_routed(
        &self,
        pass: &DiscriminatorPass<T>,
        terms: &[HeadGrad<'_>],
        grads: &mut GroupGrads<T>,
        want_images: bool,
    ) -> Option<Tensor<T>> {
        let select = |head: Head, group: ParamGroup| -> Vec<usize> {
            (0..terms.len()).filter(|&i| terms[i].head == head && terms[i].route.reaches(group)).collect()
        };
        let pick = |idx: &[usize]| -> Vec<&HeadGrad<'_>> { idx.iter().map(|&i| &terms[i]).collect() };
        let add = |acc: &mut Option<Tensor<T>>, g: Tensor<T>| match acc {
            Some(a) => *a += &g,
            None => *acc = Some(g),
        };

        let mut trunk_feat: Option<Tensor<T>> = None;
        let mut gen_feat: Option<Tensor<T>> = None;
        let mut trunk_sets = Vec::new();
        let mut gen_sets = Vec::new();
        for head in [Head::D, Head::QUs, Head::QSs] {
            if !terms.iter().any(|t| t.head == head) {
                continue;
            }
            let tape = match head {
                Head::D => pass.d_tape.as_ref(),
                Head::QUs => pass.us_tape.as_ref(),
                Head::QSs => pass.ss_tape.as_ref(),
            }
            .expect("head gradient for a head that was not evaluated");
            let net = self.head(head);
            let for_params = select(head, head.group());
            let for_trunk = select(head, ParamGroup::Trunk);
            let for_gen = if want_images { select(head, ParamGroup::Generator) } else { Vec::new() };

            let mut trunk_in = None;
            if let Some(gy) = self.head_output_grad(pass, head, &pick(&for_params)) {
                let merged = for_params == for_trunk;
                let gx = net.backward(tape, gy, Some(grads.slot(head.group(), net)), merged);
                if merged {
                    trunk_in = gx;
                }
            }
            if trunk_in.is_none() {
                if let Some(gy) = self.head_output_grad(pass, head, &pick(&for_trunk)) {
                    trunk_in = net.backward(tape, gy, None, true);
                }
            }
            let gen_in = if for_gen == for_trunk {
                trunk_in.clone()
            } else {
                self.head_output_grad(pass, head, &pick(&for_gen)).and_then(|gy| net.backward(tape, gy, None, true))
            };
            if let Some(g) = trunk_in {
                add(&mut trunk_feat, g);
            }
            if let Some(g) = gen_in {
                add(&mut gen_feat, g);
            }
            trunk_sets.push(for_trunk);
            gen_sets.push(for_gen);
        }

        if let Some(gf) = trunk_feat {
            // One pass serves both purposes when the same terms feed them.
            let merged = want_images && trunk_sets == gen_sets;
            let gx = self.trunk.backward(&pass.trunk_tape, gf, Some(grads.slot(ParamGroup::Trunk, &self.trunk)), merged);
            if merged {
                return gx;
            }
        }
        gen_feat.and_then(|gf| self.trunk.backward(&pass.trunk_tape, gf, None, true))
    }
}

/// Both networks, addressable by parameter group.
#[derive(Clone, Debug)]
pub struct Networks<T> {
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
}

impl<T: Scalar> Networks<T> {
    /// Builds and initializes both networks. Each group draws its initial
    /// values from its own stream of `seed`, so adding or removing a head
    /// never changes the initialization of the others.
    pub fn new(spec: &LatentSpec, shape: ImageShape, arch: &ArchConfig, seed: u64) -> Result<Self, NetError> {
        let mut nets = Self {
            generator: Generator::new(spec.input_width(), shape, arch)?,
            discriminator: Discriminator::new(spec, shape, arch)?,
        };
        let init: Init = arch.init.into();
        for group in ParamGroup::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(group.index() as u64 + 1);
            init.apply(nets.group_mut(group), &mut rng as &mut dyn RngCore);
        }
        Ok(nets)
    }

    pub fn group(&self, group: ParamGroup) -> &Sequential<T> {
        match group {
            ParamGroup::Generator => &self.generator.net,
            ParamGroup::Trunk => &self.discriminator.trunk,
            ParamGroup::HeadD => &self.discriminator.head_d,
            ParamGroup::HeadQUs => &self.discriminator.head_q_us,
            ParamGroup::HeadQSs => &self.discriminator.head_q_ss,
        }
    }

    pub fn group_mut(&mut self, group: ParamGroup) -> &mut Sequential<T> {
        match group {
            ParamGroup::Generator => &mut self.generator.net,
            ParamGroup::Trunk => &mut self.discriminator.trunk,
            ParamGroup::HeadD => &mut self.discriminator.head_d,
            ParamGroup::HeadQUs => &mut self.discriminator.head_q_us,
            ParamGroup::HeadQSs => &mut self.discriminator.head_q_ss,
        }
    }

    /// Flat copy of a group's parameters, for bit-exact comparisons.
    pub fn snapshot(&self, group: ParamGroup) -> Vec<ArrayD<T>> {
        self.group(group).params().into_iter().cloned().collect()
    }
}

/// Reshapes a flat `[N, C·H·W]` view into an image batch.
pub fn images_from_rows<T: Scalar>(rows: &Array2<f64>, shape: ImageShape) -> Tensor<T> {
    let n = rows.nrows();
    rows.mapv(T::from_f64_lossy)
        .into_shape_with_order(IxDyn(&[n, shape.channels, shape.height, shape.width]))
        .expect("row width equals pixel count")
}
