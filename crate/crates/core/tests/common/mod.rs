#![allow(dead_code)]

use std::path::PathBuf;

use infogan_nn::{Mode, Tensor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ss_infogan::data::{load_mnist_dir, SemiSupervisedDataset, Split};
use ss_infogan::latent::{sample_latent, CodeSpec, LatentBatch, LatentSpec};
use ss_infogan::nets::{ArchConfig, GroupGrads, Head, HeadGrad, Heads, ImageShape, Networks};
use ss_infogan::objectives::{
    gan_d_loss, gan_g_loss, mi_supervised_fake, mi_supervised_real, mi_unsupervised, GeneratorLossMode, LossTerm,
    ParamGroup, Phase, Route,
};

pub fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

pub fn mnist(split: Split) -> Option<SemiSupervisedDataset> {
    load_mnist_dir(&mnist_dir(), split).ok()
}

pub const TINY_SHAPE: ImageShape = ImageShape { channels: 1, height: 4, width: 4 };

/// Two noise dimensions, a supervised 3-way code plus a supervised continuous
/// code, and free 2-way and continuous codes.
pub fn tiny_spec() -> LatentSpec {
    LatentSpec::new(
        2,
        vec![
            CodeSpec::categorical("cls", 3, true),
            CodeSpec::continuous("s", -1.0, 1.0, true),
            CodeSpec::categorical("u", 2, false),
            CodeSpec::continuous("c", -1.0, 1.0, false),
        ],
    )
    .unwrap()
}

/// Fully labeled random dataset of tiny images.
pub fn tiny_dataset(n: usize, seed: u64) -> SemiSupervisedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels: Vec<f32> = (0..n * TINY_SHAPE.pixels()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { (i % 3) as f64 } else { rng.random_range(-1.0..1.0) });
    SemiSupervisedDataset::new(TINY_SHAPE, Split::Train, pixels, labels).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Term {
    GanD,
    GanG(GeneratorLossMode),
    LI,
    LIS1,
    LIS2,
}

impl Term {
    pub fn name(self) -> &'static str {
        match self {
            Term::GanD => "gan_d_loss",
            Term::GanG(GeneratorLossMode::Minimax) => "gan_g_loss (minimax)",
            Term::GanG(GeneratorLossMode::NonSaturating) => "gan_g_loss (non-saturating)",
            Term::LI => "L_I",
            Term::LIS1 => "L1_IS",
            Term::LIS2 => "L2_IS",
        }
    }

    /// Every group the term depends on.
    fn route(self) -> Route {
        use ParamGroup::*;
        let (phase, term, groups) = match self {
            Term::GanD => (Phase::Discriminator, LossTerm::GanD, vec![Generator, Trunk, HeadD]),
            Term::GanG(_) => (Phase::Generator, LossTerm::GanG, vec![Generator, Trunk, HeadD]),
            Term::LI => (Phase::Generator, LossTerm::MiUnsupervised, vec![Generator, Trunk, HeadQUs]),
            Term::LIS1 => (Phase::Generator, LossTerm::MiSupervisedReal, vec![Trunk, HeadQSs]),
            Term::LIS2 => (Phase::Generator, LossTerm::MiSupervisedFake, vec![Generator, Trunk, HeadQSs]),
        };
        Route { phase, term, weight: 1.0, groups }
    }
}

/// Small f64 networks with fixed inputs for finite-difference checks.
pub struct Fixture {
    pub spec: LatentSpec,
    pub nets: Networks<f64>,
    pub latent: LatentBatch,
    pub real: Tensor<f64>,
    pub labels: Vec<Option<Vec<f64>>>,
}

impl Fixture {
    pub fn new(seed: u64) -> Self {
        let spec = tiny_spec();
        let mut nets = Networks::<f64>::new(&spec, TINY_SHAPE, &ArchConfig::tiny(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        // Zero-initialized biases can put activations exactly on a rectifier
        // kink, where central differences are meaningless.
        for group in ParamGroup::ALL {
            for p in nets.group_mut(group).params_mut() {
                p.mapv_inplace(|v| v + rng.random_range(-0.1..0.1));
            }
        }
        let batch = 8;
        let latent = sample_latent(&spec, batch, &mut rng).unwrap();
        let data = tiny_dataset(batch, seed);
        let idx: Vec<usize> = (0..batch).collect();
        let real = data.images::<f64>(&idx);
        let labels = idx.iter().map(|&i| data.label(i)).collect();
        Self { spec, nets, latent, real, labels }
    }

    pub fn num_params(&self) -> usize {
        ParamGroup::ALL.iter().map(|&g| self.nets.group(g).num_params()).sum()
    }

    pub fn loss(&self, nets: &Networks<f64>, term: Term) -> f64 {
        let disc = &nets.discriminator;
        let fake = || nets.generator.forward(self.latent.encoded()).unwrap().0;
        match term {
            Term::GanD => {
                let r = disc.forward(&self.real, Mode::Train, Heads::D).unwrap();
                let f = disc.forward(&fake(), Mode::Train, Heads::D).unwrap();
                gan_d_loss(&r.output.d_prob, &f.output.d_prob).value
            }
            Term::GanG(mode) => {
                let f = disc.forward(&fake(), Mode::Train, Heads::D).unwrap();
                gan_g_loss(&f.output.d_prob, mode).value
            }
            Term::LI => {
                let f = disc.forward(&fake(), Mode::Train, Heads::ALL).unwrap();
                mi_unsupervised(&self.spec, &f.output.q_us, &self.latent).unwrap().value
            }
            Term::LIS1 => {
                let r = disc.forward(&self.real, Mode::Train, Heads::ALL).unwrap();
                mi_supervised_real(&self.spec, &r.output.q_ss, &self.labels).unwrap().value
            }
            Term::LIS2 => {
                let f = disc.forward(&fake(), Mode::Train, Heads::ALL).unwrap();
                mi_supervised_fake(&self.spec, &f.output.q_ss, &self.latent).unwrap().value
            }
        }
    }

    /// Analytic gradient of `term` through the routed backward pass.
    pub fn analytic(&self, term: Term) -> GroupGrads<f64> {
        let route = term.route();
        let nets = &self.nets;
        let disc = &nets.discriminator;
        let (fake, g_tape) = nets.generator.forward(self.latent.encoded()).unwrap();
        let mut grads = GroupGrads::default();
        let col = |v: &[f64]| Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap();
        let (pass, head, blocks) = match term {
            Term::GanD => {
                let r = disc.forward(&self.real, Mode::Train, Heads::D).unwrap();
                let f = disc.forward(&fake, Mode::Train, Heads::D).unwrap();
                let l = gan_d_loss(&r.output.d_prob, &f.output.d_prob);
                let t = [HeadGrad { route: &route, head: Head::D, blocks: vec![col(&l.grad_real)] }];
                disc.backward_routed(&r, &t, &mut grads, false);
                (f, Head::D, vec![col(&l.grad_fake)])
            }
            Term::GanG(mode) => {
                let f = disc.forward(&fake, Mode::Train, Heads::D).unwrap();
                let l = gan_g_loss(&f.output.d_prob, mode);
                (f, Head::D, vec![col(&l.grad)])
            }
            Term::LI => {
                let f = disc.forward(&fake, Mode::Train, Heads::ALL).unwrap();
                let l = mi_unsupervised(&self.spec, &f.output.q_us, &self.latent).unwrap();
                (f, Head::QUs, l.grads)
            }
            Term::LIS1 => {
                let r = disc.forward(&self.real, Mode::Train, Heads::ALL).unwrap();
                let l = mi_supervised_real(&self.spec, &r.output.q_ss, &self.labels).unwrap();
                (r, Head::QSs, l.grads)
            }
            Term::LIS2 => {
                let f = disc.forward(&fake, Mode::Train, Heads::ALL).unwrap();
                let l = mi_supervised_fake(&self.spec, &f.output.q_ss, &self.latent).unwrap();
                (f, Head::QSs, l.grads)
            }
        };
        let t = [HeadGrad { route: &route, head, blocks }];
        let want = route.reaches(ParamGroup::Generator);
        if let Some(img) = disc.backward_routed(&pass, &t, &mut grads, want) {
            let slot = grads.slot(ParamGroup::Generator, &nets.generator.net);
            nets.generator.backward(&g_tape, img, Some(slot), false);
        }
        grads
    }

    /// Largest relative deviation between the analytic gradient and central
    /// differences over every parameter of every group the term reaches, and
    /// the number of parameters visited.
    pub fn gradient_error(&self, term: Term) -> (f64, usize) {
        let grads = self.analytic(term);
        let h = 1e-5;
        let mut worst = 0.0f64;
        let mut count = 0;
        // Below this level central differences are dominated by rounding
        // (parameters feeding a batch norm have an exactly zero gradient).
        let floor = 64.0 * f64::EPSILON * self.loss(&self.nets, term).abs().max(1.0) / h;
        for group in term.route().groups {
            let analytic = grads.get(group).expect("group received a gradient");
            let tensors = self.nets.group(group).params().len();
            for t in 0..tensors {
                let len = self.nets.group(group).params()[t].len();
                for e in 0..len {
                    let eval = |delta: f64| {
                        let mut nets = self.nets.clone();
                        let mut params = nets.group_mut(group).params_mut();
                        params[t].as_slice_mut().expect("contiguous")[e] += delta;
                        drop(params);
                        self.loss(&nets, term)
                    };
                    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                    let a = analytic.tensors[t].as_slice().unwrap()[e];
                    let scale = a.abs().max(numeric.abs());
                    if scale > floor {
                        worst = worst.max((a - numeric).abs() / scale);
                    }
                    count += 1;
                }
            }
        }
        (worst, count)
    }
}
