//! Alternating optimization of the full objective with routed updates,
//! metrics emission, periodic evaluation and resumable checkpoints.
//!
//! One training step runs a discriminator phase (adversarial loss into the
//! trunk and realness head) followed by a generator/code phase in which the
//! generator, the free-code head and, on labeled batches, the supervised-code
//! head all receive their routed gradients and are stepped together.

use std::fs::{self, File, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};

use infogan_nn::{Adam, AdamConfig, Mode, Sequential, Tensor};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, spec_hash, CheckpointError, Manifest, RngStates, Storable};
use crate::data::{draw_batch, instance_noise, AnnealSchedule, Batch, DataError, InstanceNoise, SemiSupervisedDataset};
use crate::eval::{
    class_code, render_traversal_grid, zero_one_loss, EvalClassifier, EvalError, GridSpec, ImageSource, ZeroOneRecord,
};
use crate::latent::{sample_latent, CodeKind, LatentBatch, LatentError, LatentSpec};
use crate::nets::{ArchConfig, GroupGrads, HeadGrad, Heads, Head, ImageShape, NetError, Networks};
use crate::objectives::{
    gan_d_loss, gan_g_loss, mi_supervised_fake, mi_supervised_real, mi_unsupervised, routed_updates,
    GeneratorLossMode, LossReport, LossTerm, LossWeights, ObjectiveError, ParamGroup, Phase, UpdateDirective,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {reason}")]
    Csv { path: PathBuf, reason: String },
    #[error("non-finite loss or gradient at step {step} (epoch {epoch}): {detail}")]
    NonFinite { step: u64, epoch: usize, detail: String },
}

/// Which training algorithm drives the step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Routed update engine with both supervised terms.
    #[default]
    SsInfogan,
    /// Plain InfoGAN step: adversarial loss plus the free-code term only.
    Infogan,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr_g: 2e-4, lr_d: 2e-4, beta1: 0.5, beta2: 0.999 }
    }
}

impl OptimizerConfig {
    fn adam(&self, group: ParamGroup) -> AdamConfig {
        let lr = if group == ParamGroup::Generator { self.lr_g } else { self.lr_d };
        AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, eps: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub generator_loss: GeneratorLossMode,
    /// Whether the labeled-real term also trains the shared trunk.
    pub lis1_updates_trunk: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 1.0, generator_loss: GeneratorLossMode::NonSaturating, lis1_updates_trunk: true }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda1: self.lambda1, lambda2: self.lambda2 }
    }
}

/// Initial labeled-draw probability and decay length in epochs; the target
/// ratio comes from the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealConfig {
    pub p0: f64,
    pub duration: f64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self { p0: 1.0, duration: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Epoch cadence of 0-1 evaluations (0 disables).
    pub every: usize,
    pub samples: usize,
    /// Additional evaluations every this many steps (0 disables).
    pub every_steps: usize,
    pub samples_steps: usize,
    /// Epoch cadence of traversal grids (0 disables).
    pub grid_every: usize,
    /// Epoch cadence of checkpoints (0 keeps only the final one).
    pub checkpoint_every: usize,
    /// Categorical code treated as the class; defaults to the first
    /// supervised categorical code.
    pub class_code: Option<String>,
    pub grid_steps: usize,
    pub grid_lo: f64,
    pub grid_hi: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            every: 1,
            samples: 10_000,
            every_steps: 0,
            samples_steps: 2_000,
            grid_every: 5,
            checkpoint_every: 5,
            class_code: None,
            grid_steps: 10,
            grid_lo: -2.0,
            grid_hi: 2.0,
        }
    }
}

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub latent: LatentSpec,
    pub arch: ArchConfig,
    pub shape: ImageShape,
    pub mode: TrainMode,
    pub batch_size: usize,
    pub epochs: usize,
    /// Defaults to `N / batch_size` when absent.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub fraction: f64,
    pub anneal: AnnealConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub noise: InstanceNoise,
    pub eval: EvalSettings,
}

impl TrainConfig {
    /// MNIST defaults with the given labeled fraction.
    pub fn mnist(fraction: f64) -> Self {
        Self {
            latent: LatentSpec::mnist_default(),
            arch: ArchConfig::default(),
            shape: ImageShape::MNIST,
            mode: TrainMode::SsInfogan,
            batch_size: 64,
            epochs: 30,
            steps_per_epoch: None,
            seed: 0,
            fraction,
            anneal: AnnealConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            noise: InstanceNoise::default(),
            eval: EvalSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_owned()));
        self.shape.validate()?;
        self.arch.validate()?;
        self.loss.weights().validate()?;
        if self.batch_size < 2 {
            return bad("train.batch_size must be at least 2");
        }
        if self.epochs == 0 {
            return bad("train.epochs must be at least 1");
        }
        if self.steps_per_epoch == Some(0) {
            return bad("train.steps_per_epoch must be positive");
        }
        if !(0.0..=1.0).contains(&self.fraction) {
            return bad("train.fraction must lie in [0, 1]");
        }
        if self.fraction > 0.0 && self.mode == TrainMode::SsInfogan && !self.latent.has_supervised() {
            return bad("train.fraction > 0 requires at least one supervised code");
        }
        if !(0.0..=1.0).contains(&self.anneal.p0) || !(self.anneal.duration >= 0.0) {
            return bad("anneal.p0 must lie in [0, 1] and anneal.duration must be non-negative");
        }
        if !(self.noise.sigma0 >= 0.0) {
            return bad("instance_noise.sigma0 must be non-negative");
        }
        let o = &self.optimizer;
        if !(o.lr_g > 0.0 && o.lr_d > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad("optimizer settings out of range");
        }
        Ok(())
    }

    pub fn spec_hash(&self) -> String {
        spec_hash(&self.latent, &self.arch, &self.shape)
    }
}

/// Samples seen by each loss family, for auditing how unlabeled data is used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SampleCounts {
    pub adversarial: u64,
    pub adversarial_unlabeled: u64,
    pub supervised_real: u64,
}

/// Training state: networks, per-group optimizers, counters and random sources.
pub struct Trainer<T: Storable> {
    pub config: TrainConfig,
    pub nets: Networks<T>,
    optimizers: [Option<Adam<T>>; 5],
    /// Completed steps.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngStates,
    pub counts: SampleCounts,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

// Stream ids 1..=5 are taken by per-group initialization.
const DATA_STREAM: u64 = 16;
const LATENT_STREAM: u64 = 17;
const NOISE_STREAM: u64 = 18;
const EVAL_STREAM: u64 = 19;
const LABEL_STREAM: u64 = 20;

fn column(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("column")
}

/// Per-step intermediate values shared by both step implementations.
struct Prepared<T> {
    latent: LatentBatch,
    fake: Tensor<T>,
    g_tape: infogan_nn::Tape<T>,
    real_in: Tensor<T>,
    fake_in: Tensor<T>,
}

impl<T: Storable> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let nets = Networks::new(&config.latent, config.shape, &config.arch, config.seed)?;
        let rng = RngStates {
            data: stream(config.seed, DATA_STREAM),
            latent: stream(config.seed, LATENT_STREAM),
            noise: stream(config.seed, NOISE_STREAM),
        };
        Ok(Self { config, nets, optimizers: Default::default(), step: 0, epoch: 0, rng, counts: SampleCounts::default() })
    }

    pub fn optimizer(&self, group: ParamGroup) -> Option<&Adam<T>> {
        self.optimizers[group.index()].as_ref()
    }

    /// Random source used to choose which samples keep their labels.
    pub fn label_rng(&self) -> ChaCha8Rng {
        stream(self.config.seed, LABEL_STREAM)
    }

    /// Random source for evaluations; identical at every call so successive
    /// evaluations score the same latent draws.
    pub fn eval_rng(&self) -> ChaCha8Rng {
        stream(self.config.seed, EVAL_STREAM)
    }

    pub fn steps_per_epoch(&self, data: &SemiSupervisedDataset) -> usize {
        self.config.steps_per_epoch.unwrap_or((data.len() / self.config.batch_size).max(1))
    }

    /// Labeled-draw schedule for a dataset's true ratio. A dataset without
    /// labels, or the plain InfoGAN mode, never draws labeled batches.
    pub fn schedule(&self, data: &SemiSupervisedDataset) -> AnnealSchedule {
        let r = data.ratio();
        if r == 0.0 || self.config.mode == TrainMode::Infogan {
            return AnnealSchedule { p0: 0.0, duration: 0.0, r: 0.0 };
        }
        AnnealSchedule { p0: self.config.anneal.p0.max(r), duration: self.config.anneal.duration, r }
    }

    pub fn next_batch(&mut self, data: &SemiSupervisedDataset) -> Result<Batch, TrainError> {
        let p = self.schedule(data).probability(self.epoch);
        Ok(draw_batch(data, self.config.batch_size, p, &mut self.rng.data)?)
    }

    fn prepare(&mut self, data: &SemiSupervisedDataset, batch: &Batch) -> Result<Prepared<T>, TrainError> {
        let latent = sample_latent(&self.config.latent, batch.indices.len(), &mut self.rng.latent)?;
        let (fake, g_tape) = self.nets.generator.forward(latent.encoded())?;
        let real = data.images::<T>(&batch.indices);
        let sigma = self.config.noise.sigma(self.epoch);
        let real_in = instance_noise(&real, sigma, &mut self.rng.noise);
        let fake_in = instance_noise(&fake, sigma, &mut self.rng.noise);
        Ok(Prepared { latent, fake, g_tape, real_in, fake_in })
    }

    fn apply(&mut self, grads: &GroupGrads<T>) {
        for group in grads.touched() {
            let cfg = self.config.optimizer.adam(group);
            let net = self.nets.group_mut(group);
            let adam = self.optimizers[group.index()].get_or_insert_with(|| Adam::new(cfg, &net.params()));
            adam.step(net.params_mut(), grads.get(group).expect("touched group"));
        }
    }

    fn guard(&self, report: &LossReport, grads: &GroupGrads<T>) -> Result<(), TrainError> {
        if report.all_finite() && grads.all_finite() {
            Ok(())
        } else {
            Err(TrainError::NonFinite { step: self.step, epoch: self.epoch, detail: format!("{report:?}") })
        }
    }

    fn count(&mut self, batch: &Batch, supervised: bool) {
        let n = batch.indices.len() as u64;
        self.counts.adversarial += n;
        self.counts.adversarial_unlabeled += batch.labels.iter().filter(|l| l.is_none()).count() as u64;
        if supervised {
            self.counts.supervised_real += n;
        }
    }

    /// One step of the configured algorithm.
    pub fn train_step(&mut self, data: &SemiSupervisedDataset, batch: &Batch) -> Result<LossReport, TrainError> {
        match self.config.mode {
            TrainMode::SsInfogan => {
                let labeled = batch.labeled && self.config.latent.has_supervised();
                let directive =
                    routed_updates(&self.config.loss.weights(), labeled, self.config.loss.lis1_updates_trunk);
                self.train_step_directed(data, batch, &directive)
            }
            TrainMode::Infogan => self.infogan_step(data, batch),
        }
    }

    /// One step applying exactly the given routing table.
    pub fn train_step_directed(
        &mut self,
        data: &SemiSupervisedDataset,
        batch: &Batch,
        directive: &UpdateDirective,
    ) -> Result<LossReport, TrainError> {
        let spec = self.config.latent.clone();
        let prep = self.prepare(data, batch)?;

        // Discriminator phase.
        let disc = &self.nets.discriminator;
        let pass_r = disc.forward(&prep.real_in, Mode::Train, Heads::D)?;
        let pass_f = disc.forward(&prep.fake_in, Mode::Train, Heads::D)?;
        let dl = gan_d_loss(&pass_r.output.d_prob, &pass_f.output.d_prob);
        let mut grads_d = GroupGrads::default();
        let mut d_total = 0.0;
        for route in directive.phase(Phase::Discriminator) {
            if route.term != LossTerm::GanD {
                continue;
            }
            d_total += route.weight * dl.value;
            let real = [HeadGrad { route, head: Head::D, blocks: vec![column(&dl.grad_real)] }];
            disc.backward_routed(&pass_r, &real, &mut grads_d, false);
            let fake = [HeadGrad { route, head: Head::D, blocks: vec![column(&dl.grad_fake)] }];
            disc.backward_routed(&pass_f, &fake, &mut grads_d, false);
        }
        self.nets.discriminator.absorb_stats(&pass_r);

        let partial = LossReport {
            d_loss: dl.value,
            g_loss: 0.0,
            l_i: 0.0,
            l_is1: None,
            l_is2: 0.0,
            d_total,
            g_total: 0.0,
            labeled: batch.labeled,
        };
        self.guard(&partial, &grads_d)?;
        self.apply(&grads_d);

        // Generator / code phase, against the updated discriminator.
        let disc = &self.nets.discriminator;
        let pass = disc.forward(&prep.fake_in, Mode::Train, Heads::ALL)?;
        let gl = gan_g_loss(&pass.output.d_prob, self.config.loss.generator_loss);
        let li = mi_unsupervised(&spec, &pass.output.q_us, &prep.latent)?;
        let l2 = mi_supervised_fake(&spec, &pass.output.q_ss, &prep.latent)?;
        let labeled = batch.labeled && spec.has_supervised();
        let real_pass = if labeled {
            let p = disc.forward(&prep.real_in, Mode::Train, Heads { d: false, q_us: false, q_ss: true })?;
            let l1 = mi_supervised_real(&spec, &p.output.q_ss, &batch.labels)?;
            Some((p, l1))
        } else {
            None
        };

        let mut grads_g = GroupGrads::default();
        let mut terms = Vec::new();
        let mut g_total = 0.0;
        let mut reaches_g = false;
        for route in directive.phase(Phase::Generator) {
            let (head, value, blocks) = match route.term {
                LossTerm::GanG => (Head::D, gl.value, vec![column(&gl.grad)]),
                LossTerm::MiUnsupervised => (Head::QUs, li.value, li.grads.clone()),
                LossTerm::MiSupervisedFake => (Head::QSs, l2.value, l2.grads.clone()),
                _ => continue,
            };
            if blocks.is_empty() {
                continue;
            }
            g_total += route.weight * value;
            reaches_g |= route.reaches(ParamGroup::Generator);
            terms.push(HeadGrad { route, head, blocks });
        }
        if !terms.is_empty() {
            let img = disc.backward_routed(&pass, &terms, &mut grads_g, reaches_g);
            if let Some(img) = img {
                let slot = grads_g.slot(ParamGroup::Generator, &self.nets.generator.net);
                self.nets.generator.backward(&prep.g_tape, img, Some(slot), false);
            }
        }
        let mut l_is1 = None;
        if let Some((p, l1)) = &real_pass {
            l_is1 = Some(l1.value);
            if let Some(route) = directive.phase(Phase::Generator).find(|r| r.term == LossTerm::MiSupervisedReal) {
                g_total += route.weight * l1.value;
                let t = [HeadGrad { route, head: Head::QSs, blocks: l1.grads.clone() }];
                disc.backward_routed(p, &t, &mut grads_g, false);
            }
        }
        let used_l1 = real_pass.is_some() && directive.route(LossTerm::MiSupervisedReal).is_some();

        let report = LossReport {
            d_loss: dl.value,
            g_loss: gl.value,
            l_i: li.value,
            l_is1,
            l_is2: l2.value,
            d_total,
            g_total,
            labeled: batch.labeled,
        };
        self.guard(&report, &grads_g)?;
        self.apply(&grads_g);
        self.nets.generator.net.absorb_stats(&prep.g_tape);
        let _ = &prep.fake;
        self.count(batch, used_l1);
        self.step += 1;
        Ok(report)
    }

    /// Reference InfoGAN step written directly against the layers: the
    /// adversarial game plus `λ₁ L_I` into the generator, free-code head and
    /// trunk. Supervised codes are sampled but no loss reads them and labels
    /// are never used.
    pub fn infogan_step(&mut self, data: &SemiSupervisedDataset, batch: &Batch) -> Result<LossReport, TrainError> {
        let spec = self.config.latent.clone();
        let lambda1 = self.config.loss.lambda1;
        let prep = self.prepare(data, batch)?;
        let disc = &self.nets.discriminator;

        let pass_r = disc.forward(&prep.real_in, Mode::Train, Heads::D)?;
        let pass_f = disc.forward(&prep.fake_in, Mode::Train, Heads::D)?;
        let dl = gan_d_loss(&pass_r.output.d_prob, &pass_f.output.d_prob);
        let mut head_d = disc.head_d.zero_grads();
        let mut trunk = disc.trunk.zero_grads();
        for (pass, grad) in [(&pass_r, &dl.grad_real), (&pass_f, &dl.grad_fake)] {
            let gy = disc.logit_grad(pass, grad);
            let feat = disc.head_d.backward(pass.d_tape.as_ref().expect("d head"), gy, Some(&mut head_d), true);
            disc.trunk.backward(&pass.trunk_tape, feat.expect("feature grad"), Some(&mut trunk), false);
        }
        let mut grads = GroupGrads::default();
        *grads.slot(ParamGroup::HeadD, &disc.head_d) = head_d;
        *grads.slot(ParamGroup::Trunk, &disc.trunk) = trunk;
        self.nets.discriminator.absorb_stats(&pass_r);
        let partial = LossReport {
            d_loss: dl.value,
            g_loss: 0.0,
            l_i: 0.0,
            l_is1: None,
            l_is2: 0.0,
            d_total: dl.value,
            g_total: 0.0,
            labeled: false,
        };
        self.guard(&partial, &grads)?;
        self.apply(&grads);

        let disc = &self.nets.discriminator;
        let pass = disc.forward(&prep.fake_in, Mode::Train, Heads::ALL)?;
        let gl = gan_g_loss(&pass.output.d_prob, self.config.loss.generator_loss);
        let li = mi_unsupervised(&spec, &pass.output.q_us, &prep.latent)?;
        let l2 = mi_supervised_fake(&spec, &pass.output.q_ss, &prep.latent)?;

        let gy_d = disc.logit_grad(&pass, &gl.grad);
        let mut gen_feat = disc
            .head_d
            .backward(pass.d_tape.as_ref().expect("d head"), gy_d, None, true)
            .expect("feature grad");
        let mut trunk = disc.trunk.zero_grads();
        let mut head_us = disc.head_q_us.zero_grads();
        let use_li = lambda1 > 0.0 && !li.grads.is_empty();
        if use_li {
            let widths: usize = li.grads.iter().map(|b| b.ncols()).sum();
            let mut gy = Array2::<f64>::zeros((batch.indices.len(), widths));
            let mut offset = 0;
            for b in &li.grads {
                gy.slice_mut(ndarray::s![.., offset..offset + b.ncols()]).assign(&b.mapv(|v| lambda1 * v));
                offset += b.ncols();
            }
            let feat_us = disc
                .head_q_us
                .backward(pass.us_tape.as_ref().expect("q_us head"), crate::nets::to_tensor(&gy), Some(&mut head_us), true)
                .expect("feature grad");
            disc.trunk.backward(&pass.trunk_tape, feat_us.clone(), Some(&mut trunk), false);
            gen_feat += &feat_us;
        }
        let img = disc.trunk.backward(&pass.trunk_tape, gen_feat, None, true).expect("image grad");
        let mut gen = self.nets.generator.net.zero_grads();
        self.nets.generator.backward(&prep.g_tape, img, Some(&mut gen), false);

        let mut grads = GroupGrads::default();
        *grads.slot(ParamGroup::Generator, &self.nets.generator.net) = gen;
        if use_li {
            *grads.slot(ParamGroup::Trunk, &disc.trunk) = trunk;
            *grads.slot(ParamGroup::HeadQUs, &disc.head_q_us) = head_us;
        }
        let report = LossReport {
            d_loss: dl.value,
            g_loss: gl.value,
            l_i: li.value,
            l_is1: None,
            l_is2: l2.value,
            d_total: dl.value,
            g_total: gl.value + if use_li { lambda1 * li.value } else { 0.0 },
            labeled: false,
        };
        self.guard(&report, &grads)?;
        self.apply(&grads);
        self.nets.generator.net.absorb_stats(&prep.g_tape);
        self.count(batch, false);
        self.step += 1;
        Ok(report)
    }

    /// Runs one epoch, passing every step's report to `sink`.
    pub fn run_epoch(
        &mut self,
        data: &SemiSupervisedDataset,
        mut sink: impl FnMut(&Self, &LossReport) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        for _ in 0..self.steps_per_epoch(data) {
            let batch = self.next_batch(data)?;
            let report = self.train_step(data, &batch)?;
            sink(self, &report)?;
        }
        self.epoch += 1;
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format: 1,
            spec_hash: self.config.spec_hash(),
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.clone(),
            optimizer_steps: ParamGroup::ALL
                .into_iter()
                .filter_map(|g| self.optimizers[g.index()].as_ref().map(|a| (g.name().to_owned(), a.state.step)))
                .collect(),
        }
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<(), TrainError> {
        Ok(checkpoint::save(dir, &self.nets, &self.optimizers, &self.manifest())?)
    }

    /// Restores networks, optimizers, counters and random sources. Refuses
    /// checkpoints written for a different spec.
    pub fn resume(&mut self, dir: &Path) -> Result<(), TrainError> {
        let cfg = self.config.optimizer;
        let manifest = checkpoint::load(dir, &self.config.spec_hash(), &mut self.nets, &mut self.optimizers, |g, net: &Sequential<T>| {
            Adam::new(cfg.adam(g), &net.params())
        })?;
        self.epoch = manifest.epoch;
        self.step = manifest.step;
        self.rng = manifest.rng;
        Ok(())
    }
}

const METRICS_HEADER: [&str; 8] = ["step", "epoch", "d_loss", "g_loss", "l_i", "l_is1", "l_is2", "labeled_flag"];

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> TrainError + '_ {
    move |e| TrainError::Csv { path: path.to_owned(), reason: e.to_string() }
}

pub fn open_csv(path: &Path, header: &[String]) -> Result<csv::Writer<File>, TrainError> {
    let exists = path.exists() && fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| TrainError::Io { path: path.to_owned(), source })?;
    let mut w = csv::Writer::from_writer(file);
    if !exists {
        w.write_record(header).map_err(csv_err(path))?;
    }
    Ok(w)
}

pub fn metrics_row(step: u64, epoch: usize, r: &LossReport) -> Vec<String> {
    vec![
        step.to_string(),
        epoch.to_string(),
        r.d_loss.to_string(),
        r.g_loss.to_string(),
        r.l_i.to_string(),
        r.l_is1.map(|v| v.to_string()).unwrap_or_default(),
        r.l_is2.to_string(),
        u8::from(r.labeled).to_string(),
    ]
}

pub fn eval_header(k: usize) -> Vec<String> {
    let mut h = vec!["epoch".to_owned(), "n".to_owned(), "accuracy".to_owned()];
    h.extend((0..k).map(|i| format!("acc_class_{i}")));
    h.push("matched_accuracy".to_owned());
    h.push("step".to_owned());
    h
}

pub fn eval_row(record: &ZeroOneRecord, step: u64) -> Vec<String> {
    let mut row = vec![record.epoch.to_string(), record.n.to_string(), record.accuracy.to_string()];
    row.extend(record.per_class.iter().map(|a| a.to_string()));
    row.push(record.matched_accuracy.to_string());
    row.push(step.to_string());
    row
}

/// Paths and evaluation resources of a [`fit`] run.
pub struct FitOptions<'a> {
    pub out_dir: &'a Path,
    pub classifier: Option<&'a EvalClassifier>,
    pub resume_from: Option<&'a Path>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitSummary {
    pub steps: u64,
    pub epochs: usize,
    pub labeled: usize,
    pub evals: Vec<(u64, ZeroOneRecord)>,
    pub final_checkpoint: PathBuf,
}

pub fn checkpoint_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints").join(format!("epoch_{epoch:04}"))
}

/// Full training run: labels are masked to the configured fraction, then
/// `epochs` epochs are trained with metrics, evaluations, grids and
/// checkpoints written under `out_dir`.
pub fn fit(config: TrainConfig, dataset: &SemiSupervisedDataset, opts: FitOptions<'_>) -> Result<FitSummary, TrainError> {
    let mut trainer = Trainer::<f32>::new(config)?;
    let data = dataset.mask_labels(trainer.config.fraction, &mut trainer.label_rng())?;
    if data.labeled_count() == 0 && trainer.config.fraction > 0.0 {
        return Err(TrainError::Config(format!(
            "train.fraction {} keeps no labels out of {}",
            trainer.config.fraction,
            data.len()
        )));
    }
    let out = opts.out_dir;
    fs::create_dir_all(out).map_err(|source| TrainError::Io { path: out.to_owned(), source })?;
    if let Some(dir) = opts.resume_from {
        trainer.resume(dir)?;
    }
    let spec = trainer.config.latent.clone();
    let class_index = match (&trainer.config.eval.class_code, opts.classifier) {
        (_, None) => None,
        (name, Some(_)) => Some(class_code(&spec, name.as_deref())?),
    };
    let k = class_index.map_or(0, |i| match spec.codes()[i].kind {
        CodeKind::Categorical { cardinality } => cardinality,
        CodeKind::Continuous { .. } => 0,
    });
    let metrics_path = out.join("metrics.csv");
    let mut metrics = open_csv(&metrics_path, &METRICS_HEADER.map(String::from))?;
    let eval_path = out.join("eval.csv");
    let mut evals_out = match class_index {
        Some(_) => Some(open_csv(&eval_path, &eval_header(k))?),
        None => None,
    };
    let mut summary_evals = Vec::new();
    let eval = trainer.config.eval.clone();

    let evaluate = |t: &Trainer<f32>, n: usize| -> Result<Option<ZeroOneRecord>, TrainError> {
        match (opts.classifier, class_index) {
            (Some(clf), Some(ci)) => {
                let rec = zero_one_loss(&t.nets.generator, clf, &spec, ci, n, t.epoch, &mut t.eval_rng())?;
                Ok(Some(rec))
            }
            _ => Ok(None),
        }
    };

    let steps_per_epoch = trainer.steps_per_epoch(&data) as u64;
    let result = (|| -> Result<(), TrainError> {
        while trainer.epoch < trainer.config.epochs {
            let epoch = trainer.epoch;
            let mut step_evals = Vec::new();
            trainer.run_epoch(&data, |t, report| {
                metrics.write_record(metrics_row(t.step, epoch, report)).map_err(csv_err(&metrics_path))?;
                if eval.every_steps > 0 && t.step % eval.every_steps as u64 == 0 && t.step % steps_per_epoch != 0 {
                    if let Some(rec) = evaluate(t, eval.samples_steps)? {
                        step_evals.push((t.step, rec));
                    }
                }
                Ok(())
            })?;
            metrics.flush().map_err(|source| TrainError::Io { path: metrics_path.clone(), source })?;
            let done = trainer.epoch;
            if eval.every > 0 && done % eval.every == 0 {
                if let Some(rec) = evaluate(&trainer, eval.samples)? {
                    step_evals.push((trainer.step, rec));
                }
            }
            if let Some(w) = evals_out.as_mut() {
                for (step, rec) in &step_evals {
                    w.write_record(eval_row(rec, *step)).map_err(csv_err(&eval_path))?;
                }
                w.flush().map_err(|source| TrainError::Io { path: eval_path.clone(), source })?;
            }
            summary_evals.extend(step_evals);
            if eval.grid_every > 0 && done % eval.grid_every == 0 {
                write_grids(&trainer, out, done)?;
            }
            let last = done == trainer.config.epochs;
            if last || (eval.checkpoint_every > 0 && done % eval.checkpoint_every == 0) {
                trainer.save_checkpoint(&checkpoint_dir(out, done))?;
            }
        }
        Ok(())
    })();
    metrics.flush().ok();
    if let Err(e) = result {
        if let TrainError::NonFinite { step, .. } = &e {
            let dir = out.join(format!("abort_step_{step}"));
            trainer.save_checkpoint(&dir).ok();
            fs::write(dir.join("diagnostic.txt"), e.to_string()).ok();
        }
        return Err(e);
    }
    Ok(FitSummary {
        steps: trainer.step,
        epochs: trainer.epoch,
        labeled: data.labeled_count(),
        evals: summary_evals,
        final_checkpoint: checkpoint_dir(out, trainer.epoch),
    })
}

/// Writes `grid_<code>_<epoch>.png` for every code, with rows enumerating
/// the class code (or the first categorical code).
pub fn write_grids(trainer: &Trainer<f32>, out: &Path, epoch: usize) -> Result<(), TrainError> {
    let spec = &trainer.config.latent;
    let row_code = class_code(spec, trainer.config.eval.class_code.as_deref())
        .ok()
        .or_else(|| spec.codes().iter().position(|c| matches!(c.kind, CodeKind::Categorical { .. })));
    let Some(row_code) = row_code else { return Ok(()) };
    let e = &trainer.config.eval;
    let layout = GridSpec { lo: e.grid_lo, hi: e.grid_hi, steps: e.grid_steps, separator: 2 };
    for code in spec.codes() {
        let grid = render_traversal_grid(
            &trainer.nets.generator as &dyn ImageSource,
            spec,
            trainer.config.shape,
            &code.name,
            row_code,
            layout,
            &mut trainer.eval_rng(),
        )?;
        let path = out.join(format!("grid_{}_{epoch}.png", code.name));
        fs::write(&path, grid.to_png()).map_err(|source| TrainError::Io { path, source })?;
    }
    Ok(())
}
