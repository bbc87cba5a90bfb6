//! Sample-quality protocol: an independent CNN trained on the test split
//! scores class-conditional synthetic samples, and traversal grids show how
//! one code changes the output while everything else is held fixed.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::{codecs::png::PngEncoder, ExtendedColorType, ImageEncoder};
use infogan_nn::{
    Adam, AdamConfig, Conv2d, Init, Layer, Linear, MaxPool2d, Mode, Sequential, Tensor,
};
use ndarray::{Array2, Axis, IxDyn};
use pathfinding::{kuhn_munkres::kuhn_munkres, matrix::Matrix};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::group_payload;
use crate::data::{SemiSupervisedDataset, Split};
use crate::latent::{sample_latent, traverse, CodeKind, CodeValues, LatentBatch, LatentError, LatentSpec};
use crate::nets::{Generator, ImageShape, NetError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("the classifier must be trained on the test split")]
    WrongSplit,
    #[error("training data for the classifier must be fully labeled")]
    Unlabeled,
    #[error("label {value} of sample {sample} is not a class in [0, {classes})")]
    Label { sample: usize, value: f64, classes: usize },
    #[error("no categorical class code designated (a supervised categorical code or `class_code`)")]
    NoClassCode,
    #[error("class code `{code}` has {got} classes but the classifier predicts {expected}")]
    ClassCount { code: String, expected: usize, got: usize },
    #[error("sample count must be positive")]
    NoSamples,
    #[error("image shape {got:?} does not match the classifier's {expected:?}")]
    Shape { expected: ImageShape, got: ImageShape },
    #[error("{path}: {reason}")]
    Cache { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Training settings of the reference classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub channels: [usize; 2],
    pub hidden: usize,
    pub dropout: f64,
    /// Largest random translation in pixels applied to training images.
    pub shift: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            lr_decay: 0.9,
            channels: [32, 64],
            hidden: 256,
            dropout: 0.5,
            shift: 2,
            seed: 1234,
        }
    }
}

/// Reference CNN `C`: two conv/pool stages, a dense layer with dropout and a
/// linear classifier.
#[derive(Clone, Debug)]
pub struct EvalClassifier {
    pub net: Sequential<f32>,
    pub classes: usize,
    pub shape: ImageShape,
    /// Split the classifier was fitted on; always [`Split::Test`].
    pub source: Split,
    /// Accuracy on the real training split, once measured.
    pub validation_accuracy: Option<f64>,
}

fn classifier_net(shape: ImageShape, classes: usize, cfg: &ClassifierConfig) -> Sequential<f32> {
    let [c1, c2] = cfg.channels;
    let side = shape.height / 4;
    Sequential::new(vec![
        Layer::Conv2d(Conv2d::new(shape.channels, c1, 3, 1, 1)),
        Layer::Relu,
        Layer::MaxPool2d(MaxPool2d { size: 2 }),
        Layer::Conv2d(Conv2d::new(c1, c2, 3, 1, 1)),
        Layer::Relu,
        Layer::MaxPool2d(MaxPool2d { size: 2 }),
        Layer::Flatten,
        Layer::Linear(Linear::new(c2 * side * side, cfg.hidden)),
        Layer::Relu,
        Layer::Dropout(cfg.dropout as f32),
        Layer::Linear(Linear::new(cfg.hidden, classes)),
    ])
}

fn class_labels(data: &SemiSupervisedDataset, classes: usize) -> Result<Vec<usize>, EvalError> {
    data.all_labels()
        .column(0)
        .iter()
        .enumerate()
        .map(|(sample, &value)| {
            if value.fract() == 0.0 && value >= 0.0 && (value as usize) < classes {
                Ok(value as usize)
            } else {
                Err(EvalError::Label { sample, value, classes })
            }
        })
        .collect()
}

fn softmax_ce_grad(logits: &Tensor<f32>, targets: &[usize]) -> Tensor<f32> {
    let n = targets.len() as f32;
    let mut g = logits.clone();
    for (mut row, &t) in g.axis_iter_mut(Axis(0)).zip(targets) {
        let max = row.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z / n);
        row[t] -= 1.0 / n;
    }
    g
}

fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0
        })
        .collect()
}

/// Shifts each image by a random offset of at most `max` pixels per axis,
/// filling uncovered pixels with the background value -1.
fn translate<R: Rng + ?Sized>(x: &Tensor<f32>, max: usize, rng: &mut R) -> Tensor<f32> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let m = max as i64;
    let mut out = Tensor::<f32>::from_elem(x.raw_dim(), -1.0);
    for i in 0..n {
        let (dy, dx) = (rng.random_range(-m..=m) as isize, rng.random_range(-m..=m) as isize);
        for ch in 0..c {
            for r in 0..h as isize {
                let sr = r - dy;
                if sr < 0 || sr >= h as isize {
                    continue;
                }
                for col in 0..w as isize {
                    let sc = col - dx;
                    if sc >= 0 && sc < w as isize {
                        out[[i, ch, r as usize, col as usize]] = x[[i, ch, sr as usize, sc as usize]];
                    }
                }
            }
        }
    }
    out
}

/// Fits the classifier on the test split. Deterministic given `cfg.seed`.
pub fn train_classifier(
    test: &SemiSupervisedDataset,
    classes: usize,
    cfg: &ClassifierConfig,
) -> Result<EvalClassifier, EvalError> {
    if test.split() != Split::Test {
        return Err(EvalError::WrongSplit);
    }
    if !test.is_fully_labeled() {
        return Err(EvalError::Unlabeled);
    }
    let labels = class_labels(test, classes)?;
    let shape = test.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = classifier_net(shape, classes, cfg);
    Init::HeUniform.apply(&mut net, &mut rng);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }, &net.params());
    let mut order: Vec<usize> = (0..test.len()).collect();
    for epoch in 0..cfg.epochs {
        adam.config.lr = cfg.lr * cfg.lr_decay.powi(epoch as i32);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = test.images::<f32>(chunk);
            if cfg.shift > 0 {
                x = translate(&x, cfg.shift, &mut rng);
            }
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (logits, tape) = net.forward(&x, Mode::Train, Some(&mut rng as &mut dyn RngCore));
            let mut grads = net.zero_grads();
            net.backward(&tape, softmax_ce_grad(&logits, &y), Some(&mut grads), false);
            adam.step(net.params_mut(), &grads);
        }
    }
    Ok(EvalClassifier { net, classes, shape, source: Split::Test, validation_accuracy: None })
}

impl EvalClassifier {
    /// Predicted classes for an image batch, processed in chunks.
    pub fn predict(&self, images: &Tensor<f32>) -> Vec<usize> {
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + 500).min(n);
            let chunk = images.slice_axis(Axis(0), (start..end).into()).to_owned();
            out.extend(argmax_rows(&self.net.infer(&chunk)));
            start = end;
        }
        out
    }

    /// Accuracy on a labeled dataset.
    pub fn accuracy(&self, data: &SemiSupervisedDataset) -> Result<f64, EvalError> {
        if data.shape() != self.shape {
            return Err(EvalError::Shape { expected: self.shape, got: data.shape() });
        }
        let labels = class_labels(data, self.classes)?;
        let mut correct = 0;
        for chunk in (0..data.len()).collect::<Vec<_>>().chunks(1000) {
            let pred = self.predict(&data.images::<f32>(chunk));
            correct += chunk.iter().zip(pred).filter(|(&i, p)| labels[i] == *p).count();
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Measures and records accuracy on the real training split.
    pub fn validate(&mut self, train: &SemiSupervisedDataset) -> Result<f64, EvalError> {
        let acc = self.accuracy(train)?;
        self.validation_accuracy = Some(acc);
        Ok(acc)
    }

    /// Stores weights and metadata in `dir` for reuse across evaluations.
    pub fn save(&self, dir: &Path) -> Result<(), EvalError> {
        let io = |path: PathBuf| move |source| EvalError::Io { path, source };
        fs::create_dir_all(dir).map_err(io(dir.to_owned()))?;
        let weights = dir.join("classifier.safetensors");
        fs::write(&weights, group_payload(&self.net, None)).map_err(io(weights.clone()))?;
        let meta = CacheMeta {
            classes: self.classes,
            shape: self.shape,
            validation_accuracy: self.validation_accuracy,
            config: None,
        };
        let path = dir.join("classifier.json");
        fs::write(&path, serde_json::to_string_pretty(&meta).expect("serializable")).map_err(io(path.clone()))
    }

    /// Restores a classifier written by [`Self::save`] with the given config.
    pub fn load(dir: &Path, cfg: &ClassifierConfig) -> Result<Self, EvalError> {
        let meta_path = dir.join("classifier.json");
        let text = fs::read_to_string(&meta_path).map_err(|source| EvalError::Io { path: meta_path.clone(), source })?;
        let meta: CacheMeta =
            serde_json::from_str(&text).map_err(|e| EvalError::Cache { path: meta_path.clone(), reason: e.to_string() })?;
        let path = dir.join("classifier.safetensors");
        let bytes = fs::read(&path).map_err(|source| EvalError::Io { path: path.clone(), source })?;
        let bad = |reason: String| EvalError::Cache { path: path.clone(), reason };
        let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
        let mut net = classifier_net(meta.shape, meta.classes, cfg);
        let names = net.param_names();
        for (name, p) in names.iter().zip(net.params_mut()) {
            let view = st.tensor(&format!("param.{name}")).map_err(|e| bad(e.to_string()))?;
            if view.shape() != p.shape() {
                return Err(bad(format!("{name}: shape {:?}, expected {:?}", view.shape(), p.shape())));
            }
            let values = view.data().chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
            *p = Tensor::from_shape_vec(IxDyn(view.shape()), values.collect()).expect("checked shape");
        }
        Ok(Self {
            net,
            classes: meta.classes,
            shape: meta.shape,
            source: Split::Test,
            validation_accuracy: meta.validation_accuracy,
        })
    }
}

/// Loads the classifier cached in `cache` if present; otherwise trains it on
/// `test`, measures it on `train` when given, and stores it in `cache`.
pub fn cached_classifier(
    test: &SemiSupervisedDataset,
    train: Option<&SemiSupervisedDataset>,
    classes: usize,
    cfg: &ClassifierConfig,
    cache: Option<&Path>,
) -> Result<EvalClassifier, EvalError> {
    if let Some(dir) = cache {
        if dir.join("classifier.json").is_file() {
            return EvalClassifier::load(dir, cfg);
        }
    }
    let mut clf = train_classifier(test, classes, cfg)?;
    if let Some(train) = train {
        clf.validate(train)?;
    }
    if let Some(dir) = cache {
        clf.save(dir)?;
    }
    Ok(clf)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheMeta {
    classes: usize,
    shape: ImageShape,
    validation_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<ClassifierConfig>,
}

/// Anything that maps latent batches to image batches.
pub trait ImageSource {
    fn images(&self, latent: &LatentBatch) -> Result<Tensor<f32>, EvalError>;
}

impl ImageSource for Generator<f32> {
    fn images(&self, latent: &LatentBatch) -> Result<Tensor<f32>, EvalError> {
        Ok(self.generate(latent.encoded())?)
    }
}

/// Index of the code used as the class: `name` if given, else the first
/// supervised categorical code.
pub fn class_code(spec: &LatentSpec, name: Option<&str>) -> Result<usize, EvalError> {
    let index = match name {
        Some(n) => spec.find(n)?,
        None => spec
            .codes()
            .iter()
            .position(|c| c.supervised && matches!(c.kind, CodeKind::Categorical { .. }))
            .ok_or(EvalError::NoClassCode)?,
    };
    match spec.codes()[index].kind {
        CodeKind::Categorical { .. } => Ok(index),
        CodeKind::Continuous { .. } => Err(EvalError::NoClassCode),
    }
}

/// Outcome of one 0-1 evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ZeroOneRecord {
    pub epoch: usize,
    pub n: usize,
    /// Agreement between conditioning class and prediction.
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    /// Accuracy under the best one-to-one relabeling of code values, for
    /// codes without a canonical class alignment.
    pub matched_accuracy: f64,
    /// `confusion[code value][predicted class]`.
    pub confusion: Array2<usize>,
}

/// Generates `n` samples with the class code cycling `i mod K`, classifies
/// them and scores agreement. Other codes and the noise come from `rng`.
pub fn zero_one_loss<G: ImageSource + ?Sized, R: Rng + ?Sized>(
    generator: &G,
    classifier: &EvalClassifier,
    spec: &LatentSpec,
    class_index: usize,
    n: usize,
    epoch: usize,
    rng: &mut R,
) -> Result<ZeroOneRecord, EvalError> {
    if n == 0 {
        return Err(EvalError::NoSamples);
    }
    let code = &spec.codes()[class_index];
    let k = match code.kind {
        CodeKind::Categorical { cardinality } => cardinality,
        CodeKind::Continuous { .. } => return Err(EvalError::NoClassCode),
    };
    if k != classifier.classes {
        return Err(EvalError::ClassCount { code: code.name.clone(), expected: classifier.classes, got: k });
    }
    let mut confusion = Array2::<usize>::zeros((k, k));
    let chunk = 500;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let mut latent = sample_latent(spec, end - start, rng)?;
        let classes: Vec<usize> = (start..end).map(|i| i % k).collect();
        latent.set_code(spec, class_index, CodeValues::Categorical(classes.clone()))?;
        let pred = classifier.predict(&generator.images(&latent)?);
        for (c, p) in classes.into_iter().zip(pred) {
            confusion[[c, p]] += 1;
        }
        start = end;
    }
    let diag: usize = (0..k).map(|i| confusion[[i, i]]).sum();
    let per_class = (0..k)
        .map(|i| {
            let row: usize = confusion.row(i).sum();
            if row == 0 { 0.0 } else { confusion[[i, i]] as f64 / row as f64 }
        })
        .collect();
    let weights = Matrix::from_vec(k, k, confusion.iter().map(|&v| v as i64).collect()).expect("square matrix");
    let (matched, _) = kuhn_munkres(&weights);
    Ok(ZeroOneRecord {
        epoch,
        n,
        accuracy: diag as f64 / n as f64,
        per_class,
        matched_accuracy: matched as f64 / n as f64,
        confusion,
    })
}

/// Grid layout for [`render_traversal_grid`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
    /// Gap between cells in pixels.
    pub separator: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { lo: -2.0, hi: 2.0, steps: 10, separator: 2 }
    }
}

/// Rendered grid before PNG encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
    /// Traversed code value per column (class index for categorical codes).
    pub column_values: Vec<f64>,
}

impl Grid {
    pub fn to_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let color = if self.channels == 1 { ExtendedColorType::L8 } else { ExtendedColorType::Rgb8 };
        PngEncoder::new(&mut out)
            .write_image(&self.pixels, self.width as u32, self.height as u32, color)
            .expect("in-memory PNG encoding");
        out
    }
}

/// One row per class of `row_code`, one column per traversal step of
/// `code_name`, with the noise and all other codes fixed to a single base
/// draw. When the traversed code is the row code itself, each row instead
/// uses a fresh noise draw.
pub fn render_traversal_grid<G: ImageSource + ?Sized, R: Rng + ?Sized>(
    generator: &G,
    spec: &LatentSpec,
    shape: ImageShape,
    code_name: &str,
    row_code: usize,
    layout: GridSpec,
    rng: &mut R,
) -> Result<Grid, EvalError> {
    let target = spec.find(code_name)?;
    let rows = match spec.codes()[row_code].kind {
        CodeKind::Categorical { cardinality } => cardinality,
        CodeKind::Continuous { .. } => return Err(EvalError::NoClassCode),
    };
    let base = sample_latent(spec, 1, rng)?;
    let mut cells: Vec<Tensor<f32>> = Vec::with_capacity(rows);
    let mut column_values = Vec::new();
    for r in 0..rows {
        let mut row_base = if target == row_code { sample_latent(spec, 1, rng)? } else { base.clone() };
        if target != row_code {
            row_base.set_code(spec, row_code, CodeValues::Categorical(vec![r]))?;
        }
        let batch = traverse(spec, &row_base, code_name, layout.lo, layout.hi, layout.steps)?;
        column_values = match batch.code(target) {
            CodeValues::Categorical(v) => v.iter().map(|&c| c as f64).collect(),
            CodeValues::Continuous(v) => v.clone(),
        };
        cells.push(generator.images(&batch)?);
    }
    let cols = column_values.len();
    let (h, w, c, sep) = (shape.height, shape.width, shape.channels, layout.separator);
    let width = cols * w + (cols - 1) * sep;
    let height = rows * h + (rows - 1) * sep;
    let mut pixels = vec![128u8; width * height * c];
    for (r, row) in cells.iter().enumerate() {
        for col in 0..cols {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = row[[col, ch, y, x]];
                        let px = (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8;
                        let gy = r * (h + sep) + y;
                        let gx = col * (w + sep) + x;
                        pixels[(gy * width + gx) * c + ch] = px;
                    }
                }
            }
        }
    }
    Ok(Grid { width, height, channels: c, pixels, column_values })
}
