//! Image datasets with partial labels: IDX and PNG-directory ingestion, exact
//! label-budget masking, annealed labeled-batch drawing and instance noise.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use infogan_nn::{Scalar, Tensor};
use ndarray::{Array2, IxDyn};
use rand::seq::index;
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::ImageShape;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    Magic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated, expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("labeled fraction {0} outside [0, 1]")]
    Fraction(f64),
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("labeled draws requested but the dataset has no labeled samples")]
    NoLabeled,
    #[error("dataset is only partially labeled")]
    NotFullyLabeled,
    #[error("batch size must be at least 1 and at most the dataset size")]
    BatchSize,
    #[error("anneal schedule requires r <= p0 <= 1 and a finite non-negative duration")]
    Schedule,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_owned(), source }
}

/// Which split of the source data a dataset came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images in `[-1, 1]` with per-sample label rows and a mask selecting which
/// labels the learner may see.
#[derive(Clone, Debug)]
pub struct SemiSupervisedDataset {
    shape: ImageShape,
    split: Split,
    pixels: Vec<f32>,
    labels: Array2<f64>,
    mask: Vec<bool>,
    labeled: Vec<usize>,
}

impl SemiSupervisedDataset {
    /// Fully labeled dataset from flat pixels in `[-1, 1]` and an `[N, L]`
    /// label table.
    pub fn new(shape: ImageShape, split: Split, pixels: Vec<f32>, labels: Array2<f64>) -> Result<Self, DataError> {
        let n = labels.nrows();
        if pixels.len() != n * shape.pixels() {
            return Err(DataError::CountMismatch { images: pixels.len() / shape.pixels().max(1), labels: n });
        }
        Ok(Self { shape, split, pixels, labels, mask: vec![true; n], labeled: (0..n).collect() })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn labeled_indices(&self) -> &[usize] {
        &self.labeled
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled.len()
    }

    /// Labeled ratio `r`.
    pub fn ratio(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.labeled.len() as f64 / self.len() as f64
        }
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.labeled.len() == self.len()
    }

    /// The full label table, ignoring the mask.
    pub fn all_labels(&self) -> &Array2<f64> {
        &self.labels
    }

    /// The label row of sample `i` if it is visible.
    pub fn label(&self, i: usize) -> Option<Vec<f64>> {
        self.mask[i].then(|| self.labels.row(i).to_vec())
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.shape.pixels();
        &self.pixels[i * p..(i + 1) * p]
    }

    /// `[len(indices), C, H, W]` batch of the selected images.
    pub fn images<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let p = self.shape.pixels();
        let mut data = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::from_f32(v).expect("finite pixel")));
        }
        let [c, h, w] = self.shape.dims();
        Tensor::from_shape_vec(IxDyn(&[indices.len(), c, h, w]), data).expect("pixel count")
    }

    /// Keeps the labels of exactly `labeled_count(N, fraction)` samples,
    /// chosen uniformly without replacement.
    pub fn mask_labels<R: Rng + ?Sized>(&self, fraction: f64, rng: &mut R) -> Result<Self, DataError> {
        if !self.is_fully_labeled() {
            return Err(DataError::NotFullyLabeled);
        }
        let keep = labeled_count(self.len(), fraction)?;
        let mut labeled = index::sample(rng, self.len(), keep).into_vec();
        labeled.sort_unstable();
        let mut mask = vec![false; self.len()];
        labeled.iter().for_each(|&i| mask[i] = true);
        Ok(Self { mask, labeled, ..self.clone() })
    }

    /// First `n` samples, for quick experiments.
    pub fn truncate(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let p = self.shape.pixels();
        let mask = self.mask[..n].to_vec();
        Self {
            shape: self.shape,
            split: self.split,
            pixels: self.pixels[..n * p].to_vec(),
            labels: self.labels.slice(ndarray::s![..n, ..]).to_owned(),
            labeled: (0..n).filter(|&i| mask[i]).collect(),
            mask,
        }
    }

    /// Copy with labels replaced, for sanity checks with permuted labels.
    pub fn with_labels(&self, labels: Array2<f64>) -> Result<Self, DataError> {
        if labels.nrows() != self.len() {
            return Err(DataError::CountMismatch { images: self.len(), labels: labels.nrows() });
        }
        Ok(Self { labels, ..self.clone() })
    }
}

/// `floor(fraction · N)`. A tolerance of `1e-9` absorbs representation error
/// in the product, so that `0.0022 · 60000` counts as 132.
pub fn labeled_count(n: usize, fraction: f64) -> Result<usize, DataError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(DataError::Fraction(fraction));
    }
    Ok(((fraction * n as f64 + 1e-9).floor() as usize).min(n))
}

fn read_be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn read_idx(path: &Path, magic: u32, header: usize) -> Result<(Vec<u8>, Vec<usize>), DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < header {
        return Err(DataError::Truncated { path: path.to_owned(), expected: header, found: bytes.len() });
    }
    let found = read_be_u32(&bytes, 0);
    if found != magic {
        return Err(DataError::Magic { path: path.to_owned(), found, expected: magic });
    }
    let dims: Vec<usize> = (1..header / 4).map(|k| read_be_u32(&bytes, 4 * k) as usize).collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(DataError::Truncated { path: path.to_owned(), expected, found: bytes.len() });
    }
    Ok((bytes[header..expected].to_vec(), dims))
}

/// Reads an IDX image/label file pair (MNIST layout), rescaling pixels from
/// `[0, 255]` to `[-1, 1]`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<SemiSupervisedDataset, DataError> {
    let (pixels, dims) = read_idx(images_path, 0x0000_0803, 16)?;
    let (labels, ldims) = read_idx(labels_path, 0x0000_0801, 8)?;
    if dims[0] != ldims[0] {
        return Err(DataError::CountMismatch { images: dims[0], labels: ldims[0] });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(DataError::Format { path: labels_path.to_owned(), reason: format!("label {bad} outside [0, 9]") });
    }
    let shape = ImageShape { channels: 1, height: dims[1], width: dims[2] };
    let pixels = pixels.into_iter().map(|v| f32::from(v) / 127.5 - 1.0).collect();
    let labels = Array2::from_shape_vec((ldims[0], 1), labels.into_iter().map(f64::from).collect())
        .expect("one label per sample");
    SemiSupervisedDataset::new(shape, split, pixels, labels)
}

/// Standard MNIST file names inside `dir`.
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<SemiSupervisedDataset, DataError> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    load_mnist_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
        split,
    )
}

/// Reads a directory of PNG images listed in a CSV file with a `filename`
/// column followed by one or more numeric label columns.
pub fn load_png_dir(
    dir: &Path,
    labels_csv: &Path,
    shape: ImageShape,
    split: Split,
) -> Result<SemiSupervisedDataset, DataError> {
    let format = |reason: String| DataError::Format { path: labels_csv.to_owned(), reason };
    let mut reader = csv::Reader::from_path(labels_csv)
        .map_err(|e| format(e.to_string()))?;
    let headers = reader.headers().map_err(|e| format(e.to_string()))?.clone();
    if headers.get(0) != Some("filename") || headers.len() < 2 {
        return Err(format("expected header `filename,label[,...]`".into()));
    }
    let width = headers.len() - 1;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| format(e.to_string()))?;
        let path = dir.join(&record[0]);
        for field in record.iter().skip(1) {
            labels.push(field.trim().parse::<f64>().map_err(|_| format(format!("bad label `{field}`")))?);
        }
        let img = image::open(&path)
            .map_err(|e| DataError::Format { path: path.clone(), reason: e.to_string() })?;
        if img.width() as usize != shape.width || img.height() as usize != shape.height {
            return Err(DataError::Format {
                path,
                reason: format!("size {}x{}, expected {}x{}", img.width(), img.height(), shape.width, shape.height),
            });
        }
        let channel_major: Vec<u8> = match shape.channels {
            1 => img.to_luma8().into_raw(),
            3 => {
                let rgb = img.to_rgb8();
                let hw = shape.height * shape.width;
                let raw = rgb.as_raw();
                (0..3).flat_map(|c| (0..hw).map(move |p| raw[3 * p + c])).collect()
            }
            c => return Err(DataError::Format { path, reason: format!("unsupported channel count {c}") }),
        };
        pixels.extend(channel_major.into_iter().map(|v| f32::from(v) / 127.5 - 1.0));
        rows += 1;
    }
    let labels = Array2::from_shape_vec((rows, width), labels).expect("rectangular labels");
    SemiSupervisedDataset::new(shape, split, pixels, labels)
}

/// Linear decay of the labeled-draw probability from `p0` to the true ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSchedule {
    pub p0: f64,
    /// Epochs until the true ratio is reached.
    pub duration: f64,
    pub r: f64,
}

impl AnnealSchedule {
    pub fn new(p0: f64, duration: f64, r: f64) -> Result<Self, DataError> {
        let s = Self { p0, duration, r };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let ok = (0.0..=1.0).contains(&self.r)
            && self.r <= self.p0
            && self.p0 <= 1.0
            && self.duration.is_finite()
            && self.duration >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(DataError::Schedule)
        }
    }

    /// `p(t) = p0 + (r − p0) · min(t / T, 1)`.
    pub fn probability(&self, epoch: usize) -> f64 {
        if epoch as f64 >= self.duration {
            return self.r;
        }
        self.p0 + (self.r - self.p0) * (epoch as f64 / self.duration)
    }
}

/// Convenience wrapper for [`AnnealSchedule::probability`].
pub fn labeled_draw_probability(epoch: usize, schedule: &AnnealSchedule) -> f64 {
    schedule.probability(epoch)
}

/// Sample indices of one batch, the visible labels and whether the batch was
/// drawn from the labeled pool.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub labels: Vec<Option<Vec<f64>>>,
    pub labeled: bool,
}

/// With probability `p_labeled` draws from the labeled pool (with replacement
/// when the pool is smaller than the batch), otherwise uniformly without
/// replacement from all samples.
pub fn draw_batch<R: Rng + ?Sized>(
    dataset: &SemiSupervisedDataset,
    batch_size: usize,
    p_labeled: f64,
    rng: &mut R,
) -> Result<Batch, DataError> {
    if !(0.0..=1.0).contains(&p_labeled) {
        return Err(DataError::Probability(p_labeled));
    }
    if batch_size == 0 || batch_size > dataset.len() {
        return Err(DataError::BatchSize);
    }
    let pool = dataset.labeled_indices();
    if p_labeled > 0.0 && pool.is_empty() {
        return Err(DataError::NoLabeled);
    }
    let labeled = rng.random::<f64>() < p_labeled;
    let indices: Vec<usize> = if labeled {
        if pool.len() < batch_size {
            (0..batch_size).map(|_| pool[rng.random_range(0..pool.len())]).collect()
        } else {
            index::sample(rng, pool.len(), batch_size).into_iter().map(|k| pool[k]).collect()
        }
    } else {
        index::sample(rng, dataset.len(), batch_size).into_vec()
    };
    let labels = indices.iter().map(|&i| dataset.label(i)).collect();
    Ok(Batch { indices, labels, labeled })
}

/// Instance-noise settings: `σ(t) = σ₀ · max(0, 1 − t / T)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstanceNoise {
    pub enabled: bool,
    pub sigma0: f64,
    pub duration: f64,
}

impl Default for InstanceNoise {
    fn default() -> Self {
        Self { enabled: false, sigma0: 0.1, duration: 50.0 }
    }
}

impl InstanceNoise {
    pub fn sigma(&self, epoch: usize) -> f64 {
        if !self.enabled || self.duration <= 0.0 {
            return 0.0;
        }
        self.sigma0 * (1.0 - epoch as f64 / self.duration).max(0.0)
    }
}

/// Adds i.i.d. `N(0, σ²)` noise; the identity (no draws) when `σ = 0`.
pub fn instance_noise<T: Scalar, R: Rng + ?Sized>(images: &Tensor<T>, sigma: f64, rng: &mut R) -> Tensor<T> {
    if sigma <= 0.0 {
        return images.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    images.mapv(|v| v + T::from_f64_lossy(rng.sample(normal)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn synthetic(n: usize) -> SemiSupervisedDataset {
        let shape = ImageShape { channels: 1, height: 4, width: 4 };
        let pixels = (0..n * 16).map(|i| (i % 7) as f32 / 3.0 - 1.0).collect();
        let labels = Array2::from_shape_fn((n, 1), |(i, _)| (i % 10) as f64);
        SemiSupervisedDataset::new(shape, Split::Train, pixels, labels).unwrap()
    }

    fn write_idx(path: &Path, magic: u32, dims: &[u32], payload: &[u8]) {
        let mut f = fs::File::create(path).unwrap();
        f.write_all(&magic.to_be_bytes()).unwrap();
        for d in dims {
            f.write_all(&d.to_be_bytes()).unwrap();
        }
        f.write_all(payload).unwrap();
    }

    #[test]
    fn idx_round_trip_and_rescaling() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = (dir.path().join("i"), dir.path().join("l"));
        let mut pixels = vec![0u8; 2 * 4];
        pixels[1] = 255;
        write_idx(&img, 0x803, &[2, 2, 2], &pixels);
        write_idx(&lab, 0x801, &[2], &[7, 3]);
        let ds = load_mnist_idx(&img, &lab, Split::Test).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.shape(), ImageShape { channels: 1, height: 2, width: 2 });
        assert_eq!(ds.image(0), &[-1.0, 1.0, -1.0, -1.0]);
        assert_eq!(ds.label(0), Some(vec![7.0]));
        assert_eq!(ds.images::<f32>(&[1, 0]).shape(), &[2, 1, 2, 2]);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&img, 0x803, &[2, 2, 2], &[0; 8]);
        write_idx(&lab, 0x803, &[2], &[1, 2]);
        assert!(matches!(load_mnist_idx(&img, &lab, Split::Train), Err(DataError::Magic { .. })));
        write_idx(&lab, 0x801, &[3], &[1, 2, 3]);
        assert!(matches!(load_mnist_idx(&img, &lab, Split::Train), Err(DataError::CountMismatch { .. })));
        write_idx(&img, 0x803, &[2, 2, 2], &[0; 5]);
        assert!(matches!(load_mnist_idx(&img, &lab, Split::Train), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn png_directory_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let shape = ImageShape { channels: 3, height: 4, width: 4 };
        let mut csv = String::from("filename,label\n");
        for k in 0..3u8 {
            let img = image::RgbImage::from_fn(4, 4, |x, _| image::Rgb([k * 100, x as u8 * 60, 255]));
            img.save(dir.path().join(format!("{k}.png"))).unwrap();
            csv.push_str(&format!("{k}.png,{k}\n"));
        }
        fs::write(dir.path().join("labels.csv"), csv).unwrap();
        let ds = load_png_dir(dir.path(), &dir.path().join("labels.csv"), shape, Split::Train).unwrap();
        assert_eq!(ds.len(), 3);
        let px = ds.image(2);
        assert_eq!(px[0], 200.0 / 127.5 - 1.0);
        assert_eq!(px[16 + 1], 60.0 / 127.5 - 1.0);
        assert_eq!(px[32], 1.0);
        assert_eq!(ds.label(1), Some(vec![1.0]));
    }

    #[test]
    fn label_budgets_follow_floor_rule() {
        assert_eq!(labeled_count(60_000, 0.0022).unwrap(), 132);
        assert_eq!(labeled_count(50_000, 0.10).unwrap(), 5000);
        assert_eq!(labeled_count(73_257, 0.10).unwrap(), 7325);
        assert_eq!(labeled_count(151_162, 0.01).unwrap(), 1511);
        assert_eq!(labeled_count(10, 0.0).unwrap(), 0);
        assert_eq!(labeled_count(10, 1.0).unwrap(), 10);
        assert!(matches!(labeled_count(10, 1.5), Err(DataError::Fraction(_))));
    }

    #[test]
    fn anneal_examples() {
        let s = AnnealSchedule::new(1.0, 10.0, 0.1).unwrap();
        assert_eq!(s.probability(0), 1.0);
        assert!((s.probability(5) - 0.55).abs() < 1e-15);
        assert_eq!(s.probability(10), 0.1);
        assert_eq!(s.probability(50), 0.1);
        assert!(AnnealSchedule::new(0.05, 10.0, 0.1).is_err());
    }

    #[test]
    fn full_probability_draws_only_labels() {
        let ds = synthetic(1000).mask_labels(0.132, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(ds.labeled_count(), 132);
        let b = draw_batch(&ds, 64, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(b.labeled && b.labels.iter().all(Option::is_some));
        let b = draw_batch(&ds, 64, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(!b.labeled);
        let none = synthetic(100).mask_labels(0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(draw_batch(&none, 8, 0.5, &mut ChaCha8Rng::seed_from_u64(0)), Err(DataError::NoLabeled)));
    }

    #[test]
    fn small_pool_is_sampled_with_replacement() {
        let ds = synthetic(1000).mask_labels(0.005, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = draw_batch(&ds, 64, 1.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(b.indices.len(), 64);
        assert!(b.indices.iter().all(|i| ds.mask()[*i]));
    }

    #[test]
    fn labeled_batch_frequency_concentrates() {
        // Binomial(10⁴, 0.55): sd ≈ 0.005, so ±0.02 is four standard deviations.
        let ds = synthetic(200).mask_labels(0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hits = (0..10_000).filter(|_| draw_batch(&ds, 4, 0.55, &mut rng).unwrap().labeled).count();
        let f = hits as f64 / 10_000.0;
        assert!((0.53..=0.57).contains(&f), "{f}");
    }

    #[test]
    fn instance_noise_examples() {
        let x = Tensor::<f64>::zeros(IxDyn(&[1_000_000]));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(instance_noise(&x, 0.0, &mut rng), x);
        let cfg = InstanceNoise { enabled: true, sigma0: 0.1, duration: 50.0 };
        assert_eq!(cfg.sigma(50), 0.0);
        assert_eq!(cfg.sigma(0), 0.1);
        assert_eq!(InstanceNoise { enabled: false, ..cfg }.sigma(0), 0.0);
        let y = instance_noise(&x, 0.1, &mut rng);
        let n = y.len() as f64;
        let mean = y.sum() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((0.0095..=0.0105).contains(&var), "{var}");
    }

    proptest! {
        #[test]
        fn masking_is_exact_and_seeded(n in 1usize..500, f in 0.0f64..=1.0, seed in any::<u64>()) {
            let ds = synthetic(n);
            let a = ds.mask_labels(f, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = ds.mask_labels(f, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(a.mask(), b.mask());
            prop_assert_eq!(a.mask().iter().filter(|m| **m).count(), labeled_count(n, f).unwrap());
            prop_assert!(a.labeled_indices().iter().all(|&i| a.label(i).is_some()));
        }

        #[test]
        fn anneal_is_monotone_and_clamped(p0 in 0.0f64..=1.0, r_frac in 0.0f64..=1.0, t in 0.0f64..30.0) {
            let s = AnnealSchedule::new(p0, t, p0 * r_frac).unwrap();
            let mut prev = s.probability(0);
            prop_assert_eq!(prev, if t > 0.0 { p0 } else { s.r });
            for e in 1..40 {
                let p = s.probability(e);
                prop_assert!(p <= prev + 1e-15 && p >= s.r - 1e-15 && p <= p0 + 1e-15);
                prev = p;
            }
        }
    }
}
