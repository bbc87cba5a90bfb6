//! Latent space of the generator: incompressible noise `z` plus named codes,
//! each either bound to labels (semi-supervised) or left free (unsupervised).
//!
//! Categorical codes enter the generator one-hot encoded; continuous codes
//! enter as raw scalars. The encoded row layout is `[noise | code_0 | code_1 | …]`
//! in declaration order.

use std::collections::HashSet;

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LatentError {
    #[error("code `{0}`: categorical cardinality must be at least 2")]
    Cardinality(String),
    #[error("code `{name}`: continuous range requires lo < hi (got [{lo}, {hi}])")]
    Range { name: String, lo: f64, hi: f64 },
    #[error("duplicate code name `{0}`")]
    DuplicateName(String),
    #[error("noise dimension must be positive")]
    NoiseDim,
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error("unknown code `{0}`")]
    UnknownCode(String),
    #[error("sample {sample}: label {value} is not valid for code `{code}`")]
    LabelOutOfRange { sample: usize, code: String, value: f64 },
    #[error("sample {sample}: expected {expected} label values, got {got}")]
    LabelArity { sample: usize, expected: usize, got: usize },
    #[error("traversal needs at least 2 steps")]
    Steps,
    #[error("code `{code}`: {reason}")]
    BadValues { code: String, reason: String },
}

/// Value domain of one latent code.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CodeKind {
    Categorical { cardinality: usize },
    Continuous { lo: f64, hi: f64 },
}

impl CodeKind {
    /// Number of generator-input columns the code occupies.
    pub fn width(&self) -> usize {
        match *self {
            CodeKind::Categorical { cardinality } => cardinality,
            CodeKind::Continuous { .. } => 1,
        }
    }
}

/// One named latent code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCodeSpec", into = "RawCodeSpec")]
pub struct CodeSpec {
    pub name: String,
    pub kind: CodeKind,
    /// Member of `c_ss` (bound to labels) rather than `c_us`.
    pub supervised: bool,
}

impl CodeSpec {
    pub fn categorical(name: &str, cardinality: usize, supervised: bool) -> Self {
        Self { name: name.to_owned(), kind: CodeKind::Categorical { cardinality }, supervised }
    }

    pub fn continuous(name: &str, lo: f64, hi: f64, supervised: bool) -> Self {
        Self { name: name.to_owned(), kind: CodeKind::Continuous { lo, hi }, supervised }
    }

    pub fn validate(&self) -> Result<(), LatentError> {
        match self.kind {
            CodeKind::Categorical { cardinality } if cardinality < 2 => {
                Err(LatentError::Cardinality(self.name.clone()))
            }
            CodeKind::Continuous { lo, hi } if !(lo < hi) => {
                Err(LatentError::Range { name: self.name.clone(), lo, hi })
            }
            _ => Ok(()),
        }
    }

    /// Whether `value` is a legal label for this code.
    pub fn accepts_label(&self, value: f64) -> bool {
        match self.kind {
            CodeKind::Categorical { cardinality } => {
                value.fract() == 0.0 && value >= 0.0 && value < cardinality as f64
            }
            CodeKind::Continuous { lo, hi } => value >= lo && value <= hi,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum KindTag {
    Categorical,
    Continuous,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCodeSpec {
    name: String,
    kind: KindTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cardinality: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hi: Option<f64>,
    #[serde(default)]
    supervised: bool,
}

impl TryFrom<RawCodeSpec> for CodeSpec {
    type Error = String;

    fn try_from(raw: RawCodeSpec) -> Result<Self, String> {
        let kind = match raw.kind {
            KindTag::Categorical => {
                if raw.lo.is_some() || raw.hi.is_some() {
                    return Err(format!("code `{}`: categorical codes take no lo/hi", raw.name));
                }
                let cardinality = raw
                    .cardinality
                    .ok_or_else(|| format!("code `{}`: missing `cardinality`", raw.name))?;
                CodeKind::Categorical { cardinality }
            }
            KindTag::Continuous => {
                if raw.cardinality.is_some() {
                    return Err(format!("code `{}`: continuous codes take no cardinality", raw.name));
                }
                CodeKind::Continuous { lo: raw.lo.unwrap_or(-1.0), hi: raw.hi.unwrap_or(1.0) }
            }
        };
        let spec = CodeSpec { name: raw.name, kind, supervised: raw.supervised };
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

impl From<CodeSpec> for RawCodeSpec {
    fn from(spec: CodeSpec) -> Self {
        let (kind, cardinality, lo, hi) = match spec.kind {
            CodeKind::Categorical { cardinality } => (KindTag::Categorical, Some(cardinality), None, None),
            CodeKind::Continuous { lo, hi } => (KindTag::Continuous, None, Some(lo), Some(hi)),
        };
        RawCodeSpec { name: spec.name, kind, cardinality, lo, hi, supervised: spec.supervised }
    }
}

/// Declarative description of the generator input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLatentSpec", into = "RawLatentSpec")]
pub struct LatentSpec {
    noise_dim: usize,
    codes: Vec<CodeSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLatentSpec {
    noise_dim: usize,
    #[serde(default)]
    codes: Vec<CodeSpec>,
}

impl TryFrom<RawLatentSpec> for LatentSpec {
    type Error = LatentError;

    fn try_from(raw: RawLatentSpec) -> Result<Self, LatentError> {
        LatentSpec::new(raw.noise_dim, raw.codes)
    }
}

impl From<LatentSpec> for RawLatentSpec {
    fn from(spec: LatentSpec) -> Self {
        RawLatentSpec { noise_dim: spec.noise_dim, codes: spec.codes }
    }
}

impl LatentSpec {
    pub fn new(noise_dim: usize, codes: Vec<CodeSpec>) -> Result<Self, LatentError> {
        if noise_dim == 0 {
            return Err(LatentError::NoiseDim);
        }
        let mut seen = HashSet::new();
        for code in &codes {
            code.validate()?;
            if !seen.insert(code.name.as_str()) {
                return Err(LatentError::DuplicateName(code.name.clone()));
            }
        }
        Ok(Self { noise_dim, codes })
    }

    /// The MNIST layout: one supervised 10-way digit code and two free
    /// continuous codes on `[-1, 1]`, with 62-dimensional noise.
    pub fn mnist_default() -> Self {
        Self::new(
            62,
            vec![
                CodeSpec::categorical("digit", 10, true),
                CodeSpec::continuous("c1", -1.0, 1.0, false),
                CodeSpec::continuous("c2", -1.0, 1.0, false),
            ],
        )
        .expect("valid default spec")
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn codes(&self) -> &[CodeSpec] {
        &self.codes
    }

    /// Total width of all code blocks.
    pub fn code_dim(&self) -> usize {
        self.codes.iter().map(|c| c.kind.width()).sum()
    }

    /// Width of the encoded generator input.
    pub fn input_width(&self) -> usize {
        self.noise_dim + self.code_dim()
    }

    /// Column offset of code `index` inside an encoded row.
    pub fn code_offset(&self, index: usize) -> usize {
        self.noise_dim + self.codes[..index].iter().map(|c| c.kind.width()).sum::<usize>()
    }

    pub fn find(&self, name: &str) -> Result<usize, LatentError> {
        self.codes
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| LatentError::UnknownCode(name.to_owned()))
    }

    pub fn supervised_indices(&self) -> Vec<usize> {
        (0..self.codes.len()).filter(|&i| self.codes[i].supervised).collect()
    }

    pub fn unsupervised_indices(&self) -> Vec<usize> {
        (0..self.codes.len()).filter(|&i| !self.codes[i].supervised).collect()
    }

    pub fn has_supervised(&self) -> bool {
        self.codes.iter().any(|c| c.supervised)
    }

    /// Same codes with every supervised code turned into an unsupervised one.
    pub fn all_unsupervised(&self) -> Self {
        let codes = self
            .codes
            .iter()
            .map(|c| CodeSpec { supervised: false, ..c.clone() })
            .collect();
        Self { noise_dim: self.noise_dim, codes }
    }
}

/// Sampled values of one code across a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum CodeValues {
    Categorical(Vec<usize>),
    Continuous(Vec<f64>),
}

impl CodeValues {
    pub fn len(&self) -> usize {
        match self {
            CodeValues::Categorical(v) => v.len(),
            CodeValues::Continuous(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, spec: &CodeSpec, batch: usize) -> Result<(), LatentError> {
        let bad = |reason: String| Err(LatentError::BadValues { code: spec.name.clone(), reason });
        if self.len() != batch {
            return bad(format!("expected {batch} values, got {}", self.len()));
        }
        match (self, spec.kind) {
            (CodeValues::Categorical(v), CodeKind::Categorical { cardinality }) => {
                if let Some(x) = v.iter().find(|&&x| x >= cardinality) {
                    return bad(format!("class {x} outside [0, {cardinality})"));
                }
            }
            (CodeValues::Continuous(v), CodeKind::Continuous { lo, hi }) => {
                if let Some(x) = v.iter().find(|x| !x.is_finite()) {
                    return bad(format!("non-finite value {x}"));
                }
                let _ = (lo, hi);
            }
            _ => return bad("value type does not match code kind".into()),
        }
        Ok(())
    }

    fn select(&self, rows: &[usize]) -> CodeValues {
        match self {
            CodeValues::Categorical(v) => CodeValues::Categorical(rows.iter().map(|&r| v[r]).collect()),
            CodeValues::Continuous(v) => CodeValues::Continuous(rows.iter().map(|&r| v[r]).collect()),
        }
    }
}

/// Sampled noise and codes for a batch, with the encoded generator input.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    noise: Array2<f64>,
    codes: Vec<CodeValues>,
    encoded: Array2<f64>,
}

impl LatentBatch {
    /// Assembles a batch from explicit parts. Continuous values are only
    /// required to be finite here, because traversals deliberately leave the
    /// sampling range.
    pub fn from_parts(
        spec: &LatentSpec,
        noise: Array2<f64>,
        codes: Vec<CodeValues>,
    ) -> Result<Self, LatentError> {
        let batch = noise.nrows();
        if batch == 0 {
            return Err(LatentError::EmptyBatch);
        }
        if noise.ncols() != spec.noise_dim || codes.len() != spec.codes.len() {
            return Err(LatentError::BadValues {
                code: "<noise>".into(),
                reason: "noise width or code count does not match the spec".into(),
            });
        }
        for (values, code) in codes.iter().zip(&spec.codes) {
            values.check(code, batch)?;
        }
        let encoded = encode(spec, &noise, &codes);
        Ok(Self { noise, codes, encoded })
    }

    pub fn batch_size(&self) -> usize {
        self.noise.nrows()
    }

    pub fn noise(&self) -> &Array2<f64> {
        &self.noise
    }

    pub fn codes(&self) -> &[CodeValues] {
        &self.codes
    }

    pub fn code(&self, index: usize) -> &CodeValues {
        &self.codes[index]
    }

    /// `[batch, noise_dim + code_dim]` generator input.
    pub fn encoded(&self) -> &Array2<f64> {
        &self.encoded
    }

    /// Replaces the values of code `index` and re-encodes.
    pub fn set_code(&mut self, spec: &LatentSpec, index: usize, values: CodeValues) -> Result<(), LatentError> {
        values.check(&spec.codes[index], self.batch_size())?;
        self.codes[index] = values;
        self.encoded = encode(spec, &self.noise, &self.codes);
        Ok(())
    }

    /// Overwrites the supervised codes with label-derived assignments.
    pub fn substitute(&mut self, spec: &LatentSpec, assignment: &SupervisedCodes) -> Result<(), LatentError> {
        for (&index, values) in assignment.indices.iter().zip(&assignment.values) {
            values.check(&spec.codes[index], self.batch_size())?;
            self.codes[index] = values.clone();
        }
        self.encoded = encode(spec, &self.noise, &self.codes);
        Ok(())
    }

    /// Sub-batch of the given rows.
    pub fn rows(&self, rows: &[usize]) -> LatentBatch {
        let noise = self.noise.select(ndarray::Axis(0), rows);
        let encoded = self.encoded.select(ndarray::Axis(0), rows);
        let codes = self.codes.iter().map(|c| c.select(rows)).collect();
        LatentBatch { noise, codes, encoded }
    }
}

fn encode(spec: &LatentSpec, noise: &Array2<f64>, codes: &[CodeValues]) -> Array2<f64> {
    let batch = noise.nrows();
    let mut out = Array2::zeros((batch, spec.input_width()));
    out.slice_mut(s![.., ..spec.noise_dim]).assign(noise);
    for (index, values) in codes.iter().enumerate() {
        let offset = spec.code_offset(index);
        match values {
            CodeValues::Categorical(v) => {
                for (row, &class) in v.iter().enumerate() {
                    out[[row, offset + class]] = 1.0;
                }
            }
            CodeValues::Continuous(v) => {
                for (row, &x) in v.iter().enumerate() {
                    out[[row, offset]] = x;
                }
            }
        }
    }
    out
}

/// Draws `z ~ N(0, I)`, categorical codes uniformly over their classes and
/// continuous codes uniformly over `[lo, hi]`.
pub fn sample_latent<R: Rng + ?Sized>(
    spec: &LatentSpec,
    batch_size: usize,
    rng: &mut R,
) -> Result<LatentBatch, LatentError> {
    if batch_size == 0 {
        return Err(LatentError::EmptyBatch);
    }
    let noise = Array2::from_shape_simple_fn((batch_size, spec.noise_dim), || rng.sample(StandardNormal));
    let codes = spec
        .codes
        .iter()
        .map(|code| match code.kind {
            CodeKind::Categorical { cardinality } => {
                CodeValues::Categorical((0..batch_size).map(|_| rng.random_range(0..cardinality)).collect())
            }
            CodeKind::Continuous { lo, hi } => CodeValues::Continuous(
                (0..batch_size).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect(),
            ),
        })
        .collect();
    LatentBatch::from_parts(spec, noise, codes)
}

/// Label-derived values for the supervised codes of a spec.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedCodes {
    /// Code indices into the spec, in declaration order.
    pub indices: Vec<usize>,
    pub values: Vec<CodeValues>,
}

impl SupervisedCodes {
    pub fn batch_size(&self) -> usize {
        self.values.first().map_or(0, CodeValues::len)
    }

    pub fn values_for(&self, code_index: usize) -> Option<&CodeValues> {
        self.indices.iter().position(|&i| i == code_index).map(|p| &self.values[p])
    }
}

/// Interprets per-sample label rows as supervised code values (`y = c_ss`).
///
/// Each row holds one value per supervised code, in declaration order; class
/// labels are integral values.
pub fn labels_to_codes(labels: &[Vec<f64>], spec: &LatentSpec) -> Result<SupervisedCodes, LatentError> {
    let indices = spec.supervised_indices();
    let mut cat: Vec<Vec<usize>> = vec![Vec::with_capacity(labels.len()); indices.len()];
    let mut cont: Vec<Vec<f64>> = vec![Vec::with_capacity(labels.len()); indices.len()];
    for (sample, row) in labels.iter().enumerate() {
        if row.len() != indices.len() {
            return Err(LatentError::LabelArity { sample, expected: indices.len(), got: row.len() });
        }
        for (slot, (&code_index, &value)) in indices.iter().zip(row).enumerate() {
            let code = &spec.codes[code_index];
            if !code.accepts_label(value) {
                return Err(LatentError::LabelOutOfRange { sample, code: code.name.clone(), value });
            }
            match code.kind {
                CodeKind::Categorical { .. } => cat[slot].push(value as usize),
                CodeKind::Continuous { .. } => cont[slot].push(value),
            }
        }
    }
    let values = indices
        .iter()
        .enumerate()
        .map(|(slot, &code_index)| match spec.codes[code_index].kind {
            CodeKind::Categorical { .. } => CodeValues::Categorical(std::mem::take(&mut cat[slot])),
            CodeKind::Continuous { .. } => CodeValues::Continuous(std::mem::take(&mut cont[slot])),
        })
        .collect();
    Ok(SupervisedCodes { indices, values })
}

/// Argmax of each row of a one-hot (or logit) block.
pub fn decode_categorical(block: ndarray::ArrayView2<'_, f64>) -> Vec<usize> {
    block
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Varies one code of `base` (its first row) while holding everything else
/// fixed. Continuous codes sweep `lo..=hi` linearly in `steps` points;
/// categorical codes enumerate all classes and ignore the range.
pub fn traverse(
    spec: &LatentSpec,
    base: &LatentBatch,
    code_name: &str,
    lo: f64,
    hi: f64,
    steps: usize,
) -> Result<LatentBatch, LatentError> {
    let index = spec.find(code_name)?;
    let count = match spec.codes[index].kind {
        CodeKind::Categorical { cardinality } => cardinality,
        CodeKind::Continuous { .. } => {
            if steps < 2 {
                return Err(LatentError::Steps);
            }
            steps
        }
    };
    let mut out = base.rows(&vec![0; count]);
    let values = match spec.codes[index].kind {
        CodeKind::Categorical { .. } => CodeValues::Categorical((0..count).collect()),
        CodeKind::Continuous { .. } => CodeValues::Continuous(
            (0..count)
                .map(|i| if i + 1 == count { hi } else { lo + i as f64 * (hi - lo) / (count - 1) as f64 })
                .collect(),
        ),
    };
    out.set_code(spec, index, values)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> LatentSpec {
        LatentSpec::mnist_default()
    }

    #[test]
    fn encoded_width_and_one_hot_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = sample_latent(&spec(), 16, &mut rng).unwrap();
        assert_eq!(batch.encoded().dim(), (16, 74));
        let block = batch.encoded().slice(s![.., 62..72]);
        for row in block.rows() {
            assert_eq!(row.sum(), 1.0);
        }
    }

    #[test]
    fn continuous_samples_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_latent(&spec(), 2000, &mut rng).unwrap();
        for idx in [1, 2] {
            let CodeValues::Continuous(v) = batch.code(idx) else { panic!() };
            assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn categorical_frequencies_are_uniform() {
        // Hoeffding: P(|f - 0.1| > 0.01) <= 2 exp(-2 n 0.01²) ≈ 4e-9 at n = 1e5
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = sample_latent(&spec(), 100_000, &mut rng).unwrap();
        let CodeValues::Categorical(v) = batch.code(0) else { panic!() };
        let mut counts = [0usize; 10];
        v.iter().for_each(|&c| counts[c] += 1);
        for c in counts {
            let f = c as f64 / 100_000.0;
            assert!((0.09..=0.11).contains(&f), "frequency {f}");
        }
    }

    #[test]
    fn zero_batch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_latent(&spec(), 0, &mut rng), Err(LatentError::EmptyBatch));
    }

    #[test]
    fn spec_validation() {
        assert!(matches!(
            LatentSpec::new(4, vec![CodeSpec::categorical("a", 1, true)]),
            Err(LatentError::Cardinality(_))
        ));
        assert!(matches!(
            LatentSpec::new(4, vec![CodeSpec::continuous("a", 1.0, 1.0, false)]),
            Err(LatentError::Range { .. })
        ));
        assert!(matches!(
            LatentSpec::new(
                4,
                vec![CodeSpec::categorical("a", 3, true), CodeSpec::continuous("a", 0.0, 1.0, false)]
            ),
            Err(LatentError::DuplicateName(_))
        ));
        assert_eq!(LatentSpec::new(0, vec![]), Err(LatentError::NoiseDim));
    }

    #[test]
    fn digit_label_becomes_one_hot() {
        let spec = spec();
        let codes = labels_to_codes(&[vec![7.0]], &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut batch = sample_latent(&spec, 1, &mut rng).unwrap();
        batch.substitute(&spec, &codes).unwrap();
        let block = batch.encoded().slice(s![0, 62..72]).to_vec();
        let mut expected = vec![0.0; 10];
        expected[7] = 1.0;
        assert_eq!(block, expected);
    }

    #[test]
    fn binary_attribute_zero_maps_to_class_zero() {
        let spec = LatentSpec::new(4, vec![CodeSpec::categorical("smile", 2, true)]).unwrap();
        let codes = labels_to_codes(&[vec![0.0]], &spec).unwrap();
        assert_eq!(codes.values[0], CodeValues::Categorical(vec![0]));
    }

    #[test]
    fn out_of_range_label_names_the_sample() {
        let err = labels_to_codes(&[vec![3.0], vec![10.0]], &spec()).unwrap_err();
        assert_eq!(err, LatentError::LabelOutOfRange { sample: 1, code: "digit".into(), value: 10.0 });
    }

    #[test]
    fn continuous_traversal_values() {
        let spec = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = sample_latent(&spec, 1, &mut rng).unwrap();
        let rows = traverse(&spec, &base, "c1", -2.0, 2.0, 5).unwrap();
        assert_eq!(rows.code(1), &CodeValues::Continuous(vec![-2.0, -1.0, 0.0, 1.0, 2.0]));
        let ends = traverse(&spec, &base, "c1", -2.0, 2.0, 2).unwrap();
        assert_eq!(ends.code(1), &CodeValues::Continuous(vec![-2.0, 2.0]));
        for r in 0..5 {
            assert_eq!(rows.noise().row(r), base.noise().row(0));
        }
    }

    #[test]
    fn categorical_traversal_enumerates_classes() {
        let spec = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = sample_latent(&spec, 1, &mut rng).unwrap();
        let rows = traverse(&spec, &base, "digit", 0.0, 0.0, 0).unwrap();
        assert_eq!(rows.code(0), &CodeValues::Categorical((0..10).collect()));
    }

    #[test]
    fn traversal_errors() {
        let spec = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = sample_latent(&spec, 1, &mut rng).unwrap();
        assert_eq!(
            traverse(&spec, &base, "nope", -2.0, 2.0, 5),
            Err(LatentError::UnknownCode("nope".into()))
        );
        assert_eq!(traverse(&spec, &base, "c1", -2.0, 2.0, 1), Err(LatentError::Steps));
    }

    #[test]
    fn spec_toml_round_trip_and_strictness() {
        let text = r#"
            noise_dim = 62
            [[codes]]
            name = "digit"
            kind = "categorical"
            cardinality = 10
            supervised = true
            [[codes]]
            name = "c1"
            kind = "continuous"
            lo = -1.0
            hi = 1.0
        "#;
        let parsed: LatentSpec = toml::from_str(text).unwrap();
        assert_eq!(parsed.codes()[0], CodeSpec::categorical("digit", 10, true));
        let back: LatentSpec = toml::from_str(&toml::to_string(&parsed).unwrap()).unwrap();
        assert_eq!(back, parsed);
        let bad = text.replace("supervised = true", "supervised = true\nsupervisd = 1");
        assert!(toml::from_str::<LatentSpec>(&bad).is_err());
    }

    proptest! {
        #[test]
        fn labels_round_trip_through_one_hot(labels in proptest::collection::vec(0usize..10, 1..40)) {
            let spec = spec();
            let rows: Vec<Vec<f64>> = labels.iter().map(|&l| vec![l as f64]).collect();
            let codes = labels_to_codes(&rows, &spec).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut batch = sample_latent(&spec, labels.len(), &mut rng).unwrap();
            batch.substitute(&spec, &codes).unwrap();
            let decoded = decode_categorical(batch.encoded().slice(s![.., 62..72]));
            prop_assert_eq!(decoded, labels);
        }

        #[test]
        fn sampling_is_reproducible(seed in any::<u64>(), n in 1usize..32) {
            let a = sample_latent(&spec(), n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = sample_latent(&spec(), n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn traversal_changes_exactly_one_block(seed in any::<u64>(), steps in 2usize..12) {
            let spec = spec();
            let base = sample_latent(&spec, 1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let rows = traverse(&spec, &base, "c2", -2.0, 2.0, steps).unwrap();
            let (lo, hi) = (spec.code_offset(2), spec.code_offset(2) + 1);
            for r in 0..steps {
                for col in 0..spec.input_width() {
                    if col < lo || col >= hi {
                        prop_assert_eq!(rows.encoded()[[r, col]], base.encoded()[[0, col]]);
                    }
                }
            }
        }
    }
}
