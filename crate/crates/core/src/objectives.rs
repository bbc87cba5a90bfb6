//! Adversarial and mutual-information loss terms, each returning its value
//! together with the gradient with respect to the network outputs it reads,
//! plus the routing table that decides which parameter groups every term may
//! update.
//!
//! All mutual-information terms are the negated variational bounds with the
//! constant code entropy dropped, so minimizing them maximizes the bound.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latent::{labels_to_codes, CodeKind, CodeValues, LatentBatch, LatentError, LatentSpec};

/// Symmetric clamp applied to realness probabilities.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("expected {expected} prediction blocks, got {got}")]
    BlockCount { expected: usize, got: usize },
    #[error("code `{code}`: prediction block is {got:?}, expected {expected:?}")]
    BlockShape { code: String, expected: (usize, usize), got: (usize, usize) },
    #[error("code `{0}`: target kind does not match the code")]
    TargetKind(String),
    #[error("sample {0} carries no label")]
    Unlabeled(usize),
    #[error("loss weights must be finite and non-negative")]
    Weights,
    #[error(transparent)]
    Latent(#[from] LatentError),
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Value of a loss and its gradient with respect to one input vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Discriminator loss `−mean ln D(x) − mean ln(1 − D(G(z)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorLoss {
    pub value: f64,
    pub grad_real: Vec<f64>,
    pub grad_fake: Vec<f64>,
}

pub fn gan_d_loss(d_real: &[f64], d_fake: &[f64]) -> DiscriminatorLoss {
    let (nr, nf) = (d_real.len() as f64, d_fake.len() as f64);
    let mut value = 0.0;
    let grad_real = d_real
        .iter()
        .map(|&p| {
            let p = clamp_prob(p);
            value -= p.ln() / nr;
            -1.0 / (p * nr)
        })
        .collect();
    let grad_fake = d_fake
        .iter()
        .map(|&p| {
            let p = clamp_prob(p);
            value -= (1.0 - p).ln() / nf;
            1.0 / ((1.0 - p) * nf)
        })
        .collect();
    DiscriminatorLoss { value, grad_real, grad_fake }
}

/// Generator objective variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorLossMode {
    /// `mean ln(1 − D(G(z)))`, the literal minimax form.
    Minimax,
    /// `−mean ln D(G(z))`.
    #[default]
    NonSaturating,
}

pub fn gan_g_loss(d_fake: &[f64], mode: GeneratorLossMode) -> Scored {
    let n = d_fake.len() as f64;
    let mut value = 0.0;
    let grad = d_fake
        .iter()
        .map(|&p| {
            let p = clamp_prob(p);
            match mode {
                GeneratorLossMode::Minimax => {
                    value += (1.0 - p).ln() / n;
                    -1.0 / ((1.0 - p) * n)
                }
                GeneratorLossMode::NonSaturating => {
                    value -= p.ln() / n;
                    -1.0 / (p * n)
                }
            }
        })
        .collect();
    Scored { value, grad }
}

/// Value of a reconstruction loss with gradients per prediction block.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub value: f64,
    pub grads: Vec<Array2<f64>>,
}

/// Sum over the selected codes of softmax cross-entropy (categorical, logits
/// of width `K`) or mean squared error (continuous, width 1), each averaged
/// over the batch.
pub fn code_reconstruction_loss(
    spec: &LatentSpec,
    indices: &[usize],
    predictions: &[Array2<f64>],
    targets: &[&CodeValues],
) -> Result<Reconstruction, ObjectiveError> {
    if predictions.len() != indices.len() || targets.len() != indices.len() {
        return Err(ObjectiveError::BlockCount {
            expected: indices.len(),
            got: predictions.len().min(targets.len()),
        });
    }
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(indices.len());
    for ((&index, pred), target) in indices.iter().zip(predictions).zip(targets) {
        let code = &spec.codes()[index];
        let batch = target.len();
        let expected = (batch, code.kind.width());
        if pred.dim() != expected {
            return Err(ObjectiveError::BlockShape { code: code.name.clone(), expected, got: pred.dim() });
        }
        let n = batch as f64;
        let mut grad = Array2::zeros(pred.raw_dim());
        match (code.kind, target) {
            (CodeKind::Categorical { .. }, CodeValues::Categorical(classes)) => {
                for (row, &class) in classes.iter().enumerate() {
                    let logits = pred.row(row);
                    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let z: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
                    let log_z = max + z.ln();
                    value += (log_z - logits[class]) / n;
                    for (k, &l) in logits.iter().enumerate() {
                        let softmax = (l - log_z).exp();
                        grad[[row, k]] = (softmax - f64::from(u8::from(k == class))) / n;
                    }
                }
            }
            (CodeKind::Continuous { .. }, CodeValues::Continuous(values)) => {
                for (row, &t) in values.iter().enumerate() {
                    let d = pred[[row, 0]] - t;
                    value += d * d / n;
                    grad[[row, 0]] = 2.0 * d / n;
                }
            }
            _ => return Err(ObjectiveError::TargetKind(code.name.clone())),
        }
        grads.push(grad);
    }
    Ok(Reconstruction { value, grads })
}

/// `L_I`: reconstruction of the free codes from `Q_us` on synthetic samples.
pub fn mi_unsupervised(
    spec: &LatentSpec,
    q_us_on_fake: &[Array2<f64>],
    latent: &LatentBatch,
) -> Result<Reconstruction, ObjectiveError> {
    let indices = spec.unsupervised_indices();
    let targets: Vec<&CodeValues> = indices.iter().map(|&i| latent.code(i)).collect();
    code_reconstruction_loss(spec, &indices, q_us_on_fake, &targets)
}

/// `L¹_IS`: reconstruction of the labels from `Q_ss` on labeled real samples.
/// Every row must carry a label.
pub fn mi_supervised_real(
    spec: &LatentSpec,
    q_ss_on_real: &[Array2<f64>],
    labels: &[Option<Vec<f64>>],
) -> Result<Reconstruction, ObjectiveError> {
    let rows = labels
        .iter()
        .enumerate()
        .map(|(i, l)| l.clone().ok_or(ObjectiveError::Unlabeled(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let codes = labels_to_codes(&rows, spec)?;
    let targets: Vec<&CodeValues> = codes.values.iter().collect();
    code_reconstruction_loss(spec, &codes.indices, q_ss_on_real, &targets)
}

/// `L²_IS`: reconstruction of the sampled supervised codes from `Q_ss` on
/// synthetic samples.
pub fn mi_supervised_fake(
    spec: &LatentSpec,
    q_ss_on_fake: &[Array2<f64>],
    latent: &LatentBatch,
) -> Result<Reconstruction, ObjectiveError> {
    let indices = spec.supervised_indices();
    let targets: Vec<&CodeValues> = indices.iter().map(|&i| latent.code(i)).collect();
    code_reconstruction_loss(spec, &indices, q_ss_on_fake, &targets)
}

/// Weights `λ₁` (free codes) and `λ₂` (supervised codes).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.lambda1) && ok(self.lambda2) {
            Ok(())
        } else {
            Err(ObjectiveError::Weights)
        }
    }
}

/// Per-step loss values. `l_is1` is present only on labeled steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub d_loss: f64,
    pub g_loss: f64,
    pub l_i: f64,
    pub l_is1: Option<f64>,
    pub l_is2: f64,
    /// Weighted objective applied in the discriminator phase.
    pub d_total: f64,
    /// Weighted objective applied in the generator/code phase.
    pub g_total: f64,
    pub labeled: bool,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        [self.d_loss, self.g_loss, self.l_i, self.l_is2, self.d_total, self.g_total]
            .into_iter()
            .chain(self.l_is1)
            .all(f64::is_finite)
    }
}

/// Disjoint trainable parameter collections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Generator,
    Trunk,
    HeadD,
    HeadQUs,
    HeadQSs,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] =
        [ParamGroup::Generator, ParamGroup::Trunk, ParamGroup::HeadD, ParamGroup::HeadQUs, ParamGroup::HeadQSs];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Generator => "generator",
            ParamGroup::Trunk => "trunk",
            ParamGroup::HeadD => "head_d",
            ParamGroup::HeadQUs => "head_q_us",
            ParamGroup::HeadQSs => "head_q_ss",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossTerm {
    GanD,
    GanG,
    /// `L_I`.
    MiUnsupervised,
    /// `L¹_IS`.
    MiSupervisedReal,
    /// `L²_IS`.
    MiSupervisedFake,
}

/// Optimizer application within one training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Discriminator,
    Generator,
}

/// One loss term, its weight and the groups its gradient may reach.
#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub phase: Phase,
    pub term: LossTerm,
    pub weight: f64,
    pub groups: Vec<ParamGroup>,
}

impl Route {
    pub fn reaches(&self, group: ParamGroup) -> bool {
        self.groups.contains(&group)
    }
}

/// The full routing table of a training step. Terms absent from it are
/// neither differentiated nor applied.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct UpdateDirective {
    pub routes: Vec<Route>,
}

impl UpdateDirective {
    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &Route> {
        self.routes.iter().filter(move |r| r.phase == phase)
    }

    pub fn route(&self, term: LossTerm) -> Option<&Route> {
        self.routes.iter().find(|r| r.term == term)
    }

    /// Groups that receive any gradient in `phase`.
    pub fn groups(&self, phase: Phase) -> Vec<ParamGroup> {
        let mut g: Vec<ParamGroup> = self.phase(phase).flat_map(|r| r.groups.iter().copied()).collect();
        g.sort();
        g.dedup();
        g
    }

    /// Keeps only the listed terms.
    pub fn only(&self, terms: &[LossTerm]) -> Self {
        let routes = self.routes.iter().filter(|r| terms.contains(&r.term)).cloned().collect();
        Self { routes }
    }
}

/// Builds the routing table:
///
/// - discriminator phase: adversarial loss into `{trunk, head_d}`;
/// - generator phase: adversarial loss into `{G}`; `λ₁ L_I` into
///   `{G, head_q_us, trunk}`; `λ₂ L²_IS` into `{G}` only; on labeled steps
///   `λ₂ L¹_IS` into `{head_q_ss}` plus the trunk when `lis1_updates_trunk`.
///
/// Terms with zero weight are dropped so the groups they would reach stay
/// untouched.
pub fn routed_updates(weights: &LossWeights, labeled: bool, lis1_updates_trunk: bool) -> UpdateDirective {
    use ParamGroup::*;
    let mut routes = vec![
        Route { phase: Phase::Discriminator, term: LossTerm::GanD, weight: 1.0, groups: vec![Trunk, HeadD] },
        Route { phase: Phase::Generator, term: LossTerm::GanG, weight: 1.0, groups: vec![Generator] },
    ];
    if weights.lambda1 > 0.0 {
        routes.push(Route {
            phase: Phase::Generator,
            term: LossTerm::MiUnsupervised,
            weight: weights.lambda1,
            groups: vec![Generator, Trunk, HeadQUs],
        });
    }
    if weights.lambda2 > 0.0 {
        routes.push(Route {
            phase: Phase::Generator,
            term: LossTerm::MiSupervisedFake,
            weight: weights.lambda2,
            groups: vec![Generator],
        });
        if labeled {
            let groups = if lis1_updates_trunk { vec![Trunk, HeadQSs] } else { vec![HeadQSs] };
            routes.push(Route {
                phase: Phase::Generator,
                term: LossTerm::MiSupervisedReal,
                weight: weights.lambda2,
                groups,
            });
        }
    }
    UpdateDirective { routes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{sample_latent, CodeSpec};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    const E: f64 = PROB_EPS;

    fn fd(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
        let h = 1e-6;
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[i] += h;
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    }

    #[test]
    fn discriminator_loss_examples() {
        assert_abs_diff_eq!(gan_d_loss(&[1.0 - E], &[E]).value, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(gan_d_loss(&[0.5; 4], &[0.5; 4]).value, 2.0 * LN_2, epsilon = 1e-15);
        let worst = gan_d_loss(&[E], &[1.0 - E]).value;
        assert!(worst > 20.0 && worst <= -2.0 * E.ln() + 1e-9);
        assert!(gan_d_loss(&[0.0], &[1.0]).value.is_finite());
    }

    #[test]
    fn generator_loss_examples() {
        let ns = GeneratorLossMode::NonSaturating;
        assert_abs_diff_eq!(gan_g_loss(&[0.5], ns).value, LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(gan_g_loss(&[1.0 - E], ns).value, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(gan_g_loss(&[0.5], GeneratorLossMode::Minimax).value, -LN_2, epsilon = 1e-15);
    }

    fn mixed_spec() -> LatentSpec {
        LatentSpec::new(
            3,
            vec![
                CodeSpec::categorical("k", 10, true),
                CodeSpec::continuous("u", -1.0, 1.0, false),
                CodeSpec::categorical("v", 3, false),
            ],
        )
        .unwrap()
    }

    #[test]
    fn reconstruction_examples() {
        let spec = mixed_spec();
        let uniform = Array2::zeros((2, 10));
        let t = CodeValues::Categorical(vec![3, 9]);
        let r = code_reconstruction_loss(&spec, &[0], &[uniform], &[&t]).unwrap();
        assert_abs_diff_eq!(r.value, 10f64.ln(), epsilon = 1e-12);

        let mut sharp = Array2::zeros((1, 10));
        sharp[[0, 4]] = 50.0;
        let t = CodeValues::Categorical(vec![4]);
        let r = code_reconstruction_loss(&spec, &[0], &[sharp], &[&t]).unwrap();
        assert!(r.value < 1e-12);

        let pred = Array2::from_elem((1, 1), 0.3);
        let t = CodeValues::Continuous(vec![-0.2]);
        let r = code_reconstruction_loss(&spec, &[1], &[pred], &[&t]).unwrap();
        assert_abs_diff_eq!(r.value, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn reconstruction_rejects_structure_mismatch() {
        let spec = mixed_spec();
        let t = CodeValues::Categorical(vec![0]);
        assert!(matches!(
            code_reconstruction_loss(&spec, &[0], &[Array2::zeros((1, 9))], &[&t]),
            Err(ObjectiveError::BlockShape { .. })
        ));
        assert!(matches!(
            code_reconstruction_loss(&spec, &[0, 1], &[Array2::zeros((1, 10))], &[&t]),
            Err(ObjectiveError::BlockCount { .. })
        ));
        assert_eq!(
            code_reconstruction_loss(&spec, &[1], &[Array2::zeros((1, 1))], &[&t]),
            Err(ObjectiveError::TargetKind("u".into()))
        );
    }

    #[test]
    fn supervised_real_rejects_unlabeled_rows() {
        let spec = mixed_spec();
        let preds = [Array2::zeros((2, 10))];
        let err = mi_supervised_real(&spec, &preds, &[Some(vec![1.0]), None]).unwrap_err();
        assert_eq!(err, ObjectiveError::Unlabeled(1));
    }

    #[test]
    fn mi_wrappers_select_their_codes() {
        let spec = mixed_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let latent = sample_latent(&spec, 4, &mut rng).unwrap();
        let us = mi_unsupervised(&spec, &[Array2::zeros((4, 1)), Array2::zeros((4, 3))], &latent).unwrap();
        assert_eq!(us.grads.len(), 2);
        let ss = mi_supervised_fake(&spec, &[Array2::zeros((4, 10))], &latent).unwrap();
        assert_abs_diff_eq!(ss.value, 10f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn routing_table_matches_contract() {
        use ParamGroup::*;
        let d = routed_updates(&LossWeights::default(), true, true);
        assert_eq!(d.route(LossTerm::GanD).unwrap().groups, vec![Trunk, HeadD]);
        assert_eq!(d.route(LossTerm::MiSupervisedFake).unwrap().groups, vec![Generator]);
        let l1 = d.route(LossTerm::MiSupervisedReal).unwrap();
        assert!(!l1.reaches(Generator) && l1.reaches(HeadQSs) && l1.reaches(Trunk));
        assert!(!routed_updates(&LossWeights::default(), true, false)
            .route(LossTerm::MiSupervisedReal)
            .unwrap()
            .reaches(Trunk));
        assert!(routed_updates(&LossWeights::default(), false, true).route(LossTerm::MiSupervisedReal).is_none());
        let plain = routed_updates(&LossWeights { lambda1: 0.0, lambda2: 0.0 }, true, true);
        assert_eq!(plain.groups(Phase::Discriminator), vec![Trunk, HeadD]);
        assert_eq!(plain.groups(Phase::Generator), vec![Generator]);
    }

    proptest! {
        #[test]
        fn discriminator_loss_gradient(real in proptest::collection::vec(0.01f64..0.99, 1..6),
                                       fake in proptest::collection::vec(0.01f64..0.99, 1..6)) {
            let l = gan_d_loss(&real, &fake);
            prop_assert!(l.value >= 0.0);
            for i in 0..real.len() {
                let g = fd(|r| gan_d_loss(r, &fake).value, &real, i);
                prop_assert!((g - l.grad_real[i]).abs() <= 1e-4 * g.abs().max(1.0));
            }
            for i in 0..fake.len() {
                let g = fd(|f| gan_d_loss(&real, f).value, &fake, i);
                prop_assert!((g - l.grad_fake[i]).abs() <= 1e-4 * g.abs().max(1.0));
            }
        }

        #[test]
        fn generator_loss_gradient_and_sign(fake in proptest::collection::vec(0.01f64..0.99, 1..6)) {
            for mode in [GeneratorLossMode::Minimax, GeneratorLossMode::NonSaturating] {
                let l = gan_g_loss(&fake, mode);
                match mode {
                    GeneratorLossMode::Minimax => prop_assert!(l.value <= 0.0),
                    GeneratorLossMode::NonSaturating => prop_assert!(l.value >= 0.0),
                }
                for i in 0..fake.len() {
                    let g = fd(|f| gan_g_loss(f, mode).value, &fake, i);
                    prop_assert!((g - l.grad[i]).abs() <= 1e-4 * g.abs().max(1.0));
                }
            }
        }

        #[test]
        fn reconstruction_gradient(logits in proptest::collection::vec(-3.0f64..3.0, 20),
                                   cont in proptest::collection::vec(-2.0f64..2.0, 2),
                                   classes in proptest::collection::vec(0usize..10, 2),
                                   targets in proptest::collection::vec(-1.0f64..1.0, 2)) {
            let spec = mixed_spec();
            let cat_t = CodeValues::Categorical(classes);
            let cont_t = CodeValues::Continuous(targets);
            let eval = |l: &[f64], c: &[f64]| {
                let blocks = [
                    Array2::from_shape_vec((2, 10), l.to_vec()).unwrap(),
                    Array2::from_shape_vec((2, 1), c.to_vec()).unwrap(),
                ];
                code_reconstruction_loss(&spec, &[0, 1], &blocks, &[&cat_t, &cont_t]).unwrap()
            };
            let r = eval(&logits, &cont);
            prop_assert!(r.value >= 0.0);
            for i in 0..logits.len() {
                let g = fd(|l| eval(l, &cont).value, &logits, i);
                prop_assert!((g - r.grads[0].as_slice().unwrap()[i]).abs() <= 1e-4 * g.abs().max(1e-3));
            }
            for i in 0..cont.len() {
                let g = fd(|c| eval(&logits, c).value, &cont, i);
                prop_assert!((g - r.grads[1].as_slice().unwrap()[i]).abs() <= 1e-4 * g.abs().max(1e-3));
            }
        }
    }
}
