//! Exact information measures over small discrete joints `p(c, x, x̃)`.
//!
//! Everything is computed by brute-force summation in nats. The oracle checks
//! the entropy decomposition of `H(C)` into the two code/data mutual
//! informations, the residual conditional entropy and the multivariate term,
//! and that the multivariate term reduces to `I(X;X̃) ≥ 0` when real and
//! synthetic data are conditionally independent given the code.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::Exp1;
use thiserror::Error;

/// Tolerance on the total mass of a distribution.
pub const MASS_TOL: f64 = 1e-12;
/// Tolerance on the decomposition identities.
pub const IDENTITY_TOL: f64 = 1e-10;
/// Bound on `I(X;X̃|C)` for joints built from the Markov factorization.
pub const MARKOV_TOL: f64 = 1e-12;
pub const MAX_ALPHABET: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum InfoError {
    #[error("alphabet size {0} outside [2, {MAX_ALPHABET}]")]
    Alphabet(usize),
    #[error("table has {got} entries, expected {expected}")]
    Shape { expected: usize, got: usize },
    #[error("probability {0} is negative or not finite")]
    Entry(f64),
    #[error("probabilities sum to {0}, not 1")]
    Mass(f64),
    #[error("conditional row {row} of {which}: {source}")]
    Conditional { which: &'static str, row: usize, source: Box<InfoError> },
    #[error("{0}")]
    Violation(String),
    #[error("sharpness grid must be non-decreasing values in [0, 1]")]
    Grid,
}

fn check_distribution<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<(), InfoError> {
    let mut total = 0.0;
    for &v in values {
        if !(v.is_finite() && v >= 0.0) {
            return Err(InfoError::Entry(v));
        }
        total += v;
    }
    if (total - 1.0).abs() > MASS_TOL {
        return Err(InfoError::Mass(total));
    }
    Ok(())
}

fn plogp_sum<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    values.into_iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// Shannon entropy `−Σ p ln p` of a probability vector, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64, InfoError> {
    check_distribution(p)?;
    Ok(plogp_sum(p))
}

/// `Σ p(a,b) ln[p(a,b) / (p(a) p(b))]` for a two-variable joint table.
pub fn mutual_information(joint: ArrayView2<'_, f64>) -> Result<f64, InfoError> {
    check_distribution(joint.iter())?;
    let pa = joint.sum_axis(Axis(1));
    let pb = joint.sum_axis(Axis(0));
    let mut mi = 0.0;
    for ((a, b), &p) in joint.indexed_iter() {
        if p > 0.0 {
            mi += p * (p / (pa[a] * pb[b])).ln();
        }
    }
    Ok(mi)
}

/// Exact joint over `(C, X, X̃)`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDistribution {
    table: Array3<f64>,
}

impl JointDistribution {
    /// Builds a joint from a row-major table indexed `[c][x][x̃]`.
    pub fn new(sizes: [usize; 3], p: Vec<f64>) -> Result<Self, InfoError> {
        for &n in &sizes {
            if !(2..=MAX_ALPHABET).contains(&n) {
                return Err(InfoError::Alphabet(n));
            }
        }
        let expected = sizes.iter().product();
        if p.len() != expected {
            return Err(InfoError::Shape { expected, got: p.len() });
        }
        check_distribution(&p)?;
        let table = Array3::from_shape_vec(sizes, p).expect("checked length");
        Ok(Self { table })
    }

    /// Uniform draw from the probability simplex (normalized i.i.d. exponentials).
    pub fn random<R: Rng + ?Sized>(sizes: [usize; 3], rng: &mut R) -> Result<Self, InfoError> {
        let n: usize = sizes.iter().product();
        let mut p: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        Self::new(sizes, p)
    }

    /// `X` and `C` independent fair bits, `X̃ = X ⊕ C`.
    pub fn xor() -> Self {
        let mut p = vec![0.0; 8];
        for c in 0..2 {
            for x in 0..2 {
                p[c * 4 + x * 2 + (x ^ c)] = 0.25;
            }
        }
        Self::new([2, 2, 2], p).expect("valid xor joint")
    }

    pub fn sizes(&self) -> [usize; 3] {
        let d = self.table.dim();
        [d.0, d.1, d.2]
    }

    pub fn table(&self) -> &Array3<f64> {
        &self.table
    }

    pub fn p(&self, c: usize, x: usize, xt: usize) -> f64 {
        self.table[[c, x, xt]]
    }

    pub fn marginal_c(&self) -> Vec<f64> {
        self.table.sum_axis(Axis(2)).sum_axis(Axis(1)).to_vec()
    }

    pub fn joint_cx(&self) -> Array2<f64> {
        self.table.sum_axis(Axis(2))
    }

    pub fn joint_cxt(&self) -> Array2<f64> {
        self.table.sum_axis(Axis(1))
    }

    pub fn joint_xxt(&self) -> Array2<f64> {
        self.table.sum_axis(Axis(0))
    }

    /// `H(C, X, X̃)`.
    pub fn entropy_all(&self) -> f64 {
        plogp_sum(self.table.iter())
    }

    /// `I(X;X̃|C) = Σ_c p(c) I(X;X̃ | C=c)`.
    pub fn conditional_mi_given_c(&self) -> f64 {
        let mut total = 0.0;
        for slice in self.table.outer_iter() {
            let pc: f64 = slice.sum();
            if pc <= 0.0 {
                continue;
            }
            let px = slice.sum_axis(Axis(1));
            let pxt = slice.sum_axis(Axis(0));
            for ((x, xt), &p) in slice.indexed_iter() {
                if p > 0.0 {
                    total += p * (p * pc / (px[x] * pxt[xt])).ln();
                }
            }
        }
        total
    }

    /// Whether real and synthetic data are conditionally independent given `C`.
    pub fn is_markov(&self) -> bool {
        self.conditional_mi_given_c() <= MARKOV_TOL
    }
}

/// `I(C;X;X̃) = I(X;X̃) − I(X;X̃|C)`. Negative when `X` and `X̃` only couple
/// through `C`.
pub fn multivariate_mi(joint: &JointDistribution) -> f64 {
    let ixx = mutual_information(joint.joint_xxt().view()).expect("marginal of a valid joint");
    ixx - joint.conditional_mi_given_c()
}

fn check_conditional(m: ArrayView2<'_, f64>, rows: usize, which: &'static str) -> Result<(), InfoError> {
    if m.nrows() != rows {
        return Err(InfoError::Shape { expected: rows, got: m.nrows() });
    }
    for (row, r) in m.outer_iter().enumerate() {
        check_distribution(r.iter())
            .map_err(|e| InfoError::Conditional { which, row, source: Box::new(e) })?;
    }
    Ok(())
}

/// `p(c, x, x̃) = p(c) p(x|c) p(x̃|c)`, the factorization `X ← C → X̃`.
pub fn build_markov_joint(
    p_c: &[f64],
    p_x_given_c: ArrayView2<'_, f64>,
    p_xt_given_c: ArrayView2<'_, f64>,
) -> Result<JointDistribution, InfoError> {
    check_distribution(p_c)?;
    check_conditional(p_x_given_c, p_c.len(), "p(x|c)")?;
    check_conditional(p_xt_given_c, p_c.len(), "p(x̃|c)")?;
    let (nx, nxt) = (p_x_given_c.ncols(), p_xt_given_c.ncols());
    let mut p = Vec::with_capacity(p_c.len() * nx * nxt);
    for (c, &pc) in p_c.iter().enumerate() {
        for x in 0..nx {
            for xt in 0..nxt {
                p.push(pc * p_x_given_c[[c, x]] * p_xt_given_c[[c, xt]]);
            }
        }
    }
    // Products of normalized rows drift from unit mass only by rounding.
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    JointDistribution::new([p_c.len(), nx, nxt], p)
}

/// Random conditional table with `rows` rows over `cols` outcomes.
pub fn random_conditional<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let mut m = Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(Exp1));
    for mut row in m.outer_iter_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    m
}

/// Every term of the decomposition of `H(C)`, in nats.
#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionReport {
    pub h_c: f64,
    pub i_cx: f64,
    pub i_cxt: f64,
    pub h_c_given_xxt: f64,
    pub i_cxxt: f64,
    pub i_xxt: f64,
    pub i_xxt_given_c: f64,
    /// `H(C) − [I(C;X) + I(C;X̃) + H(C|X,X̃) − I(C;X;X̃)]`.
    pub residual: f64,
    pub markov: bool,
}

impl DecompositionReport {
    /// `|I(C;X;X̃) − I(X;X̃)|`, zero for Markov joints.
    pub fn markov_gap(&self) -> f64 {
        (self.i_cxxt - self.i_xxt).abs()
    }
}

/// Computes all decomposition terms and checks the identities that must hold:
/// the residual always, and `I(C;X;X̃) = I(X;X̃) ≥ 0` for Markov joints.
pub fn verify_decomposition(joint: &JointDistribution) -> Result<DecompositionReport, InfoError> {
    let h_c = entropy(&joint.marginal_c())?;
    let i_cx = mutual_information(joint.joint_cx().view())?;
    let i_cxt = mutual_information(joint.joint_cxt().view())?;
    let i_xxt = mutual_information(joint.joint_xxt().view())?;
    let h_xxt = plogp_sum(joint.joint_xxt().iter());
    let h_c_given_xxt = joint.entropy_all() - h_xxt;
    let i_xxt_given_c = joint.conditional_mi_given_c();
    let i_cxxt = i_xxt - i_xxt_given_c;
    let residual = h_c - (i_cx + i_cxt + h_c_given_xxt - i_cxxt);
    let report = DecompositionReport {
        h_c,
        i_cx,
        i_cxt,
        h_c_given_xxt,
        i_cxxt,
        i_xxt,
        i_xxt_given_c,
        residual,
        markov: i_xxt_given_c <= MARKOV_TOL,
    };
    if residual.abs() > IDENTITY_TOL {
        return Err(InfoError::Violation(format!("decomposition residual {residual:e}")));
    }
    if report.markov {
        if report.markov_gap() > IDENTITY_TOL {
            return Err(InfoError::Violation(format!("Markov gap {:e}", report.markov_gap())));
        }
        if i_xxt < -IDENTITY_TOL {
            return Err(InfoError::Violation(format!("I(X;X̃) = {i_xxt:e} < 0")));
        }
    }
    Ok(report)
}

/// Symmetric channel of sharpness `s`: `p(x|c) = s·[x = c] + (1 − s)/n`.
pub fn sharpness_channel(n: usize, s: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(c, x)| s * f64::from(u8::from(c == x)) + (1.0 - s) / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeltaRow {
    pub s: f64,
    pub i_cx: f64,
    pub i_cxt: f64,
    pub i_xxt: f64,
}

/// Sweeps both channels of a Markov joint from pure noise (`s = 0`) to exact
/// copies (`s = 1`) and checks that `I(X;X̃)` stays non-negative and never
/// decreases as both code/data informations grow.
///
/// Composition of two such channels is again one (`M_a M_b = M_ab`), so data
/// processing makes the curve monotone along the family.
pub fn delta_experiment(p_c: &[f64], grid: &[f64]) -> Result<Vec<DeltaRow>, InfoError> {
    if grid.is_empty()
        || grid.iter().any(|s| !(0.0..=1.0).contains(s))
        || grid.windows(2).any(|w| w[1] < w[0])
    {
        return Err(InfoError::Grid);
    }
    let n = p_c.len();
    let mut rows: Vec<DeltaRow> = Vec::with_capacity(grid.len());
    for &s in grid {
        let ch = sharpness_channel(n, s);
        let joint = build_markov_joint(p_c, ch.view(), ch.view())?;
        let report = verify_decomposition(&joint)?;
        let row = DeltaRow { s, i_cx: report.i_cx, i_cxt: report.i_cxt, i_xxt: report.i_xxt };
        if row.i_xxt < -IDENTITY_TOL {
            return Err(InfoError::Violation(format!("I(X;X̃) = {:e} at s = {s}", row.i_xxt)));
        }
        if let Some(prev) = rows.last() {
            let both_up = row.i_cx >= prev.i_cx && row.i_cxt >= prev.i_cxt;
            if both_up && row.i_xxt < prev.i_xxt - IDENTITY_TOL {
                return Err(InfoError::Violation(format!(
                    "I(X;X̃) fell from {} to {} between s = {} and s = {s}",
                    prev.i_xxt, row.i_xxt, prev.s
                )));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Maximum deviations observed by [`run_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub trials: usize,
    pub max_residual: f64,
    pub max_markov_gap: f64,
    pub max_markov_conditional_mi: f64,
    pub min_markov_i_xxt: f64,
    pub min_bivariate_mi: f64,
    pub xor_multivariate_mi: f64,
    pub delta: Vec<DeltaRow>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_residual <= IDENTITY_TOL
            && self.max_markov_gap <= IDENTITY_TOL
            && self.max_markov_conditional_mi <= MARKOV_TOL
            && self.min_markov_i_xxt >= -IDENTITY_TOL
            && self.min_bivariate_mi >= -MASS_TOL
            && (self.xor_multivariate_mi + std::f64::consts::LN_2).abs() <= IDENTITY_TOL
    }
}

/// Runs the whole oracle: `trials` random joints and `trials` random Markov
/// joints with alphabets in `[2, 8]`, the XOR joint and an 11-point sharpness
/// sweep over a uniform binary code.
pub fn run_suite<R: Rng + ?Sized>(trials: usize, rng: &mut R) -> Result<SuiteReport, InfoError> {
    let mut report = SuiteReport {
        trials,
        max_residual: 0.0,
        max_markov_gap: 0.0,
        max_markov_conditional_mi: 0.0,
        min_markov_i_xxt: f64::INFINITY,
        min_bivariate_mi: f64::INFINITY,
        xor_multivariate_mi: 0.0,
        delta: Vec::new(),
    };
    let mut sizes = || [rng.random_range(2..=8), rng.random_range(2..=8), rng.random_range(2..=8)];
    let mut shapes: Vec<[usize; 3]> = (0..2 * trials).map(|_| sizes()).collect();
    let markov_shapes = shapes.split_off(trials);
    for s in shapes {
        let joint = JointDistribution::random(s, rng)?;
        let r = decomposition_terms(&joint);
        report.max_residual = report.max_residual.max(r.residual.abs());
        report.min_bivariate_mi = report.min_bivariate_mi.min(r.i_cx.min(r.i_cxt).min(r.i_xxt));
    }
    for [nc, nx, nxt] in markov_shapes {
        let p_c = JointDistribution::random([nc, 2, 2], rng)?.marginal_c();
        let joint = build_markov_joint(
            &p_c,
            random_conditional(nc, nx, rng).view(),
            random_conditional(nc, nxt, rng).view(),
        )?;
        let r = decomposition_terms(&joint);
        report.max_residual = report.max_residual.max(r.residual.abs());
        report.max_markov_gap = report.max_markov_gap.max(r.markov_gap());
        report.max_markov_conditional_mi = report.max_markov_conditional_mi.max(r.i_xxt_given_c);
        report.min_markov_i_xxt = report.min_markov_i_xxt.min(r.i_xxt);
        report.min_bivariate_mi = report.min_bivariate_mi.min(r.i_cx.min(r.i_cxt).min(r.i_xxt));
    }
    report.xor_multivariate_mi = multivariate_mi(&JointDistribution::xor());
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    report.delta = delta_experiment(&[0.5, 0.5], &grid)?;
    Ok(report)
}

/// Like [`verify_decomposition`] but never fails, so a suite can aggregate
/// worst cases.
fn decomposition_terms(joint: &JointDistribution) -> DecompositionReport {
    match verify_decomposition(joint) {
        Ok(r) => r,
        Err(_) => {
            let h_c = plogp_sum(joint.marginal_c().iter());
            let i_cx = mutual_information(joint.joint_cx().view()).unwrap_or(f64::NAN);
            let i_cxt = mutual_information(joint.joint_cxt().view()).unwrap_or(f64::NAN);
            let i_xxt = mutual_information(joint.joint_xxt().view()).unwrap_or(f64::NAN);
            let h_c_given_xxt = joint.entropy_all() - plogp_sum(joint.joint_xxt().iter());
            let i_xxt_given_c = joint.conditional_mi_given_c();
            let i_cxxt = i_xxt - i_xxt_given_c;
            DecompositionReport {
                h_c,
                i_cx,
                i_cxt,
                h_c_given_xxt,
                i_cxxt,
                i_xxt,
                i_xxt_given_c,
                residual: h_c - (i_cx + i_cxt + h_c_given_xxt - i_cxxt),
                markov: i_xxt_given_c <= MARKOV_TOL,
            }
        }
    }
}
