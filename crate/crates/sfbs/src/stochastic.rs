//! Stochastic gradient oracles with bias/variance accounting, resolvent
//! perturbations, parameter schedules with admissibility certification, and
//! the growing-batch empirical-gradient construction.
//!
//! All randomness is drawn from ChaCha substreams keyed by (seed, purpose,
//! index), so every draw is a pure function of its key: replays are bitwise
//! identical and past draws are never disturbed by later ones.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::operators::CocoerciveMap;

/// Stable 64-bit mixing of seed parts (splitmix64 chain).
pub fn mix_seed(parts: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    let mut h = 0x243F_6A88_85A3_08D3u64;
    for &p in parts {
        h = splitmix(h ^ p);
    }
    h
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ---------------------------------------------------------------------------
// Parameter sequences
// ---------------------------------------------------------------------------

/// A nonnegative scalar sequence, symbolic where possible so summability can
/// be decided exactly for the built-in families.
#[derive(Clone)]
pub enum Rule {
    Constant(f64),
    /// `scale * (n + 1)^exponent`
    Power { scale: f64, exponent: f64 },
    /// `scale * ratio^n`
    Geometric { scale: f64, ratio: f64 },
    Custom(Arc<dyn Fn(usize) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for Rule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Constant(c) => write!(f, "Constant({c})"),
            Self::Power { scale, exponent } => write!(f, "Power({scale}*(n+1)^{exponent})"),
            Self::Geometric { scale, ratio } => write!(f, "Geometric({scale}*{ratio}^n)"),
            Self::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl Rule {
    pub fn zero() -> Self {
        Self::Constant(0.0)
    }

    pub fn eval(&self, n: usize) -> f64 {
        match self {
            Self::Constant(c) => *c,
            Self::Power { scale, exponent } => scale * ((n + 1) as f64).powf(*exponent),
            Self::Geometric { scale, ratio } => scale * ratio.powi(n as i32),
            Self::Custom(f) => f(n),
        }
    }

    /// Canonical form: geometric with ratio 1 is a constant, zero scales
    /// collapse to the zero rule.
    fn canon(&self) -> Rule {
        match self {
            Self::Geometric { scale, ratio } if *ratio == 1.0 => Self::Constant(*scale),
            Self::Power { scale, exponent } if *scale == 0.0 || *exponent == 0.0 => {
                Self::Constant(*scale)
            }
            Self::Geometric { scale, .. } if *scale == 0.0 => Self::Constant(0.0),
            other => other.clone(),
        }
    }

    /// Is the series sum finite? `None` when not symbolically decidable.
    pub fn summable(&self) -> Option<bool> {
        match self.canon() {
            Self::Constant(c) => Some(c == 0.0),
            Self::Power { exponent, .. } => Some(exponent < -1.0),
            Self::Geometric { ratio, .. } => Some(ratio.abs() < 1.0),
            Self::Custom(_) => None,
        }
    }

    /// Does the series diverge to infinity? `None` when not decidable.
    pub fn sum_diverges(&self) -> Option<bool> {
        match self.canon() {
            Self::Constant(c) => Some(c > 0.0),
            Self::Power { scale, exponent } => Some(scale > 0.0 && exponent >= -1.0),
            Self::Geometric { scale, ratio } => Some(scale > 0.0 && ratio >= 1.0),
            Self::Custom(_) => None,
        }
    }

    /// Supremum over all n (infinity for growing families); `None` for
    /// custom rules.
    pub fn sup(&self) -> Option<f64> {
        match self.canon() {
            Self::Constant(c) => Some(c),
            Self::Power { scale, exponent } => {
                if exponent <= 0.0 {
                    Some(scale)
                } else {
                    Some(f64::INFINITY)
                }
            }
            Self::Geometric { scale, ratio } => {
                if ratio.abs() <= 1.0 {
                    Some(scale)
                } else {
                    Some(f64::INFINITY)
                }
            }
            Self::Custom(_) => None,
        }
    }

    /// Infimum over all n including the limit; `None` for custom rules.
    pub fn inf(&self) -> Option<f64> {
        match self.canon() {
            Self::Constant(c) => Some(c),
            Self::Power { scale, exponent } => {
                if exponent < 0.0 {
                    Some(0.0)
                } else {
                    Some(scale)
                }
            }
            Self::Geometric { scale, ratio } => {
                if ratio.abs() < 1.0 {
                    Some(0.0)
                } else {
                    Some(scale)
                }
            }
            Self::Custom(_) => None,
        }
    }

    pub fn sqrt(&self) -> Rule {
        match self.canon() {
            Self::Constant(c) => Self::Constant(c.sqrt()),
            Self::Power { scale, exponent } => Self::Power {
                scale: scale.sqrt(),
                exponent: exponent / 2.0,
            },
            Self::Geometric { scale, ratio } => Self::Geometric {
                scale: scale.sqrt(),
                ratio: ratio.sqrt(),
            },
            Self::Custom(f) => Self::Custom(Arc::new(move |n| f(n).sqrt())),
        }
    }

    pub fn square(&self) -> Rule {
        match self.canon() {
            Self::Constant(c) => Self::Constant(c * c),
            Self::Power { scale, exponent } => Self::Power {
                scale: scale * scale,
                exponent: exponent * 2.0,
            },
            Self::Geometric { scale, ratio } => Self::Geometric {
                scale: scale * scale,
                ratio: ratio * ratio,
            },
            Self::Custom(f) => Self::Custom(Arc::new(move |n| f(n) * f(n))),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.canon(), Self::Constant(_))
    }
}

/// Symbolic summability of the product sequence `a_n * b_n`; `None` when a
/// custom rule is involved.
pub fn product_summable(a: &Rule, b: &Rule) -> Option<bool> {
    use Rule::*;
    let a = a.canon();
    let b = b.canon();
    match (&a, &b) {
        (Constant(x), _) if *x == 0.0 => Some(true),
        (_, Constant(x)) if *x == 0.0 => Some(true),
        (Custom(_), _) | (_, Custom(_)) => None,
        (Geometric { ratio: r1, .. }, Geometric { ratio: r2, .. }) => Some((r1 * r2).abs() < 1.0),
        (Geometric { ratio, .. }, _) | (_, Geometric { ratio, .. }) => {
            // geometric decay dominates any fixed power
            Some(ratio.abs() < 1.0)
        }
        (Power { exponent: e1, .. }, Power { exponent: e2, .. }) => Some(e1 + e2 < -1.0),
        (Power { exponent, .. }, Constant(_)) | (Constant(_), Power { exponent, .. }) => {
            Some(*exponent < -1.0)
        }
        (Constant(_), Constant(_)) => Some(false),
    }
}

/// Numeric partial sum for rules outside the symbolic families.
pub fn partial_sum(rule: &Rule, upto: usize) -> f64 {
    (0..upto).map(|n| rule.eval(n)).sum()
}

/// Numeric summability proxy over the certificate horizon: the tail beyond
/// the halfway point must contribute at most 10% of the total.
fn numeric_summable<F: Fn(usize) -> f64>(f: F, horizon: usize) -> (bool, f64) {
    let head: f64 = (0..horizon / 2).map(&f).sum();
    let tail: f64 = (horizon / 2..horizon).map(&f).sum();
    let total = head + tail;
    if !total.is_finite() {
        return (false, total);
    }
    if total == 0.0 {
        return (true, 0.0);
    }
    (tail / total <= 0.1, total)
}

/// Growing batch-size rule `m_n = 1 + ceil(c * n^exponent)`, validated to be
/// strictly increasing.
#[derive(Clone, Debug)]
pub struct BatchRule {
    pub c: f64,
    pub exponent: f64,
}

pub const BATCH_MONOTONICITY_HORIZON: usize = 10_000;

impl BatchRule {
    pub fn new(c: f64, exponent: f64) -> Result<Self> {
        if c <= 0.0 || exponent <= 0.0 {
            return Err(Error::Config(
                "batch rule needs c > 0 and exponent > 0".into(),
            ));
        }
        let rule = Self { c, exponent };
        let mut prev = rule.eval(0);
        for n in 1..=BATCH_MONOTONICITY_HORIZON {
            let m = rule.eval(n);
            if m <= prev {
                return Err(Error::Config(format!(
                    "batch rule is not strictly increasing at n = {n} (m_{} = {prev}, m_{n} = {m})",
                    n - 1
                )));
            }
            prev = m;
        }
        Ok(rule)
    }

    pub fn eval(&self, n: usize) -> usize {
        1 + (self.c * (n as f64).powf(self.exponent)).ceil() as usize
    }
}

/// The sequences driving an iteration, with their admissibility data.
#[derive(Clone, Debug)]
pub struct IterationSchedule {
    pub lambda: Rule,
    pub gamma: Rule,
    pub tau: Rule,
    pub batch: Option<BatchRule>,
    pub alpha: Rule,
    pub beta: Rule,
}

#[derive(Clone, Copy, Debug)]
pub struct ScheduleValues {
    pub lambda: f64,
    pub gamma: f64,
    pub tau: f64,
    pub m: Option<usize>,
    pub alpha: f64,
    pub beta: f64,
}

impl IterationSchedule {
    pub fn new(lambda: Rule, gamma: Rule, tau: Rule) -> Result<Self> {
        if let Some(sup) = lambda.sup() {
            if sup > 1.0 + 1e-15 {
                return Err(Error::Config(format!(
                    "relaxation rule exceeds 1 (sup = {sup})"
                )));
            }
        }
        for n in (0..64).chain([1_000, 10_000]) {
            let l = lambda.eval(n);
            if !(l > 0.0 && l <= 1.0 + 1e-15) {
                return Err(Error::Config(format!(
                    "relaxation lambda_{n} = {l} outside ]0, 1]"
                )));
            }
            if gamma.eval(n) <= 0.0 {
                return Err(Error::Config(format!("gamma_{n} must be > 0")));
            }
            if tau.eval(n) < 0.0 {
                return Err(Error::Config(format!("tau_{n} must be >= 0")));
            }
        }
        Ok(Self {
            lambda,
            gamma,
            tau,
            batch: None,
            alpha: Rule::zero(),
            beta: Rule::zero(),
        })
    }

    pub fn constant(lambda: f64, gamma: f64) -> Result<Self> {
        Self::new(Rule::Constant(lambda), Rule::Constant(gamma), Rule::zero())
    }

    pub fn with_batch(mut self, batch: BatchRule) -> Self {
        self.batch = Some(batch);
        self
    }

    pub fn with_drift(mut self, alpha: Rule, beta: Rule) -> Self {
        self.alpha = alpha;
        self.beta = beta;
        self
    }

    pub fn eval(&self, n: usize) -> ScheduleValues {
        ScheduleValues {
            lambda: self.lambda.eval(n),
            gamma: self.gamma.eval(n),
            tau: self.tau.eval(n),
            m: self.batch.as_ref().map(|b| b.eval(n)),
            alpha: self.alpha.eval(n),
            beta: self.beta.eval(n),
        }
    }
}

/// Free-function form of schedule evaluation.
pub fn schedule_eval(s: &IterationSchedule, n: usize) -> ScheduleValues {
    s.eval(n)
}

/// Schedule family for the growing-batch empirical-gradient construction:
/// `lambda_n = (n+1)^(-kappa)`, `m_n = 1 + ceil(c n^(1+delta))`, constant
/// proximal parameter. Requires `kappa` in `]1-delta, 1] ∩ [0, 1]`.
pub fn growing_batch_schedule(
    delta: f64,
    kappa: f64,
    c: f64,
    gamma: f64,
) -> Result<IterationSchedule> {
    if delta <= 0.0 {
        return Err(Error::Config("delta must be > 0".into()));
    }
    // the admissibility window is open at 1 - delta
    if !((0.0..=1.0).contains(&kappa) && kappa > 1.0 - delta) {
        return Err(Error::Config(format!(
            "kappa = {kappa} violates the constraint kappa in ]1-delta, 1] ∩ [0, 1] (delta = {delta} gives ]{:.6}, 1])",
            1.0 - delta
        )));
    }
    let sched = IterationSchedule::new(
        Rule::Power {
            scale: 1.0,
            exponent: -kappa,
        },
        Rule::Constant(gamma),
        Rule::zero(),
    )?;
    Ok(sched.with_batch(BatchRule::new(c, 1.0 + delta)?))
}

// ---------------------------------------------------------------------------
// Certificates
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, serde::Serialize)]
pub struct CertificateClause {
    pub name: String,
    pub pass: bool,
    pub detail: String,
    /// Set when the clause could only be checked numerically up to a horizon.
    pub checked_up_to: Option<usize>,
    /// First index witnessing a finite-check failure, when one exists.
    pub witness_n: Option<usize>,
}

impl CertificateClause {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            pass,
            detail,
            checked_up_to: None,
            witness_n: None,
        }
    }

    /// Constructor for checkers living outside this module.
    pub fn new_public(name: &str, pass: bool, detail: String) -> Self {
        Self::new(name, pass, detail)
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct Certificate {
    pub clauses: Vec<CertificateClause>,
    pub pass: bool,
}

impl Certificate {
    fn from_clauses(clauses: Vec<CertificateClause>) -> Self {
        let pass = clauses.iter().all(|c| c.pass);
        Self { clauses, pass }
    }

    pub fn from_clauses_public(clauses: Vec<CertificateClause>) -> Self {
        Self::from_clauses(clauses)
    }

    pub fn failing(&self) -> Vec<&CertificateClause> {
        self.clauses.iter().filter(|c| !c.pass).collect()
    }
}

pub const CERT_NUMERIC_HORIZON: usize = 10_000;

fn nonincreasing(rule: &Rule) -> Option<bool> {
    match rule.canon() {
        Rule::Constant(_) => Some(true),
        Rule::Power { exponent, .. } => Some(exponent <= 0.0),
        Rule::Geometric { ratio, .. } => Some((0.0..=1.0).contains(&ratio)),
        Rule::Custom(_) => None,
    }
}

/// Step-size and relaxation admissibility for a declared cocoercivity
/// constant: positive proximal parameters bounded by `2 theta / (1 + tau_n)`,
/// bounded `tau`, and either relaxations bounded away from zero or a constant
/// proximal parameter with summable `tau` and divergent relaxation sum.
pub fn admissibility_certificate(s: &IterationSchedule, theta: f64) -> Result<Certificate> {
    if theta <= 0.0 {
        return Err(Error::Parameter("theta must be > 0".into()));
    }
    let mut clauses = Vec::new();

    // inf gamma > 0
    let (pass, detail, horizon) = match s.gamma.inf() {
        Some(inf) => (inf > 0.0, format!("inf gamma_n = {inf:e}"), None),
        None => {
            let min = (0..CERT_NUMERIC_HORIZON)
                .map(|n| s.gamma.eval(n))
                .fold(f64::INFINITY, f64::min);
            (min > 0.0, format!("min gamma_n = {min:e} over scan"), Some(CERT_NUMERIC_HORIZON))
        }
    };
    let mut c = CertificateClause::new("gamma_inf_positive", pass, detail);
    c.checked_up_to = horizon;
    clauses.push(c);

    // sup tau < inf
    let (pass, detail, horizon) = match s.tau.sup() {
        Some(sup) => (sup.is_finite(), format!("sup tau_n = {sup:e}"), None),
        None => {
            let max = (0..CERT_NUMERIC_HORIZON)
                .map(|n| s.tau.eval(n))
                .fold(0.0f64, f64::max);
            (max.is_finite(), format!("max tau_n = {max:e} over scan"), Some(CERT_NUMERIC_HORIZON))
        }
    };
    let mut c = CertificateClause::new("tau_sup_finite", pass, detail);
    c.checked_up_to = horizon;
    clauses.push(c);

    // sup (1 + tau_n) gamma_n < 2 theta
    let exact = matches!(
        (nonincreasing(&s.tau), nonincreasing(&s.gamma)),
        (Some(true), Some(true))
    );
    let mut witness = None;
    let sup_step = if exact {
        (1.0 + s.tau.eval(0)) * s.gamma.eval(0)
    } else {
        match (s.tau.sup(), s.gamma.sup()) {
            (Some(ts), Some(gs)) => (1.0 + ts) * gs,
            _ => {
                let mut max = 0.0f64;
                for n in 0..CERT_NUMERIC_HORIZON {
                    let v = (1.0 + s.tau.eval(n)) * s.gamma.eval(n);
                    if v >= 2.0 * theta && witness.is_none() {
                        witness = Some(n);
                    }
                    max = max.max(v);
                }
                max
            }
        }
    };
    let pass = sup_step < 2.0 * theta;
    if !pass && witness.is_none() && exact {
        witness = Some(0);
    }
    let mut c = CertificateClause::new(
        "step_size_bound",
        pass,
        format!("sup (1+tau_n) gamma_n = {sup_step:e}, bound 2*theta = {:e}", 2.0 * theta),
    );
    c.witness_n = witness;
    if !exact && (s.tau.sup().is_none() || s.gamma.sup().is_none()) {
        c.checked_up_to = Some(CERT_NUMERIC_HORIZON);
    }
    clauses.push(c);

    // lambda_n in ]0, 1]
    let mut witness = None;
    for n in 0..CERT_NUMERIC_HORIZON {
        let l = s.lambda.eval(n);
        if !(l > 0.0 && l <= 1.0 + 1e-15) {
            witness = Some(n);
            break;
        }
    }
    let mut c = CertificateClause::new(
        "lambda_in_unit_interval",
        witness.is_none(),
        "lambda_n in ]0,1]".into(),
    );
    c.witness_n = witness;
    c.checked_up_to = Some(CERT_NUMERIC_HORIZON);
    clauses.push(c);

    // inf lambda > 0, or constant gamma with summable tau and divergent
    // relaxation sum.
    let inf_lambda = s.lambda.inf();
    let branch_a = inf_lambda.map(|v| v > 0.0);
    let tau_summable = s.tau.summable();
    let lambda_diverges = s.lambda.sum_diverges();
    let branch_b = match (s.gamma.is_constant(), tau_summable, lambda_diverges) {
        (true, Some(ts), Some(ld)) => Some(ts && ld),
        (false, _, _) => Some(false),
        _ => None,
    };
    let (pass, horizon) = match (branch_a, branch_b) {
        (Some(a), Some(b)) => (a || b, None),
        (Some(true), _) => (true, None),
        (_, Some(true)) => (true, None),
        _ => {
            // numeric fallback: scan lambda for positivity and growth of its sum
            let min = (0..CERT_NUMERIC_HORIZON)
                .map(|n| s.lambda.eval(n))
                .fold(f64::INFINITY, f64::min);
            (min > 0.0 && s.gamma.is_constant(), Some(CERT_NUMERIC_HORIZON))
        }
    };
    let mut c = CertificateClause::new(
        "relaxation_condition",
        pass,
        format!(
            "inf lambda_n = {:?}; gamma constant = {}, tau summable = {:?}, sum lambda_n diverges = {:?}",
            inf_lambda,
            s.gamma.is_constant(),
            tau_summable,
            lambda_diverges
        ),
    );
    c.checked_up_to = horizon;
    clauses.push(c);

    Ok(Certificate::from_clauses(clauses))
}

// ---------------------------------------------------------------------------
// Sample distributions and the ledger
// ---------------------------------------------------------------------------

/// Distribution of the i.i.d. random matrices; all variants have analytic
/// second moments so the conditional-expectation identities stay checkable.
#[derive(Clone, Debug)]
pub enum MatrixDist {
    Constant(DMatrix<f64>),
    /// Entries i.i.d. normal with mean 0 and the given standard deviation.
    GaussianIid { rows: usize, cols: usize, std: f64 },
    /// A fixed mean matrix plus i.i.d. normal entries.
    MeanPlusGaussian { mean: DMatrix<f64>, std: f64 },
}

impl MatrixDist {
    pub fn rows(&self) -> usize {
        match self {
            Self::Constant(m) => m.nrows(),
            Self::GaussianIid { rows, .. } => *rows,
            Self::MeanPlusGaussian { mean, .. } => mean.nrows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            Self::Constant(m) => m.ncols(),
            Self::GaussianIid { cols, .. } => *cols,
            Self::MeanPlusGaussian { mean, .. } => mean.ncols(),
        }
    }

    pub fn mean(&self) -> DMatrix<f64> {
        match self {
            Self::Constant(m) => m.clone(),
            Self::GaussianIid { rows, cols, .. } => DMatrix::zeros(*rows, *cols),
            Self::MeanPlusGaussian { mean, .. } => mean.clone(),
        }
    }

    /// `E[K' K]` in closed form.
    pub fn expected_gram(&self) -> DMatrix<f64> {
        match self {
            Self::Constant(m) => m.tr_mul(m),
            Self::GaussianIid { rows, cols, std } => {
                DMatrix::identity(*cols, *cols) * (*rows as f64 * std * std)
            }
            Self::MeanPlusGaussian { mean, std } => {
                mean.tr_mul(mean)
                    + DMatrix::identity(mean.ncols(), mean.ncols())
                        * (mean.nrows() as f64 * std * std)
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        match self {
            Self::Constant(m) => m.clone(),
            Self::GaussianIid { rows, cols, std } => {
                sample_matrix(rng, *rows, *cols, 0.0, *std, None)
            }
            Self::MeanPlusGaussian { mean, std } => {
                sample_matrix(rng, mean.nrows(), mean.ncols(), 0.0, *std, Some(mean))
            }
        }
    }
}

fn sample_matrix(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    mean: f64,
    std: f64,
    shift: Option<&DMatrix<f64>>,
) -> DMatrix<f64> {
    // Row-major fill order is part of the reproducibility contract.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let g: f64 = rng.sample(StandardNormal);
            m[(i, j)] = mean + std * g + shift.map_or(0.0, |s| s[(i, j)]);
        }
    }
    m
}

#[derive(Clone, Debug)]
pub enum VectorDist {
    Constant(DVector<f64>),
    Gaussian { mean: DVector<f64>, std: f64 },
}

impl VectorDist {
    pub fn dim(&self) -> usize {
        match self {
            Self::Constant(v) => v.len(),
            Self::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        match self {
            Self::Constant(v) => v.clone(),
            Self::Gaussian { mean, .. } => mean.clone(),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        match self {
            Self::Constant(v) => v.clone(),
            Self::Gaussian { mean, std } => {
                DVector::from_fn(mean.len(), |i, _| {
                    let g: f64 = rng.sample(StandardNormal);
                    mean[i] + std * g
                })
            }
        }
    }
}

/// Seeded draw history for the empirical oracle.
///
/// Draw `i` is a pure function of `(seed, i)` via a dedicated ChaCha stream,
/// so it is generated identically whenever requested; the ledger keeps the
/// running Gram/cross sums over the materialized prefix plus the sums at the
/// previous prefix boundary for bias audits.
#[derive(Clone, Debug)]
pub struct SampleLedger {
    seed: u64,
    k_dist: MatrixDist,
    z_dist: VectorDist,
    count: usize,
    qsum: DMatrix<f64>,
    rsum: DVector<f64>,
    prev_count: usize,
    prev_qsum: DMatrix<f64>,
    prev_rsum: DVector<f64>,
}

impl SampleLedger {
    pub fn new(seed: u64, k_dist: MatrixDist, z_dist: VectorDist) -> Result<Self> {
        if k_dist.rows() != z_dist.dim() {
            return Err(Error::Shape(format!(
                "matrix dist has {} rows but vector dist has dim {}",
                k_dist.rows(),
                z_dist.dim()
            )));
        }
        let d = k_dist.cols();
        Ok(Self {
            seed,
            k_dist,
            z_dist,
            count: 0,
            qsum: DMatrix::zeros(d, d),
            rsum: DVector::zeros(d),
            prev_count: 0,
            prev_qsum: DMatrix::zeros(d, d),
            prev_rsum: DVector::zeros(d),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn x_dim(&self) -> usize {
        self.k_dist.cols()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn prev_count(&self) -> usize {
        self.prev_count
    }

    pub fn expected_gram(&self) -> DMatrix<f64> {
        self.k_dist.expected_gram()
    }

    /// `E[K' z]` (matrix and vector draws are independent).
    pub fn expected_cross(&self) -> DVector<f64> {
        self.k_dist.mean().tr_mul(&self.z_dist.mean())
    }

    pub fn k_dist(&self) -> &MatrixDist {
        &self.k_dist
    }

    pub fn z_dist(&self) -> &VectorDist {
        &self.z_dist
    }

    /// Sample with index `i`, regenerated bitwise-identically on every call.
    pub fn draw_at(&self, i: usize) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = stream_rng(self.seed, (i as u64) + 1);
        let k = self.k_dist.sample(&mut rng);
        let z = self.z_dist.sample(&mut rng);
        (k, z)
    }

    /// Extend the materialized prefix, remembering the sums at the old
    /// boundary.
    pub fn advance_to(&mut self, count: usize) -> Result<()> {
        if count < self.count {
            return Err(Error::Reproducibility(format!(
                "ledger already materialized {} samples, cannot rewind to {count}",
                self.count
            )));
        }
        self.prev_count = self.count;
        self.prev_qsum = self.qsum.clone();
        self.prev_rsum = self.rsum.clone();
        for i in self.count..count {
            let (k, z) = self.draw_at(i);
            self.qsum += k.tr_mul(&k);
            self.rsum += k.tr_mul(&z);
        }
        self.count = count;
        Ok(())
    }

    /// Gram/cross sums over `0..count`, recomputed from the pure draws.
    pub fn sums_at(&self, count: usize) -> (DMatrix<f64>, DVector<f64>) {
        let d = self.x_dim();
        let mut q = DMatrix::zeros(d, d);
        let mut r = DVector::zeros(d);
        for i in 0..count {
            let (k, z) = self.draw_at(i);
            q += k.tr_mul(&k);
            r += k.tr_mul(&z);
        }
        (q, r)
    }

    pub fn current_sums(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.qsum, &self.rsum)
    }

    pub fn prev_sums(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.prev_qsum, &self.prev_rsum)
    }
}

// ---------------------------------------------------------------------------
// Noise shapes and perturbations
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseShape {
    /// Normal with total variance 1 (`N(0, I/d)`): the magnitude rule is an
    /// L2 envelope, `E||a||^2 = magnitude^2`.
    GaussianUnit,
    /// Uniform in the unit ball: the magnitude rule is an almost-sure bound.
    Ball,
}

fn sample_shape(rng: &mut ChaCha8Rng, shape: NoiseShape, dim: usize) -> DVector<f64> {
    match shape {
        NoiseShape::GaussianUnit => {
            let s = 1.0 / (dim as f64).sqrt();
            DVector::from_fn(dim, |_, _| {
                let g: f64 = rng.sample(StandardNormal);
                g * s
            })
        }
        NoiseShape::Ball => {
            let g = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let norm = g.norm();
            let u: f64 = rng.random();
            if norm == 0.0 {
                return DVector::zeros(dim);
            }
            g * (u.powf(1.0 / dim as f64) / norm)
        }
    }
}

/// Resolvent perturbation stream `a_n`.
#[derive(Clone, Debug)]
pub enum PerturbationSource {
    Zero,
    Decaying {
        shape: NoiseShape,
        magnitude: Rule,
        seed: u64,
    },
    /// Block-wise stack of independent sources (the product-space
    /// perturbation `(b_n, c_n)`).
    Composite(Vec<(PerturbationSource, usize)>),
}

impl PerturbationSource {
    pub fn decaying(shape: NoiseShape, magnitude: Rule, seed: u64) -> Self {
        Self::Decaying {
            shape,
            magnitude,
            seed,
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Self::Zero => true,
            Self::Decaying { .. } => false,
            Self::Composite(parts) => parts.iter().all(|(p, _)| p.is_zero()),
        }
    }

    /// The perturbation at step n; a pure function of `(seed, n)`.
    pub fn next(&self, n: usize, dim: usize) -> DVector<f64> {
        match self {
            Self::Zero => DVector::zeros(dim),
            Self::Decaying {
                shape,
                magnitude,
                seed,
            } => {
                let mut rng = stream_rng(mix_seed(&[*seed, 0x70_65_72_74]), n as u64);
                sample_shape(&mut rng, *shape, dim) * magnitude.eval(n)
            }
            Self::Composite(parts) => {
                debug_assert_eq!(dim, parts.iter().map(|(_, d)| d).sum::<usize>());
                let mut out = DVector::zeros(dim);
                let mut off = 0;
                for (p, d) in parts {
                    out.rows_mut(off, *d).copy_from(&p.next(n, *d));
                    off += d;
                }
                out
            }
        }
    }

    /// Envelope on `sqrt(E||a_n||^2)`.
    pub fn envelope(&self) -> Rule {
        match self {
            Self::Zero => Rule::zero(),
            Self::Decaying { magnitude, .. } => magnitude.clone(),
            Self::Composite(parts) => {
                // Triangle-inequality bound: the sum of the part envelopes.
                let envs: Vec<Rule> = parts.iter().map(|(p, _)| p.envelope()).collect();
                if envs.iter().all(|e| matches!(e.canon(), Rule::Constant(c) if c == 0.0)) {
                    return Rule::zero();
                }
                Rule::Custom(Arc::new(move |n| envs.iter().map(|e| e.eval(n)).sum()))
            }
        }
    }
}

/// Free-function form mirroring the operation name.
pub fn next_perturbation(p: &PerturbationSource, n: usize, dim: usize) -> DVector<f64> {
    p.next(n, dim)
}

// ---------------------------------------------------------------------------
// Gradient oracles
// ---------------------------------------------------------------------------

pub struct CompositeGradient {
    /// Per-part oracles evaluated on slices of the flat input.
    pub parts: Vec<GradientOracle>,
    pub dims: Vec<usize>,
    /// Applied to the stacked raw estimates (the renorming inverse for the
    /// product-space embedding).
    pub transform: crate::operators::ForwardRule,
}

/// A stochastic estimator of a cocoercive map's values, with the exact map
/// retained for auditing where it is known.
pub struct GradientOracle {
    kind: OracleKind,
    exact: Option<CocoerciveMap>,
}

enum OracleKind {
    Exact,
    AdditiveNoise {
        shape: NoiseShape,
        scale: Rule,
        seed: u64,
    },
    EmpiricalQuadratic {
        ledger: Box<SampleLedger>,
        batch: BatchRule,
    },
    Composite(CompositeGradient),
}

impl std::fmt::Debug for GradientOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.kind {
            OracleKind::Exact => write!(f, "Exact"),
            OracleKind::AdditiveNoise { scale, .. } => write!(f, "AdditiveNoise({scale:?})"),
            OracleKind::EmpiricalQuadratic { batch, .. } => {
                write!(f, "EmpiricalQuadratic(m_n = 1+ceil({}*n^{}))", batch.c, batch.exponent)
            }
            OracleKind::Composite(c) => write!(f, "Composite({} parts)", c.parts.len()),
        }
    }
}

impl GradientOracle {
    pub fn exact(map: CocoerciveMap) -> Self {
        Self {
            kind: OracleKind::Exact,
            exact: Some(map),
        }
    }

    /// Unbiased noisy oracle `u_n = Bx + scale(n) * g_n`.
    pub fn additive_noise(map: CocoerciveMap, shape: NoiseShape, scale: Rule, seed: u64) -> Self {
        Self {
            kind: OracleKind::AdditiveNoise { shape, scale, seed },
            exact: Some(map),
        }
    }

    /// Growing-batch empirical estimate of the expected quadratic gradient
    /// `x -> E[K'(Kx - z)]`; the exact map is built from the analytic
    /// moments of the sample distributions.
    pub fn empirical_quadratic(ledger: SampleLedger, batch: BatchRule) -> Result<Self> {
        let exact =
            CocoerciveMap::quadratic(ledger.expected_gram(), ledger.expected_cross())?;
        Ok(Self {
            kind: OracleKind::EmpiricalQuadratic {
                ledger: Box::new(ledger),
                batch,
            },
            exact: Some(exact),
        })
    }

    pub fn composite(composite: CompositeGradient, exact: Option<CocoerciveMap>) -> Self {
        Self {
            kind: OracleKind::Composite(composite),
            exact,
        }
    }

    pub fn exact_map(&self) -> Option<&CocoerciveMap> {
        self.exact.as_ref()
    }

    pub fn is_exact(&self) -> bool {
        matches!(self.kind, OracleKind::Exact)
    }

    pub fn ledger(&self) -> Option<&SampleLedger> {
        match &self.kind {
            OracleKind::EmpiricalQuadratic { ledger, .. } => Some(ledger),
            _ => None,
        }
    }

    pub fn batch_rule(&self) -> Option<&BatchRule> {
        match &self.kind {
            OracleKind::EmpiricalQuadratic { batch, .. } => Some(batch),
            _ => None,
        }
    }

    /// Declared multiplicative variance factor (`tau_n`); zero across the
    /// built-in kinds, whose variance envelopes do not involve the distance
    /// of the forward values to a reference.
    pub fn declared_tau(&self) -> Rule {
        Rule::zero()
    }

    /// Envelope on the conditional variance where declared analytically.
    pub fn zeta_envelope(&self) -> Option<Rule> {
        match &self.kind {
            OracleKind::Exact => Some(Rule::zero()),
            OracleKind::AdditiveNoise { scale, .. } => Some(scale.square()),
            OracleKind::EmpiricalQuadratic { .. } => None,
            OracleKind::Composite(c) => {
                let mut acc = Rule::zero();
                for part in &c.parts {
                    let env = part.zeta_envelope()?;
                    // conservative: sum of envelopes only representable when
                    // one side is zero
                    acc = match (acc.canon(), env.canon()) {
                        (Rule::Constant(0.0), e) => e,
                        (a, Rule::Constant(0.0)) => a,
                        _ => return None,
                    };
                }
                Some(acc)
            }
        }
    }

    /// Envelope on the conditional bias norm where declared analytically.
    /// Exact and additive-noise oracles are unbiased.
    pub fn bias_envelope(&self) -> Option<Rule> {
        match &self.kind {
            OracleKind::Exact | OracleKind::AdditiveNoise { .. } => Some(Rule::zero()),
            OracleKind::EmpiricalQuadratic { .. } => None,
            OracleKind::Composite(c) => {
                for part in &c.parts {
                    match part.bias_envelope() {
                        Some(r) if matches!(r.canon(), Rule::Constant(z) if z == 0.0) => {}
                        _ => return None,
                    }
                }
                Some(Rule::zero())
            }
        }
    }

    /// The estimate `u_n` at the current point. Empirical oracles advance
    /// their ledger; steps must be taken in increasing order of `n`.
    pub fn estimate(&mut self, x: &DVector<f64>, n: usize) -> Result<DVector<f64>> {
        match &mut self.kind {
            OracleKind::Exact => self
                .exact
                .as_ref()
                .expect("exact oracle has a map")
                .apply(x),
            OracleKind::AdditiveNoise { shape, scale, seed } => {
                let base = self
                    .exact
                    .as_ref()
                    .expect("noisy oracle has a base map")
                    .apply(x)?;
                let mut rng = stream_rng(mix_seed(&[*seed, 0x6f_72_61_63]), n as u64);
                let noise = sample_shape(&mut rng, *shape, x.len());
                Ok(base + noise * scale.eval(n))
            }
            OracleKind::EmpiricalQuadratic { ledger, batch } => {
                let prefix = batch.eval(n);
                let total = batch.eval(n + 1);
                if ledger.count() > total {
                    return Err(Error::Reproducibility(format!(
                        "ledger holds {} samples but step {n} uses only {total}; steps must advance in order",
                        ledger.count()
                    )));
                }
                ledger.advance_to(prefix)?;
                ledger.advance_to(total)?;
                let (q, r) = ledger.current_sums();
                Ok((q * x - r) / total as f64)
            }
            OracleKind::Composite(c) => {
                let mut stacked = DVector::zeros(c.dims.iter().sum());
                let mut off = 0;
                for (part, &d) in c.parts.iter_mut().zip(&c.dims) {
                    let slice = x.rows(off, d).into_owned();
                    let est = part.estimate(&slice, n)?;
                    stacked.rows_mut(off, d).copy_from(&est);
                    off += d;
                }
                (c.transform)(&stacked)
            }
        }
    }

    /// Exact conditional bias `E[u_n | past] - Bx` of the estimate just
    /// produced at step `n`, available for the empirical oracle (and zero
    /// for the unbiased kinds).
    pub fn last_bias(&self, x: &DVector<f64>) -> Result<Option<DVector<f64>>> {
        match &self.kind {
            OracleKind::Exact | OracleKind::AdditiveNoise { .. } => {
                Ok(Some(DVector::zeros(x.len())))
            }
            OracleKind::EmpiricalQuadratic { ledger, .. } => {
                if ledger.count() == 0 {
                    return Ok(None);
                }
                let (pq, pr) = ledger.prev_sums();
                let m_prev = ledger.prev_count() as f64;
                let q_centered = pq - ledger.expected_gram() * m_prev;
                let r_centered = pr - ledger.expected_cross() * m_prev;
                Ok(Some((q_centered * x - r_centered) / ledger.count() as f64))
            }
            OracleKind::Composite(c) => {
                let mut stacked = DVector::zeros(c.dims.iter().sum());
                let mut off = 0;
                for (part, &d) in c.parts.iter().zip(&c.dims) {
                    let slice = x.rows(off, d).into_owned();
                    match part.last_bias(&slice)? {
                        Some(b) => stacked.rows_mut(off, d).copy_from(&b),
                        None => return Ok(None),
                    }
                    off += d;
                }
                Ok(Some((c.transform)(&stacked)?))
            }
        }
    }

    /// One conditional resample of `u_n` with the past frozen and the fresh
    /// randomness drawn from `trial_seed`'s stream.
    fn resample(&self, x: &DVector<f64>, n: usize, trial_seed: u64) -> Result<DVector<f64>> {
        match &self.kind {
            OracleKind::Exact => self.exact.as_ref().unwrap().apply(x),
            OracleKind::AdditiveNoise { shape, scale, .. } => {
                let base = self.exact.as_ref().unwrap().apply(x)?;
                let mut rng = stream_rng(trial_seed, n as u64);
                let noise = sample_shape(&mut rng, *shape, x.len());
                Ok(base + noise * scale.eval(n))
            }
            OracleKind::EmpiricalQuadratic { ledger, batch } => {
                let prefix = batch.eval(n);
                let total = batch.eval(n + 1);
                let (pq, pr) = ledger.sums_at(prefix);
                let mut acc = &pq * x - pr;
                let mut rng = stream_rng(trial_seed, n as u64);
                for _ in prefix..total {
                    let k = ledger.k_dist().sample(&mut rng);
                    let z = ledger.z_dist().sample(&mut rng);
                    acc += k.tr_mul(&(&k * x - z));
                }
                Ok(acc / total as f64)
            }
            OracleKind::Composite(c) => {
                let mut stacked = DVector::zeros(c.dims.iter().sum());
                let mut off = 0;
                for (part, &d) in c.parts.iter().zip(&c.dims) {
                    let slice = x.rows(off, d).into_owned();
                    let est = part.resample(&slice, n, mix_seed(&[trial_seed, off as u64]))?;
                    stacked.rows_mut(off, d).copy_from(&est);
                    off += d;
                }
                (c.transform)(&stacked)
            }
        }
    }
}

/// Free-function form of [`GradientOracle::estimate`].
pub fn next_estimate(o: &mut GradientOracle, x: &DVector<f64>, n: usize) -> Result<DVector<f64>> {
    o.estimate(x, n)
}

#[derive(Clone, Copy, Debug)]
pub struct MomentEstimate {
    /// `|| mean_t u_t - Bx ||`, the Monte Carlo conditional bias norm.
    pub bias_norm: f64,
    /// Sample estimate of `E[ ||u - E[u|past]||^2 | past ]`.
    pub variance: f64,
    pub bias_se: f64,
    pub variance_se: f64,
    pub trials: usize,
}

/// Monte Carlo conditional moments at `(x, n)`: the draw history before step
/// `n` is frozen and only the fresh randomness of step `n` is resampled
/// across trials. Trials fan out across workers; the reduction runs in a
/// fixed order so results do not depend on worker count.
pub fn estimate_conditional_moments(
    oracle: &GradientOracle,
    x: &DVector<f64>,
    n: usize,
    trials: usize,
    base_seed: u64,
) -> Result<MomentEstimate> {
    if trials < 2 {
        return Err(Error::Parameter("need at least 2 trials".into()));
    }
    let draws: Vec<DVector<f64>> = (0..trials)
        .into_par_iter()
        .map(|t| oracle.resample(x, n, mix_seed(&[base_seed, 0x6d_63, t as u64])))
        .collect::<Result<Vec<_>>>()?;
    let dim = x.len();
    let mut mean = DVector::zeros(draws[0].len());
    for d in &draws {
        mean += d;
    }
    mean /= trials as f64;
    let sq_devs: Vec<f64> = draws.iter().map(|d| (d - &mean).norm_squared()).collect();
    let variance = sq_devs.iter().sum::<f64>() / (trials as f64 - 1.0);
    let var_of_sq = {
        let m = sq_devs.iter().sum::<f64>() / trials as f64;
        sq_devs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (trials as f64 - 1.0)
    };
    let exact = oracle
        .exact_map()
        .ok_or_else(|| Error::Parameter("oracle has no exact map for bias reference".into()))?;
    let bx = if exact.dim() == dim {
        exact.apply(x)?
    } else {
        return Err(Error::Shape("oracle exact map dimension mismatch".into()));
    };
    let bias_norm = (&mean - bx).norm();
    Ok(MomentEstimate {
        bias_norm,
        variance,
        bias_se: (variance / trials as f64).sqrt(),
        variance_se: (var_of_sq / trials as f64).sqrt(),
        trials,
    })
}

/// Full pre-run certificate: schedule admissibility plus the summability
/// clauses tying the perturbation envelope and the oracle's declared bias
/// and variance envelopes to the relaxation sequence.
pub fn certify_run(
    sched: &IterationSchedule,
    theta: f64,
    oracle: &GradientOracle,
    perturb: &PerturbationSource,
) -> Result<Certificate> {
    let mut clauses = admissibility_certificate(sched, theta)?.clauses;

    // sum lambda_n * envelope(||a_n||_L2) < inf
    let env = perturb.envelope();
    let (pass, horizon) = match product_summable(&sched.lambda, &env) {
        Some(p) => (p, None),
        None => {
            let (ok, _) = numeric_summable(
                |n| sched.lambda.eval(n) * env.eval(n),
                CERT_NUMERIC_HORIZON,
            );
            (ok, Some(CERT_NUMERIC_HORIZON))
        }
    };
    let mut c = CertificateClause::new(
        "perturbation_summable",
        pass,
        format!("lambda rule {:?} x perturbation envelope {:?}", sched.lambda, env),
    );
    c.checked_up_to = horizon;
    clauses.push(c);

    // sum sqrt(lambda_n) * bias_n < inf
    let sqrt_lambda = sched.lambda.sqrt();
    let bias_clause = match oracle.bias_envelope() {
        Some(env) => {
            let pass = product_summable(&sqrt_lambda, &env).unwrap_or(false);
            CertificateClause::new(
                "bias_summable",
                pass,
                format!("declared bias envelope {env:?}"),
            )
        }
        None => {
            // Growing-batch empirical oracle: the bias envelope follows the
            // sample-size orders; summability needs kappa > 1 - delta.
            match (&sched.lambda.canon(), oracle.batch_rule()) {
                (Rule::Power { exponent, .. }, Some(batch)) => {
                    let kappa = -exponent;
                    let delta = batch.exponent - 1.0;
                    let pass = delta > 0.0 && kappa > 1.0 - delta && kappa <= 1.0;
                    CertificateClause::new(
                        "bias_summable",
                        pass,
                        format!(
                            "empirical oracle bias order ~ n^-(1+delta)/2 with delta = {delta}; requires kappa = {kappa} > 1 - delta"
                        ),
                    )
                }
                _ => CertificateClause::new(
                    "bias_summable",
                    false,
                    "cannot certify bias summability for this oracle/schedule pairing".into(),
                ),
            }
        }
    };
    clauses.push(bias_clause);

    // (lambda_n zeta_n) in the square-root-summable class
    let zeta_clause = match oracle.zeta_envelope() {
        Some(env) => {
            let prod_sqrt = sqrt_lambda.clone();
            let pass = product_summable(&prod_sqrt, &env.sqrt()).unwrap_or(false);
            CertificateClause::new(
                "variance_envelope_summable",
                pass,
                format!("declared variance envelope {env:?}"),
            )
        }
        None => match (&sched.lambda.canon(), oracle.batch_rule()) {
            (Rule::Power { exponent, .. }, Some(batch)) => {
                let kappa = -exponent;
                let delta = batch.exponent - 1.0;
                // zeta_n ~ n^-(2+delta): sqrt(lambda_n zeta_n) ~ n^-(kappa+2+delta)/2
                let pass = kappa + 2.0 + delta > 2.0;
                CertificateClause::new(
                    "variance_envelope_summable",
                    pass,
                    format!(
                        "empirical oracle variance order ~ n^-(2+delta) with delta = {delta}, kappa = {kappa}"
                    ),
                )
            }
            _ => CertificateClause::new(
                "variance_envelope_summable",
                false,
                "cannot certify variance envelope for this oracle/schedule pairing".into(),
            ),
        },
    };
    clauses.push(zeta_clause);

    // drift summability for varying resolvent families
    let alpha_ok = product_summable(&sched.lambda.sqrt(), &sched.alpha);
    let beta_ok = product_summable(&sched.lambda, &sched.beta);
    let (pass, horizon) = match (alpha_ok, beta_ok) {
        (Some(a), Some(b)) => (a && b, None),
        _ => {
            let (a_ok, _) = numeric_summable(
                |n| sched.lambda.eval(n).sqrt() * sched.alpha.eval(n),
                CERT_NUMERIC_HORIZON,
            );
            let (b_ok, _) = numeric_summable(
                |n| sched.lambda.eval(n) * sched.beta.eval(n),
                CERT_NUMERIC_HORIZON,
            );
            (a_ok && b_ok, Some(CERT_NUMERIC_HORIZON))
        }
    };
    let mut c = CertificateClause::new(
        "resolvent_drift_summable",
        pass,
        format!("alpha {:?}, beta {:?}", sched.alpha, sched.beta),
    );
    c.checked_up_to = horizon;
    clauses.push(c);

    Ok(Certificate::from_clauses(clauses))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_schedule_at_zero_is_one() {
        let r = Rule::Power {
            scale: 1.0,
            exponent: -0.9,
        };
        assert_eq!(r.eval(0), 1.0);
    }

    #[test]
    fn constant_schedule_everywhere() {
        let s = IterationSchedule::new(
            Rule::Constant(1.0),
            Rule::Constant(1.5),
            Rule::zero(),
        )
        .unwrap();
        for n in [0, 3, 1000] {
            assert_eq!(s.eval(n).gamma, 1.5);
        }
    }

    #[test]
    fn batch_rule_worked_values() {
        let b = BatchRule::new(1.0, 1.2).unwrap();
        assert_eq!(b.eval(0), 1);
        assert_eq!(b.eval(1), 2);
        assert_eq!(b.eval(2), 4);
        let mut prev = b.eval(0);
        for n in 1..=10_000 {
            let m = b.eval(n);
            assert!(m > prev, "not strictly increasing at {n}");
            prev = m;
        }
    }

    #[test]
    fn batch_rule_rejects_plateaus() {
        // small c plateaus at the ceil
        assert!(BatchRule::new(0.01, 1.2).is_err());
    }

    #[test]
    fn growing_batch_schedule_validates_kappa_window() {
        assert!(growing_batch_schedule(0.2, 0.9, 1.0, 1.0).is_ok());
        let err = growing_batch_schedule(0.2, 0.5, 1.0, 1.0).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("kappa"), "unexpected message {msg}");
    }

    #[test]
    fn admissibility_worked_examples() {
        // pass: (1+0) * 1.5 < 2
        let s = IterationSchedule::constant(1.0, 1.5).unwrap();
        assert!(admissibility_certificate(&s, 1.0).unwrap().pass);

        // fail: gamma = 2.0 is not < 2 theta
        let s = IterationSchedule::constant(1.0, 2.0).unwrap();
        let cert = admissibility_certificate(&s, 1.0).unwrap();
        assert!(!cert.pass);
        assert!(cert.failing().iter().any(|c| c.name == "step_size_bound"));

        // fail: (1 + 0.5) * 1.5 = 2.25 >= 2
        let s = IterationSchedule::new(
            Rule::Constant(1.0),
            Rule::Constant(1.5),
            Rule::Constant(0.5),
        )
        .unwrap();
        let cert = admissibility_certificate(&s, 1.0).unwrap();
        assert!(!cert.pass);
        assert!(cert.failing().iter().any(|c| c.name == "step_size_bound"));
    }

    #[test]
    fn admissibility_boundary_is_strict() {
        // (1 + tau) gamma == 2 theta exactly must be rejected
        let s = IterationSchedule::new(
            Rule::Constant(1.0),
            Rule::Constant(1.0),
            Rule::Constant(1.0),
        )
        .unwrap();
        let cert = admissibility_certificate(&s, 1.0).unwrap();
        assert!(!cert.pass);
    }

    #[test]
    fn vanishing_relaxation_needs_constant_gamma() {
        let lam = Rule::Power {
            scale: 1.0,
            exponent: -0.9,
        };
        let s = IterationSchedule::new(lam.clone(), Rule::Constant(1.0), Rule::zero()).unwrap();
        assert!(admissibility_certificate(&s, 1.0).unwrap().pass);

        let s = IterationSchedule::new(
            lam,
            Rule::Geometric {
                scale: 1.0,
                ratio: 0.99,
            },
            Rule::zero(),
        )
        .unwrap();
        let cert = admissibility_certificate(&s, 1.0).unwrap();
        assert!(
            !cert.pass,
            "decaying gamma with vanishing lambda must fail the relaxation clause"
        );
    }

    #[test]
    fn ledger_draws_are_replayable_bitwise() {
        let kd = MatrixDist::GaussianIid {
            rows: 3,
            cols: 2,
            std: 1.0,
        };
        let zd = VectorDist::Gaussian {
            mean: DVector::zeros(3),
            std: 0.5,
        };
        let ledger = SampleLedger::new(99, kd.clone(), zd.clone()).unwrap();
        let other = SampleLedger::new(99, kd, zd).unwrap();
        for i in [0usize, 1, 5, 100] {
            let (k1, z1) = ledger.draw_at(i);
            let (k2, z2) = other.draw_at(i);
            assert_eq!(k1, k2);
            assert_eq!(z1, z2);
        }
        // and draws earlier in the index sequence are unaffected by later ones
        let early = ledger.draw_at(2);
        let _ = ledger.draw_at(1000);
        assert_eq!(ledger.draw_at(2), early);
    }

    #[test]
    fn ledger_running_sums_match_resummation() {
        let kd = MatrixDist::GaussianIid {
            rows: 2,
            cols: 2,
            std: 1.0,
        };
        let zd = VectorDist::Gaussian {
            mean: DVector::from_vec(vec![0.1, -0.2]),
            std: 0.3,
        };
        let mut ledger = SampleLedger::new(7, kd, zd).unwrap();
        ledger.advance_to(5).unwrap();
        ledger.advance_to(12).unwrap();
        let (q, r) = ledger.current_sums();
        let (q2, r2) = ledger.sums_at(12);
        assert!((q - &q2).norm() <= 1e-12 * (1.0 + q2.norm()));
        assert!((r - &r2).norm() <= 1e-12 * (1.0 + r2.norm()));
        assert_eq!(ledger.prev_count(), 5);
        let (pq, _) = ledger.prev_sums();
        let (pq2, _) = ledger.sums_at(5);
        assert!((pq - &pq2).norm() <= 1e-12 * (1.0 + pq2.norm()));
    }

    #[test]
    fn exact_oracle_returns_map_values() {
        let mut o = GradientOracle::exact(CocoerciveMap::identity(2));
        let x = DVector::from_vec(vec![2.0, -1.0]);
        assert_eq!(o.estimate(&x, 0).unwrap(), x);
    }

    #[test]
    fn degenerate_empirical_oracle_is_exact() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0]);
        let z = DVector::from_vec(vec![0.3, -0.7]);
        let ledger = SampleLedger::new(
            1,
            MatrixDist::Constant(k.clone()),
            VectorDist::Constant(z.clone()),
        )
        .unwrap();
        let mut o =
            GradientOracle::empirical_quadratic(ledger, BatchRule::new(1.0, 1.2).unwrap()).unwrap();
        let x = DVector::from_vec(vec![1.0, 1.0]);
        let want = k.tr_mul(&(&k * &x - &z));
        for n in 0..4 {
            let got = o.estimate(&x, n).unwrap();
            assert!((&got - &want).norm() <= 1e-12 * (1.0 + want.norm()), "n = {n}");
            // zero-variance oracle: bias is exactly zero
            let bias = o.last_bias(&x).unwrap().unwrap();
            assert!(bias.norm() <= 1e-12);
        }
    }

    #[test]
    fn empirical_oracle_matches_bruteforce_resummation() {
        let ledger = SampleLedger::new(
            42,
            MatrixDist::GaussianIid {
                rows: 3,
                cols: 2,
                std: 1.0,
            },
            VectorDist::Gaussian {
                mean: DVector::zeros(3),
                std: 1.0,
            },
        )
        .unwrap();
        let batch = BatchRule::new(1.0, 1.2).unwrap();
        let reference = ledger.clone();
        let mut o = GradientOracle::empirical_quadratic(ledger, batch.clone()).unwrap();
        let x = DVector::from_vec(vec![0.4, -1.3]);
        let mut got = DVector::zeros(2);
        for n in 0..=3 {
            got = o.estimate(&x, n).unwrap();
        }
        // straightforward re-summation over the same draws
        let total = batch.eval(4);
        let mut want = DVector::zeros(2);
        for i in 0..total {
            let (k, z) = reference.draw_at(i);
            want += k.tr_mul(&(&k * &x - z));
        }
        want /= total as f64;
        assert!((got - &want).norm() <= 1e-12 * (1.0 + want.norm()));
    }

    #[test]
    fn empirical_sample_accounting_is_exact() {
        let ledger = SampleLedger::new(
            5,
            MatrixDist::GaussianIid {
                rows: 2,
                cols: 2,
                std: 1.0,
            },
            VectorDist::Constant(DVector::zeros(2)),
        )
        .unwrap();
        let batch = BatchRule::new(1.0, 1.2).unwrap();
        let mut o = GradientOracle::empirical_quadratic(ledger, batch.clone()).unwrap();
        let x = DVector::from_vec(vec![1.0, 0.0]);
        for n in 0..6 {
            o.estimate(&x, n).unwrap();
            assert_eq!(o.ledger().unwrap().count(), batch.eval(n + 1));
            assert_eq!(o.ledger().unwrap().prev_count(), batch.eval(n));
        }
    }

    #[test]
    fn empirical_bias_identity_with_analytic_moments() {
        // i.i.d. standard normal entries give E[K'K] = rows * I and
        // E[K'z] = 0; the realized conditional bias must equal the centered
        // prefix sums applied to x, exactly to roundoff.
        let rows = 3;
        let ledger = SampleLedger::new(
            1234,
            MatrixDist::GaussianIid {
                rows,
                cols: 2,
                std: 1.0,
            },
            VectorDist::Gaussian {
                mean: DVector::zeros(rows),
                std: 1.0,
            },
        )
        .unwrap();
        let batch = BatchRule::new(1.0, 1.2).unwrap();
        let reference = ledger.clone();
        let mut o = GradientOracle::empirical_quadratic(ledger, batch.clone()).unwrap();
        let x = DVector::from_vec(vec![0.8, -0.6]);
        for n in 0..5 {
            o.estimate(&x, n).unwrap();
            let bias = o.last_bias(&x).unwrap().unwrap();
            // independent re-summation of Q_{0,m_n} x - r_{0,m_n}
            let prefix = batch.eval(n);
            let total = batch.eval(n + 1) as f64;
            let mut want = DVector::zeros(2);
            for i in 0..prefix {
                let (k, z) = reference.draw_at(i);
                let centered_q = k.tr_mul(&k) - DMatrix::identity(2, 2) * rows as f64;
                want += centered_q * &x - k.tr_mul(&z);
            }
            want /= total;
            assert!(
                (&bias - &want).norm() <= 1e-10 * (1.0 + want.norm()),
                "n = {n}: got {bias:?}, want {want:?}"
            );
        }
    }

    #[test]
    fn conditional_moments_of_exact_oracle_vanish() {
        let o = GradientOracle::exact(CocoerciveMap::identity(2));
        let m = estimate_conditional_moments(&o, &DVector::from_vec(vec![1.0, 2.0]), 3, 16, 9)
            .unwrap();
        assert_eq!(m.bias_norm, 0.0);
        assert_eq!(m.variance, 0.0);
    }

    #[test]
    fn conditional_moments_of_degenerate_empirical_vanish() {
        let k = DMatrix::identity(2, 2);
        let ledger = SampleLedger::new(
            3,
            MatrixDist::Constant(k),
            VectorDist::Constant(DVector::zeros(2)),
        )
        .unwrap();
        let o = GradientOracle::empirical_quadratic(ledger, BatchRule::new(1.0, 1.2).unwrap())
            .unwrap();
        let m =
            estimate_conditional_moments(&o, &DVector::from_vec(vec![1.0, -1.0]), 2, 32, 4).unwrap();
        assert!(m.bias_norm <= 1e-14);
        assert!(m.variance <= 1e-28);
    }

    #[test]
    fn perturbation_zero_kind_is_exactly_zero() {
        let p = PerturbationSource::Zero;
        assert_eq!(p.next(7, 3), DVector::zeros(3));
    }

    #[test]
    fn perturbation_ball_respects_magnitude_bound() {
        let p = PerturbationSource::decaying(
            NoiseShape::Ball,
            Rule::Geometric {
                scale: 1.0,
                ratio: 0.5,
            },
            11,
        );
        let v = p.next(4, 5);
        assert!(v.norm() <= 2.0f64.powi(-4) + 1e-15);
    }

    #[test]
    fn perturbation_replay_is_bitwise() {
        let p = PerturbationSource::decaying(
            NoiseShape::GaussianUnit,
            Rule::Power {
                scale: 0.3,
                exponent: -1.5,
            },
            21,
        );
        for n in 0..10 {
            assert_eq!(p.next(n, 4), p.next(n, 4));
        }
    }

    #[test]
    fn certify_run_accepts_reference_stochastic_setup() {
        let sched = growing_batch_schedule(0.2, 0.9, 1.0, 0.5).unwrap();
        let ledger = SampleLedger::new(
            0,
            MatrixDist::GaussianIid {
                rows: 3,
                cols: 2,
                std: 1.0,
            },
            VectorDist::Constant(DVector::zeros(3)),
        )
        .unwrap();
        let oracle =
            GradientOracle::empirical_quadratic(ledger, sched.batch.clone().unwrap()).unwrap();
        let cert = certify_run(&sched, 1.0 / 3.0, &oracle, &PerturbationSource::Zero).unwrap();
        assert!(cert.pass, "failing clauses: {:?}", cert.failing());
    }

    #[test]
    fn certify_run_rejects_nonsummable_perturbation() {
        let sched = IterationSchedule::constant(1.0, 1.0).unwrap();
        let oracle = GradientOracle::exact(CocoerciveMap::identity(2));
        let perturb = PerturbationSource::decaying(NoiseShape::Ball, Rule::Constant(0.1), 3);
        let cert = certify_run(&sched, 1.0, &oracle, &perturb).unwrap();
        assert!(!cert.pass);
        assert!(cert
            .failing()
            .iter()
            .any(|c| c.name == "perturbation_summable"));
    }

    #[test]
    fn conditional_mean_satisfies_moment_inequalities() {
        // ||E[u|past]|| <= E[||u|| | past] and ||E[u|past]||^2 <= E[||u||^2 | past],
        // checked on the Monte Carlo resamples of a noisy oracle.
        let o = GradientOracle::additive_noise(
            CocoerciveMap::identity(3),
            NoiseShape::GaussianUnit,
            Rule::Constant(0.7),
            55,
        );
        let x = DVector::from_vec(vec![0.4, -0.2, 1.0]);
        let n = 2;
        let trials = 4000;
        let mut mean = DVector::zeros(3);
        let mut norm_sum = 0.0;
        let mut sq_sum = 0.0;
        for t in 0..trials {
            let u = o.resample(&x, n, mix_seed(&[9, t])).unwrap();
            norm_sum += u.norm();
            sq_sum += u.norm_squared();
            mean += u;
        }
        mean /= trials as f64;
        assert!(mean.norm() <= norm_sum / trials as f64 + 1e-12);
        assert!(mean.norm_squared() <= sq_sum / trials as f64 + 1e-12);
    }

    #[test]
    fn moment_estimation_is_deterministic_across_worker_counts() {
        let ledger = SampleLedger::new(
            77,
            MatrixDist::GaussianIid {
                rows: 2,
                cols: 2,
                std: 1.0,
            },
            VectorDist::Gaussian {
                mean: DVector::zeros(2),
                std: 1.0,
            },
        )
        .unwrap();
        let o = GradientOracle::empirical_quadratic(ledger, BatchRule::new(1.0, 1.2).unwrap())
            .unwrap();
        let x = DVector::from_vec(vec![1.0, 0.5]);
        let a = estimate_conditional_moments(&o, &x, 4, 64, 123).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| estimate_conditional_moments(&o, &x, 4, 64, 123).unwrap());
        assert_eq!(a.bias_norm.to_bits(), b.bias_norm.to_bits());
        assert_eq!(a.variance.to_bits(), b.variance.to_bits());
    }
}
