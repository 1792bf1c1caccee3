//! Proximity operators, resolvents, metric proximity operators, conjugate
//! handling via the variable-metric Moreau decomposition, and sampled
//! property checkers (cocoercivity, firm nonexpansiveness).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::spaces::{operator_norm, SpdMetric, DEFAULT_NORM_MAX_ITER, DEFAULT_NORM_TOL};

/// Value rule of a user-supplied convex function.
pub type EvalRule = Box<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
/// `(x, gamma) -> prox_{gamma f}(x)`.
pub type ProxRule = Box<dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync>;
/// `(x, U) -> prox^U_f(x)` for non-scalar metrics.
pub type MetricProxRule = Box<dyn Fn(&DVector<f64>, &SpdMetric) -> DVector<f64> + Send + Sync>;
/// `(x, gamma) -> J_{gamma A} x` for black-box operators.
pub type ResolventRule = Arc<dyn Fn(&DVector<f64>, f64) -> Result<DVector<f64>> + Send + Sync>;
/// `x -> Bx` for black-box single-valued maps.
pub type ForwardRule = Arc<dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync>;

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// User-supplied function with its own prox rule. The closure must tolerate
/// concurrent invocation unless `thread_safe` is false, in which case the
/// engines serialize runs that use it.
pub struct CustomProx {
    pub eval: EvalRule,
    /// `prox_{gamma f}(x)`.
    pub prox: ProxRule,
    /// Optional metric prox for non-scalar metrics.
    pub metric_prox: Option<MetricProxRule>,
    pub thread_safe: bool,
    pub label: String,
}

impl std::fmt::Debug for CustomProx {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CustomProx({})", self.label)
    }
}

/// A convex function exposed through its value and its (metric) proximity
/// map. Indicators evaluate to `+inf` outside their domain.
#[derive(Clone, Debug)]
pub enum ProxFunction {
    Zero,
    /// `weight * ||x||_1`
    L1 { weight: f64 },
    /// `(weight / 2) * ||x - center||^2`
    SquaredL2 { weight: f64, center: DVector<f64> },
    /// Indicator of the box `[lo, hi]` (component-wise).
    BoxIndicator { lo: DVector<f64>, hi: DVector<f64> },
    Custom(Arc<CustomProx>),
}

/// Sweep cap for the coordinate-descent fallback used by separable
/// functions under a non-diagonal metric.
const CD_MAX_SWEEPS: usize = 20_000;

impl ProxFunction {
    pub fn l1(weight: f64) -> Result<Self> {
        if weight < 0.0 {
            return Err(Error::Parameter("l1 weight must be >= 0".into()));
        }
        Ok(Self::L1 { weight })
    }

    pub fn squared_l2(weight: f64, center: DVector<f64>) -> Result<Self> {
        if weight <= 0.0 {
            return Err(Error::Parameter("squared_l2 weight must be > 0".into()));
        }
        Ok(Self::SquaredL2 { weight, center })
    }

    pub fn box_indicator(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Shape("box bounds must have equal length".into()));
        }
        if lo.iter().zip(hi.iter()).any(|(l, h)| l > h) {
            return Err(Error::Parameter("box needs lo <= hi".into()));
        }
        Ok(Self::BoxIndicator { lo, hi })
    }

    pub fn uniform_box(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::box_indicator(
            DVector::from_element(dim, lo),
            DVector::from_element(dim, hi),
        )
    }

    pub fn thread_safe(&self) -> bool {
        match self {
            Self::Custom(c) => c.thread_safe,
            _ => true,
        }
    }

    /// Extended-real value of the function at `x`.
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::L1 { weight } => weight * x.iter().map(|v| v.abs()).sum::<f64>(),
            Self::SquaredL2 { weight, center } => 0.5 * weight * (x - center).norm_squared(),
            Self::BoxIndicator { lo, hi } => {
                // Inclusion checked with a tiny slack so points produced by the
                // projection itself evaluate as feasible.
                let eps = 1e-12;
                for i in 0..x.len() {
                    if x[i] < lo[i] - eps || x[i] > hi[i] + eps {
                        return f64::INFINITY;
                    }
                }
                0.0
            }
            Self::Custom(c) => (c.eval)(x),
        }
    }

    /// `prox_{gamma f}(x)`: minimizer of `f(y) + ||x - y||^2 / (2 gamma)`.
    pub fn prox(&self, x: &DVector<f64>, gamma: f64) -> Result<DVector<f64>> {
        if gamma <= 0.0 {
            return Err(Error::Parameter(format!("prox needs gamma > 0, got {gamma}")));
        }
        Ok(match self {
            Self::Zero => x.clone(),
            Self::L1 { weight } => x.map(|v| soft_threshold(v, gamma * weight)),
            Self::SquaredL2 { weight, center } => {
                self.check_dim(center.len(), x)?;
                // y + gamma*w*(y - c) = x
                (x + center * (gamma * weight)) / (1.0 + gamma * weight)
            }
            Self::BoxIndicator { lo, hi } => {
                self.check_dim(lo.len(), x)?;
                DVector::from_fn(x.len(), |i, _| x[i].clamp(lo[i], hi[i]))
            }
            Self::Custom(c) => (c.prox)(x, gamma),
        })
    }

    /// `prox^U_f(x)`: minimizer of `f(y) + ||x - y||^2_U / 2`.
    pub fn metric_prox(&self, x: &DVector<f64>, u: &SpdMetric) -> Result<DVector<f64>> {
        if x.len() != u.dim() {
            return Err(Error::Shape(format!(
                "metric dim {} does not match vector dim {}",
                u.dim(),
                x.len()
            )));
        }
        // A scalar metric sigma*Id is exactly prox with gamma = 1/sigma.
        if let Some(sigma) = u.scalar_multiple() {
            return self.prox(x, 1.0 / sigma);
        }
        match self {
            Self::Zero => Ok(x.clone()),
            Self::SquaredL2 { weight, center } => {
                self.check_dim(center.len(), x)?;
                // (w*Id + U) y = w*c + U*x, solved by dense factorization.
                let dim = x.len();
                let lhs = u.matrix() + DMatrix::identity(dim, dim) * *weight;
                let rhs = u.apply(x)? + center * *weight;
                lhs.lu()
                    .solve(&rhs)
                    .ok_or_else(|| Error::Parameter("metric prox system is singular".into()))
            }
            Self::L1 { weight } => Ok(self.separable_cd(x, u, |_, target, step| {
                soft_threshold(target, weight * step)
            })),
            Self::BoxIndicator { lo, hi } => {
                self.check_dim(lo.len(), x)?;
                Ok(self.separable_cd(x, u, |i, target, _| target.clamp(lo[i], hi[i])))
            }
            Self::Custom(c) => match &c.metric_prox {
                Some(rule) => Ok(rule(x, u)),
                None => Err(Error::Parameter(format!(
                    "custom function {} has no metric prox rule and the metric is not scalar",
                    c.label
                ))),
            },
        }
    }

    /// Cyclic coordinate descent on `f(y) + (y-x)' U (y-x) / 2` for
    /// coordinate-separable `f`. `update(i, target, 1/U_ii)` returns the
    /// scalar minimizer of `f_i(t) + U_ii (t - target)^2 / 2`.
    fn separable_cd<F>(&self, x: &DVector<f64>, u: &SpdMetric, update: F) -> DVector<f64>
    where
        F: Fn(usize, f64, f64) -> f64,
    {
        let um = u.matrix();
        let dim = x.len();
        let mut y = x.clone();
        let scale = 1.0 + x.amax();
        for _ in 0..CD_MAX_SWEEPS {
            let mut max_delta = 0.0f64;
            for i in 0..dim {
                let uii = um[(i, i)];
                // off-diagonal part of [U (y - x)]_i
                let mut off = 0.0;
                for j in 0..dim {
                    if j != i {
                        off += um[(i, j)] * (y[j] - x[j]);
                    }
                }
                let target = x[i] - off / uii;
                let t = update(i, target, 1.0 / uii);
                max_delta = max_delta.max((t - y[i]).abs());
                y[i] = t;
            }
            if max_delta <= 1e-15 * scale {
                break;
            }
        }
        y
    }

    fn check_dim(&self, want: usize, x: &DVector<f64>) -> Result<()> {
        if x.len() != want {
            return Err(Error::Shape(format!(
                "function expects dim {want}, got {}",
                x.len()
            )));
        }
        Ok(())
    }
}

/// Moreau smoothing of `weight * ||.||_1` with parameter `rho` (the Huber
/// function), exposed with its closed-form prox. Its subdifferential is the
/// built-in varying-resolvent family: composing its prox with the
/// soft-threshold shows a pointwise drift of at most `weight * rho * sqrt(d)`.
pub fn smoothed_l1(weight: f64, rho: f64) -> Result<ProxFunction> {
    if weight < 0.0 || rho <= 0.0 {
        return Err(Error::Parameter(
            "smoothed l1 needs weight >= 0 and rho > 0".into(),
        ));
    }
    let huber = move |t: f64| -> f64 {
        if t.abs() <= weight * rho {
            t * t / (2.0 * rho)
        } else {
            weight * t.abs() - weight * weight * rho / 2.0
        }
    };
    let prox_scalar = move |x: f64, gamma: f64| -> f64 {
        if x.abs() <= weight * (rho + gamma) {
            x * rho / (rho + gamma)
        } else {
            x - gamma * weight * x.signum()
        }
    };
    Ok(ProxFunction::Custom(Arc::new(CustomProx {
        eval: Box::new(move |x| x.iter().map(|&t| huber(t)).sum()),
        prox: Box::new(move |x, gamma| x.map(|t| prox_scalar(t, gamma))),
        metric_prox: None,
        thread_safe: true,
        label: format!("smoothed_l1(weight={weight}, rho={rho})"),
    })))
}

/// `prox^{U^{-1}}_{g*}(v)` via the variable-metric Moreau decomposition:
/// `v - U * prox^U_g(U^{-1} v)`.
pub fn conjugate_prox(g: &ProxFunction, v: &DVector<f64>, u: &SpdMetric) -> Result<DVector<f64>> {
    // g = 0 has g* = indicator of the origin, whose prox is identically 0;
    // short-circuiting keeps this case exact.
    if matches!(g, ProxFunction::Zero) {
        return Ok(DVector::zeros(v.len()));
    }
    let p = g.metric_prox(&u.apply_inv(v)?, u)?;
    Ok(v - u.apply(&p)?)
}

/// A maximally monotone operator exposed through its resolvent
/// `J_{gamma A} = (Id + gamma A)^{-1}`.
#[derive(Clone)]
pub enum ResolventOperator {
    /// `A = subdifferential of f`; the resolvent is `prox_{gamma f}`.
    Subdifferential(ProxFunction),
    /// Black-box resolvent rule `(x, gamma) -> J_{gamma A} x`, valid for
    /// `gamma` inside the given closed range. Rules that are not safe for
    /// concurrent invocation must say so; the engines then serialize runs.
    Custom {
        rule: ResolventRule,
        gamma_range: (f64, f64),
        label: String,
        thread_safe: bool,
    },
}

impl std::fmt::Debug for ResolventOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Subdifferential(p) => write!(f, "Subdifferential({p:?})"),
            Self::Custom { label, .. } => write!(f, "Custom({label})"),
        }
    }
}

impl ResolventOperator {
    pub fn zero() -> Self {
        Self::Subdifferential(ProxFunction::Zero)
    }

    pub fn custom<F>(rule: F, gamma_range: (f64, f64), label: &str) -> Self
    where
        F: Fn(&DVector<f64>, f64) -> Result<DVector<f64>> + Send + Sync + 'static,
    {
        Self::Custom {
            rule: Arc::new(rule),
            gamma_range,
            label: label.to_string(),
            thread_safe: true,
        }
    }

    pub fn is_thread_safe(&self) -> bool {
        match self {
            Self::Subdifferential(f) => f.thread_safe(),
            Self::Custom { thread_safe, .. } => *thread_safe,
        }
    }

    pub fn apply(&self, x: &DVector<f64>, gamma: f64) -> Result<DVector<f64>> {
        match self {
            Self::Subdifferential(f) => f.prox(x, gamma),
            Self::Custom { rule, gamma_range, .. } => {
                if gamma < gamma_range.0 || gamma > gamma_range.1 {
                    return Err(Error::Parameter(format!(
                        "gamma {gamma} outside resolvent validity range [{}, {}]",
                        gamma_range.0, gamma_range.1
                    )));
                }
                rule(x, gamma)
            }
        }
    }
}

/// Resolvent evaluation as a free function mirroring the operation name.
pub fn resolvent(a: &ResolventOperator, x: &DVector<f64>, gamma: f64) -> Result<DVector<f64>> {
    a.apply(x, gamma)
}

/// A single-valued map with a declared cocoercivity constant, i.e.
/// `<x - y, Bx - By> >= theta ||Bx - By||^2` is expected to hold.
#[derive(Clone)]
pub enum CocoerciveKind {
    Zero,
    /// `x -> K'(Kx - z)`, the gradient of `||Kx - z||^2 / 2`.
    AffineGradient { k: DMatrix<f64>, z: DVector<f64> },
    /// `x -> Qx - r` with `Q` symmetric positive semidefinite.
    Quadratic { q: DMatrix<f64>, r: DVector<f64> },
    Custom { rule: ForwardRule, label: String },
}

impl std::fmt::Debug for CocoerciveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Zero => write!(f, "Zero"),
            Self::AffineGradient { k, .. } => {
                write!(f, "AffineGradient({}x{})", k.nrows(), k.ncols())
            }
            Self::Quadratic { q, .. } => write!(f, "Quadratic({})", q.nrows()),
            Self::Custom { label, .. } => write!(f, "Custom({label})"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CocoerciveMap {
    kind: CocoerciveKind,
    theta: f64,
    dim: usize,
}

impl CocoerciveMap {
    /// Zero map; cocoercive for every constant, recorded as infinity.
    pub fn zero(dim: usize) -> Self {
        Self {
            kind: CocoerciveKind::Zero,
            theta: f64::INFINITY,
            dim,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            kind: CocoerciveKind::Quadratic {
                q: DMatrix::identity(dim, dim),
                r: DVector::zeros(dim),
            },
            theta: 1.0,
            dim,
        }
    }

    /// Gradient of `||Kx - z||^2 / 2` with `theta = 1 / ||K||^2`.
    pub fn affine_gradient(k: DMatrix<f64>, z: DVector<f64>) -> Result<Self> {
        if k.nrows() != z.len() {
            return Err(Error::Shape("K rows must match z length".into()));
        }
        let norm = operator_norm(&k, DEFAULT_NORM_TOL, DEFAULT_NORM_MAX_ITER)?;
        let dim = k.ncols();
        let theta = if norm == 0.0 { f64::INFINITY } else { 1.0 / (norm * norm) };
        Ok(Self {
            kind: CocoerciveKind::AffineGradient { k, z },
            theta,
            dim,
        })
    }

    /// `x -> Qx - r` for symmetric PSD `Q`, with `theta = 1 / ||Q||`.
    pub fn quadratic(q: DMatrix<f64>, r: DVector<f64>) -> Result<Self> {
        if q.nrows() != q.ncols() || q.nrows() != r.len() {
            return Err(Error::Shape("Q must be square and match r".into()));
        }
        let norm = operator_norm(&q, DEFAULT_NORM_TOL, DEFAULT_NORM_MAX_ITER)?;
        let dim = q.nrows();
        let theta = if norm == 0.0 { f64::INFINITY } else { 1.0 / norm };
        Ok(Self {
            kind: CocoerciveKind::Quadratic { q, r },
            theta,
            dim,
        })
    }

    pub fn custom<F>(rule: F, theta: f64, dim: usize, label: &str) -> Result<Self>
    where
        F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync + 'static,
    {
        if theta <= 0.0 {
            return Err(Error::Parameter("cocoercivity constant must be > 0".into()));
        }
        Ok(Self {
            kind: CocoerciveKind::Custom {
                rule: Arc::new(rule),
                label: label.to_string(),
            },
            theta,
            dim,
        })
    }

    /// Override the declared constant (used by tests probing violations).
    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &CocoerciveKind {
        &self.kind
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!(
                "map expects dim {}, got {}",
                self.dim,
                x.len()
            )));
        }
        match &self.kind {
            CocoerciveKind::Zero => Ok(DVector::zeros(self.dim)),
            CocoerciveKind::AffineGradient { k, z } => Ok(k.tr_mul(&(k * x - z))),
            CocoerciveKind::Quadratic { q, r } => Ok(q * x - r),
            CocoerciveKind::Custom { rule, .. } => rule(x),
        }
    }

    /// Value of the potential whose gradient this map is, when one is known.
    pub fn potential(&self, x: &DVector<f64>) -> Option<f64> {
        match &self.kind {
            CocoerciveKind::Zero => Some(0.0),
            CocoerciveKind::AffineGradient { k, z } => Some(0.5 * (k * x - z).norm_squared()),
            CocoerciveKind::Quadratic { q, r } => Some(0.5 * x.dot(&(q * x)) - r.dot(x)),
            CocoerciveKind::Custom { .. } => None,
        }
    }
}

/// Not machine-checkable; consumed by run summaries only.
#[derive(Clone, Debug, Default)]
pub struct DemiregularityFlag {
    pub holds_for_a: bool,
    pub holds_for_b: bool,
    pub justification: String,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub samples: usize,
    pub violations: usize,
    /// Smallest slack seen across samples; negative values within the
    /// tolerance band are still passes.
    pub worst_margin: f64,
    pub pass: bool,
}

pub const PROPERTY_SLACK: f64 = 1e-9;

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample(StandardNormal))
}

/// Sampled check of `<x - y, Bx - By> >= theta ||Bx - By||^2` with slack
/// `1e-9 (1 + ||x - y||^2)`. Violations are reported, not thrown.
pub fn check_cocoercive(b: &CocoerciveMap, samples: usize, rng_seed: u64) -> Result<CheckReport> {
    if samples == 0 {
        return Err(Error::Parameter("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut worst = f64::INFINITY;
    let mut violations = 0;
    for _ in 0..samples {
        let x = normal_vec(&mut rng, b.dim());
        let y = normal_vec(&mut rng, b.dim());
        let d = &x - &y;
        let bd = b.apply(&x)? - b.apply(&y)?;
        let bd_sq = bd.norm_squared();
        // theta may be +inf for the zero map; its image differences vanish.
        let rhs = if bd_sq == 0.0 { 0.0 } else { b.theta() * bd_sq };
        let margin = d.dot(&bd) - rhs;
        worst = worst.min(margin);
        if margin < -PROPERTY_SLACK * (1.0 + d.norm_squared()) {
            violations += 1;
        }
    }
    Ok(CheckReport {
        samples,
        violations,
        worst_margin: worst,
        pass: violations == 0,
    })
}

/// Sampled check of `||Jx-Jy||^2 + ||(x-Jx)-(y-Jy)||^2 <= ||x-y||^2 + 1e-9`.
pub fn check_firmly_nonexpansive(
    a: &ResolventOperator,
    gamma: f64,
    samples: usize,
    rng_seed: u64,
    dim: usize,
) -> Result<CheckReport> {
    if samples == 0 {
        return Err(Error::Parameter("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut worst = f64::INFINITY;
    let mut violations = 0;
    for _ in 0..samples {
        let x = normal_vec(&mut rng, dim);
        let y = normal_vec(&mut rng, dim);
        let jx = a.apply(&x, gamma)?;
        let jy = a.apply(&y, gamma)?;
        let lhs = (&jx - &jy).norm_squared() + ((&x - &jx) - (&y - &jy)).norm_squared();
        let rhs = (&x - &y).norm_squared();
        let margin = rhs - lhs;
        worst = worst.min(margin);
        if margin < -PROPERTY_SLACK {
            violations += 1;
        }
    }
    Ok(CheckReport {
        samples,
        violations,
        worst_margin: worst,
        pass: violations == 0,
    })
}
