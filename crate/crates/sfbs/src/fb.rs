//! The relaxed, perturbed stochastic forward-backward iteration
//! `x_{n+1} = x_n + lambda_n (J_{gamma_n A}(x_n - gamma_n u_n) + a_n - x_n)`,
//! its varying-resolvent variant, and run orchestration with per-iteration
//! convergence audits.

use std::sync::Arc;

use nalgebra::DVector;

use crate::diagnostics::RunTrace;
use crate::error::{Error, Result};
use crate::operators::{CocoerciveMap, DemiregularityFlag, ResolventOperator};
use crate::spaces::SpdMetric;
use crate::stochastic::{GradientOracle, IterationSchedule, PerturbationSource};

/// Norm guard: the iteration aborts once the state leaves this ball.
pub const DIVERGENCE_NORM_BOUND: f64 = 1e12;

/// A monotone inclusion `0 in Ax + Bx` posed through the resolvent of `A`
/// and the (exact) cocoercive map `B`, with optional solution
/// representatives for auditing.
#[derive(Clone, Debug)]
pub struct FbProblem {
    pub a: ResolventOperator,
    pub b: CocoerciveMap,
    pub z_refs: Vec<DVector<f64>>,
    pub demiregularity: DemiregularityFlag,
    /// Inner product used by audits (distances, residual norms). `None`
    /// means Euclidean; the product-space embedding installs its renorming
    /// metric here.
    pub metric: Option<SpdMetric>,
}

impl FbProblem {
    pub fn new(a: ResolventOperator, b: CocoerciveMap) -> Self {
        Self {
            a,
            b,
            z_refs: Vec::new(),
            demiregularity: DemiregularityFlag::default(),
            metric: None,
        }
    }

    pub fn with_z_refs(mut self, z_refs: Vec<DVector<f64>>) -> Self {
        self.z_refs = z_refs;
        self
    }

    pub fn with_metric(mut self, metric: SpdMetric) -> Self {
        self.metric = Some(metric);
        self
    }

    pub fn with_demiregularity(mut self, flag: DemiregularityFlag) -> Self {
        self.demiregularity = flag;
        self
    }

    pub fn audit_norm(&self, v: &DVector<f64>) -> Result<f64> {
        match &self.metric {
            Some(m) => m.norm(v),
            None => Ok(v.norm()),
        }
    }
}

/// Iteration state: the index, the current point, and the last
/// pre-relaxation quantities (the resolvent output `t_n` and the perturbed
/// point `y_n = t_n + a_n`).
#[derive(Clone, Debug)]
pub struct FbState {
    pub n: usize,
    pub x: DVector<f64>,
    pub last_t: Option<DVector<f64>>,
    pub last_y: Option<DVector<f64>>,
}

impl FbState {
    pub fn initial(x0: DVector<f64>) -> Self {
        Self {
            n: 0,
            x: x0,
            last_t: None,
            last_y: None,
        }
    }
}

/// A sequence of operators `A_n` standing in for `A`, with declared drift
/// envelopes `||J_{gamma A_n} x - J_{gamma A} x|| <= alpha_n ||x|| + beta_n`.
#[derive(Clone)]
pub struct VaryingResolventFamily {
    pub rule: Arc<dyn Fn(usize) -> ResolventOperator + Send + Sync>,
}

impl VaryingResolventFamily {
    pub fn new<F>(rule: F) -> Self
    where
        F: Fn(usize) -> ResolventOperator + Send + Sync + 'static,
    {
        Self {
            rule: Arc::new(rule),
        }
    }

    pub fn at(&self, n: usize) -> ResolventOperator {
        (self.rule)(n)
    }
}

fn guard_finite(x: &DVector<f64>, n: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            n,
            detail: "non-finite state component".into(),
            trace: None,
        });
    }
    let norm = x.norm();
    if norm > DIVERGENCE_NORM_BOUND {
        return Err(Error::Divergence {
            n,
            detail: format!("state norm {norm:e} exceeds guard {DIVERGENCE_NORM_BOUND:e}"),
            trace: None,
        });
    }
    Ok(())
}

fn step_with(
    state: &FbState,
    resolvent: &ResolventOperator,
    oracle: &mut GradientOracle,
    perturb: &PerturbationSource,
    sched: &IterationSchedule,
) -> Result<(FbState, DVector<f64>)> {
    let n = state.n;
    let vals = sched.eval(n);
    let u = oracle.estimate(&state.x, n)?;
    let r = &state.x - &u * vals.gamma;
    let t = resolvent.apply(&r, vals.gamma)?;
    // Adding an exactly-zero perturbation is skipped so error-free runs are
    // bit-identical to the plain unperturbed recursion.
    let y = if perturb.is_zero() {
        t.clone()
    } else {
        &t + perturb.next(n, state.x.len())
    };
    let x_next = if vals.lambda == 1.0 {
        y.clone()
    } else {
        &state.x + (&y - &state.x) * vals.lambda
    };
    guard_finite(&x_next, n)?;
    Ok((
        FbState {
            n: n + 1,
            x: x_next,
            last_t: Some(t),
            last_y: Some(y),
        },
        u,
    ))
}

/// One iteration of the fixed-operator recursion. Returns the advanced state.
pub fn fb_step(
    state: &FbState,
    prob: &FbProblem,
    oracle: &mut GradientOracle,
    perturb: &PerturbationSource,
    sched: &IterationSchedule,
) -> Result<FbState> {
    Ok(step_with(state, &prob.a, oracle, perturb, sched)?.0)
}

/// One iteration with the step-`n` member of the varying family in place of
/// the fixed operator.
pub fn fb_step_varying(
    state: &FbState,
    family: &VaryingResolventFamily,
    oracle: &mut GradientOracle,
    perturb: &PerturbationSource,
    sched: &IterationSchedule,
) -> Result<FbState> {
    let a_n = family.at(state.n);
    Ok(step_with(state, &a_n, oracle, perturb, sched)?.0)
}

/// Fixed-point residual `||x - J_{gamma A}(x - gamma Bx)||`, zero exactly on
/// the solution set. Uses the problem's audit metric.
pub fn residual(prob: &FbProblem, x: &DVector<f64>, gamma: f64) -> Result<f64> {
    if gamma <= 0.0 {
        return Err(Error::Parameter("residual needs gamma > 0".into()));
    }
    let bx = prob.b.apply(x)?;
    let j = prob.a.apply(&(x - &bx * gamma), gamma)?;
    prob.audit_norm(&(x - j))
}

#[derive(Clone, Debug)]
pub struct StoppingRule {
    pub max_iters: usize,
    pub residual_tol: Option<f64>,
}

impl StoppingRule {
    pub fn max_iters(max_iters: usize) -> Self {
        Self {
            max_iters,
            residual_tol: None,
        }
    }

    pub fn with_residual_tol(mut self, tol: f64) -> Self {
        self.residual_tol = Some(tol);
        self
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub stop: StoppingRule,
    /// Store a full state snapshot every `thin`-th iteration (scalars are
    /// recorded every iteration).
    pub thin: usize,
    /// Evaluate the exact map `B` each iteration for residuals, audit
    /// distances, and the partial-sum monitors. The iteration itself never
    /// touches the exact map unless the oracle is exact.
    pub audit_exact: bool,
    /// Record the exact conditional bias norm per step when the oracle
    /// exposes it.
    pub record_bias: bool,
    pub seed: u64,
    pub config_digest: String,
}

impl RunOptions {
    pub fn new(stop: StoppingRule) -> Self {
        Self {
            stop,
            thin: 100,
            audit_exact: true,
            record_bias: false,
            seed: 0,
            config_digest: String::new(),
        }
    }

    pub fn with_thin(mut self, thin: usize) -> Self {
        self.thin = thin.max(1);
        self
    }

    pub fn with_audit_exact(mut self, audit: bool) -> Self {
        self.audit_exact = audit;
        self
    }

    pub fn with_record_bias(mut self, record: bool) -> Self {
        self.record_bias = record;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_config_digest(mut self, digest: String) -> Self {
        self.config_digest = digest;
        self
    }
}

pub fn trace_columns(n_z_refs: usize, record_bias: bool) -> Vec<String> {
    let mut cols = vec![
        "n".to_string(),
        "lambda".to_string(),
        "gamma".to_string(),
        "residual".to_string(),
    ];
    for i in 0..n_z_refs {
        cols.push(format!("dist_z{i}"));
    }
    cols.push("u_err".to_string());
    for i in 0..n_z_refs {
        cols.push(format!("s1_z{i}"));
    }
    for i in 0..n_z_refs {
        cols.push(format!("s2_z{i}"));
    }
    cols.push("t_drift".to_string());
    cols.push("objective".to_string());
    if record_bias {
        cols.push("bias_norm".to_string());
    }
    cols
}

/// Objective value `f(x) + h(x)` for problems posed as subdifferential plus
/// smooth gradient; NaN when either part has no evaluable form.
fn objective_value(prob: &FbProblem, x: &DVector<f64>) -> f64 {
    let f_val = match &prob.a {
        ResolventOperator::Subdifferential(f) => f.eval(x),
        _ => return f64::NAN,
    };
    match prob.b.potential(x) {
        Some(h) => f_val + h,
        None => f64::NAN,
    }
}

struct AuditRow {
    residual: f64,
    dists: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    objective: f64,
    bx: Option<DVector<f64>>,
}

fn audit_state(
    prob: &FbProblem,
    x: &DVector<f64>,
    lambda: f64,
    gamma: f64,
    audit_exact: bool,
    bz_refs: &[DVector<f64>],
) -> Result<AuditRow> {
    let objective = objective_value(prob, x);
    if !audit_exact {
        let dists = prob
            .z_refs
            .iter()
            .map(|z| prob.audit_norm(&(x - z)))
            .collect::<Result<Vec<_>>>()?;
        return Ok(AuditRow {
            residual: f64::NAN,
            dists,
            s1: vec![f64::NAN; prob.z_refs.len()],
            s2: vec![f64::NAN; prob.z_refs.len()],
            objective,
            bx: None,
        });
    }
    let bx = prob.b.apply(x)?;
    let w = x - &bx * gamma;
    let j = prob.a.apply(&w, gamma)?;
    let residual = prob.audit_norm(&(x - &j))?;
    let mut dists = Vec::with_capacity(prob.z_refs.len());
    let mut s1 = Vec::with_capacity(prob.z_refs.len());
    let mut s2 = Vec::with_capacity(prob.z_refs.len());
    for (z, bz) in prob.z_refs.iter().zip(bz_refs) {
        dists.push(prob.audit_norm(&(x - z))?);
        let drift = prob.audit_norm(&(&bx - bz))?;
        s1.push(lambda * drift * drift);
        let gap = prob.audit_norm(&(&w - &j + bz * gamma))?;
        s2.push(lambda * gap * gap);
    }
    Ok(AuditRow {
        residual,
        dists,
        s1,
        s2,
        objective,
        bx: Some(bx),
    })
}

enum ResolventSource<'a> {
    Fixed(&'a ResolventOperator),
    Family(&'a VaryingResolventFamily),
}

fn run_impl(
    prob: &FbProblem,
    source: ResolventSource<'_>,
    oracle: &mut GradientOracle,
    perturb: &PerturbationSource,
    sched: &IterationSchedule,
    x0: DVector<f64>,
    opts: &RunOptions,
) -> Result<RunTrace> {
    let columns = trace_columns(prob.z_refs.len(), opts.record_bias);
    let mut trace = RunTrace::new(columns, opts.seed, opts.config_digest.clone(), x0.norm());
    let bz_refs: Vec<DVector<f64>> = if opts.audit_exact {
        prob.z_refs
            .iter()
            .map(|z| prob.b.apply(z))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    if opts.stop.residual_tol.is_some() && !opts.audit_exact {
        return Err(Error::Config(
            "residual-based stopping requires exact-field auditing (run.audit_exact)".into(),
        ));
    }

    let mut state = FbState::initial(x0);
    trace.push_snapshot(0, &state.x);

    loop {
        let n = state.n;
        let vals = sched.eval(n);
        let audit = audit_state(prob, &state.x, vals.lambda, vals.gamma, opts.audit_exact, &bz_refs)?;
        let stop_now = n >= opts.stop.max_iters
            || opts
                .stop
                .residual_tol
                .map(|tol| audit.residual <= tol)
                .unwrap_or(false);

        let mut row = vec![n as f64, vals.lambda, vals.gamma, audit.residual];
        row.extend(&audit.dists);

        if stop_now {
            row.push(f64::NAN); // u_err
            row.extend(&audit.s1);
            row.extend(&audit.s2);
            row.push(f64::NAN); // t_drift
            row.push(audit.objective);
            if opts.record_bias {
                row.push(f64::NAN);
            }
            trace.push_row(row)?;
            if trace.snapshots.last().map(|(m, _)| *m) != Some(n) {
                trace.push_snapshot(n, &state.x);
            }
            return Ok(trace);
        }

        let step = match &source {
            ResolventSource::Fixed(a) => step_with(&state, a, oracle, perturb, sched),
            ResolventSource::Family(f) => {
                let a_n = f.at(n);
                step_with(&state, &a_n, oracle, perturb, sched)
            }
        };
        let (next, u) = match step {
            Ok(v) => v,
            Err(Error::Divergence { n, detail, .. }) => {
                while row.len() < trace.columns.len() {
                    row.push(f64::NAN);
                }
                trace.push_row(row)?;
                return Err(Error::Divergence {
                    n,
                    detail,
                    trace: Some(Box::new(trace)),
                });
            }
            Err(e) => return Err(e),
        };

        let u_err = match &audit.bx {
            Some(bx) => prob.audit_norm(&(&u - bx))?,
            None => f64::NAN,
        };
        row.push(u_err);
        row.extend(&audit.s1);
        row.extend(&audit.s2);
        let t = next.last_t.as_ref().expect("step records t");
        let t_gap = prob.audit_norm(&(t - &state.x))?;
        row.push(vals.lambda * (1.0 - vals.lambda) * t_gap * t_gap);
        row.push(audit.objective);
        if opts.record_bias {
            let bias = oracle
                .last_bias(&state.x)?
                .map(|b| b.norm())
                .unwrap_or(f64::NAN);
            row.push(bias);
        }
        trace.push_row(row)?;

        if next.n % opts.thin == 0 {
            trace.push_snapshot(next.n, &next.x);
        }
        state = next;
    }
}

/// Run the fixed-operator iteration from `x0` until the stopping rule fires,
/// recording the audit trace.
pub fn run(
    prob: &FbProblem,
    oracle: &mut GradientOracle,
    perturb: &PerturbationSource,
    sched: &IterationSchedule,
    x0: DVector<f64>,
    opts: &RunOptions,
) -> Result<RunTrace> {
    run_impl(prob, ResolventSource::Fixed(&prob.a), oracle, perturb, sched, x0, opts)
}

/// Run with per-step operators from the varying family; everything else as
/// [`run`].
pub fn run_varying(
    prob: &FbProblem,
    family: &VaryingResolventFamily,
    oracle: &mut GradientOracle,
    perturb: &PerturbationSource,
    sched: &IterationSchedule,
    x0: DVector<f64>,
    opts: &RunOptions,
) -> Result<RunTrace> {
    run_impl(prob, ResolventSource::Family(family), oracle, perturb, sched, x0, opts)
}
