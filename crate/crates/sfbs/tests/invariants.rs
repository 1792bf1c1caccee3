//! Cross-module invariants: the two-stage Monte Carlo variance oracle for
//! the empirical gradient, drift-budgeted Fejér monitoring, and property
//! tests over the serialization and prox identities.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sfbs::diagnostics::{fejer_monitor, trace_from_csv, trace_to_csv, RunTrace};
use sfbs::fb::{self, FbProblem, RunOptions, StoppingRule, VaryingResolventFamily};
use sfbs::operators::{conjugate_prox, smoothed_l1, CocoerciveMap, ProxFunction, ResolventOperator};
use sfbs::spaces::SpdMetric;
use sfbs::stochastic::{
    estimate_conditional_moments, mix_seed, BatchRule, GradientOracle, IterationSchedule,
    MatrixDist, PerturbationSource, SampleLedger, VectorDist,
};

/// The conditional variance of the growing-batch estimator equals
/// `(m_{n+1} - m_n) / m_{n+1}^2` times the single-sample variance; the
/// latter is estimated by an independent large Monte Carlo run.
#[test]
fn two_stage_monte_carlo_variance_oracle() {
    let ledger = SampleLedger::new(
        2024,
        MatrixDist::GaussianIid {
            rows: 2,
            cols: 2,
            std: 1.0,
        },
        VectorDist::Constant(DVector::zeros(2)),
    )
    .unwrap();
    // batch 1 + ceil(n^1.2): m_6 = 10, m_7 = 12
    let batch = BatchRule::new(1.0, 1.2).unwrap();
    let n = 6;
    let (prefix, total) = (batch.eval(n), batch.eval(n + 1));
    assert_eq!((prefix, total), (10, 12));

    let oracle = GradientOracle::empirical_quadratic(ledger, batch).unwrap();
    let x = DVector::from_vec(vec![1.0, 0.0]);
    let trials = 100_000;
    let est = estimate_conditional_moments(&oracle, &x, n, trials, 0x2775).unwrap();

    // Stage two: single-sample variance of K'(Kx - z) by an independent
    // million-draw Monte Carlo (analytically 6 for this distribution).
    let mut rng = ChaCha8Rng::seed_from_u64(0xfeed);
    let draws = 1_000_000usize;
    let mut mean = DVector::zeros(2);
    let mut sq = 0.0f64;
    let mut vals = Vec::with_capacity(draws);
    for _ in 0..draws {
        let k = DMatrix::from_fn(2, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let v = k.tr_mul(&(&k * &x));
        mean += &v;
        vals.push(v);
    }
    mean /= draws as f64;
    let mut dev_sq = Vec::with_capacity(draws);
    for v in &vals {
        let d = (v - &mean).norm_squared();
        sq += d;
        dev_sq.push(d);
    }
    let single_var = sq / (draws as f64 - 1.0);
    let single_var_se = {
        let m = sq / draws as f64;
        let var_of = dev_sq.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / (draws as f64 - 1.0);
        (var_of / draws as f64).sqrt()
    };

    let predicted = (total - prefix) as f64 / (total as f64 * total as f64) * single_var;
    let combined_se = est.variance_se
        + (total - prefix) as f64 / (total as f64 * total as f64) * single_var_se;
    let gap = (est.variance - predicted).abs();
    assert!(
        gap <= 3.0 * combined_se,
        "measured {m}, predicted {predicted}, gap {gap:.3e} > 3 x {combined_se:.3e}", m = est.variance,
    );
    // sanity anchor: the analytic single-sample variance here is
    // rows * (cols + 1) * ||x||^2 = 6
    assert!((single_var - 6.0).abs() < 0.1);
}

/// A varying-resolvent run with exact gradients drifts from Fejér
/// monotonicity by at most the certified drift budget.
#[test]
fn varying_resolvent_fejer_within_drift_budget() {
    let k = DMatrix::from_row_slice(3, 2, &[0.9, 0.1, -0.2, 0.8, 0.1, 0.4]);
    let z = DVector::from_vec(vec![0.6, -0.3, 0.2]);
    let b = CocoerciveMap::affine_gradient(k, z).unwrap();
    let gamma = b.theta();
    let weight = 0.1;
    let dim = 2;

    // long fixed-operator run supplies the reference point
    let fixed = FbProblem::new(
        ResolventOperator::Subdifferential(ProxFunction::l1(weight).unwrap()),
        b.clone(),
    );
    let sched = IterationSchedule::constant(1.0, gamma).unwrap();
    let mut oracle = GradientOracle::exact(b.clone());
    let opts = RunOptions::new(StoppingRule::max_iters(200_000))
        .with_audit_exact(false)
        .with_thin(200_000);
    let zref = fb::run(
        &fixed,
        &mut oracle,
        &PerturbationSource::Zero,
        &sched,
        DVector::zeros(dim),
        &opts,
    )
    .unwrap()
    .final_state()
    .unwrap();

    let rho0 = 0.5;
    let family = VaryingResolventFamily::new(move |n| {
        ResolventOperator::Subdifferential(
            smoothed_l1(weight, rho0 * 0.5f64.powi(n as i32)).unwrap(),
        )
    });
    let n_iters = 400;
    let prob = fixed.clone().with_z_refs(vec![zref]);
    let mut oracle = GradientOracle::exact(b.clone());
    let run_opts = RunOptions::new(StoppingRule::max_iters(n_iters)).with_thin(200);
    let trace = fb::run_varying(
        &prob,
        &family,
        &mut oracle,
        &PerturbationSource::Zero,
        &sched,
        DVector::from_vec(vec![1.0, -1.0]),
        &run_opts,
    )
    .unwrap();

    // beta_n = weight * sqrt(d) * rho_n bounds the pointwise resolvent
    // drift; with lambda = 1 the distance can rise by at most sum beta_n.
    let budget: f64 = (0..n_iters)
        .map(|n| weight * (dim as f64).sqrt() * rho0 * 0.5f64.powi(n as i32))
        .sum();
    let rep = fejer_monitor(&trace, "dist_z0", budget).unwrap();
    assert!(
        rep.pass,
        "cumulative increase {} exceeds drift budget {budget}",
        rep.cumulative_increase
    );
}

/// Seed sweep of the stochastic lasso with the error budget assembled from
/// the recorded bias series and a fitted variance envelope: at least 19 of
/// 20 paths stay within it.
#[test]
fn stochastic_fejer_within_declared_budget() {
    let fixtures = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let loaded = sfbs::config::load_config(&fixtures.join("lasso_stochastic.toml")).unwrap();
    let build = loaded.build_fb_problem().unwrap();
    let sched = loaded.build_schedule().unwrap();
    let probe = loaded.build_oracle(None, 0).unwrap();
    let b = probe.exact_map().unwrap().clone();
    let problem = FbProblem::new(build.a.clone(), b.clone()).with_z_refs(build.z_refs.clone());
    let gamma = sched.eval(0).gamma;
    let n_iters = 4000;

    // variance envelope C / n^(2+delta) fitted from Monte Carlo estimates on
    // the reference seed
    let ref_oracle = loaded
        .build_oracle(Some(&problem.b), mix_seed(&[1, 0x75]))
        .unwrap();
    let mut c_fit = 0.0f64;
    for n in [4usize, 16, 64, 256] {
        let m = estimate_conditional_moments(&ref_oracle, &build.x0, n, 256, 0xe0_0e).unwrap();
        c_fit = c_fit.max(m.variance * ((n + 1) as f64).powf(2.2));
    }
    // headroom for the dependence of the variance on the trajectory point
    let c_fit = 4.0 * c_fit;

    let mut passes = 0;
    for seed in 1..=20u64 {
        let mut oracle = loaded
            .build_oracle(Some(&problem.b), mix_seed(&[seed, 0x75]))
            .unwrap();
        let opts = RunOptions::new(StoppingRule::max_iters(n_iters))
            .with_thin(n_iters)
            .with_record_bias(true)
            .with_seed(seed);
        let trace = fb::run(
            &problem,
            &mut oracle,
            &PerturbationSource::Zero,
            &sched,
            build.x0.clone(),
            &opts,
        )
        .unwrap();
        let bias = trace.column("bias_norm").unwrap();
        let lambdas = trace.column("lambda").unwrap();
        let budget: f64 = bias
            .iter()
            .zip(&lambdas)
            .enumerate()
            .filter(|(_, (b, _))| b.is_finite())
            .map(|(n, (b, l))| {
                let zeta = c_fit * ((n + 1) as f64).powf(-2.2);
                l * gamma * (b + zeta.sqrt())
            })
            .sum();
        if fejer_monitor(&trace, "dist_z0", budget).unwrap().pass {
            passes += 1;
        }
    }
    assert!(passes >= 19, "only {passes}/20 paths within the error budget");
}

/// Summability monitor for the growing-batch bias terms: the partial sums of
/// `sqrt(lambda_n) * bias_n` are Cauchy on the seeded reference run: the
/// tail beyond N = 200 contributes less than 10% of the total at N = 400.
#[test]
fn growing_batch_bias_partial_sums_are_cauchy() {
    let fixtures = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let loaded = sfbs::config::load_config(&fixtures.join("repro52.toml")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut loaded = loaded;
    loaded.config.output.dir = dir.path().join("out").to_string_lossy().into_owned();
    let summary = sfbs::experiment::reproduce_52(&loaded).unwrap();
    assert!(
        summary.sqrt_lambda_bias_tail_fraction < 0.1,
        "tail fraction {}",
        summary.sqrt_lambda_bias_tail_fraction
    );
}

/// A geometrically decaying smoothing rule underflows to exactly zero near
/// n = 1075; the built family floors it at the smallest positive double, so
/// runs continue past that point (and behave as the fixed operator there).
#[test]
fn varying_family_survives_smoothing_underflow() {
    let fixtures = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let mut loaded = sfbs::config::load_config(&fixtures.join("varying_moreau.toml")).unwrap();
    loaded.config.run.max_iters = 1500;
    loaded.config.run.residual_tol = None;
    loaded.config.run.seeds = vec![3];
    let dir = tempfile::tempdir().unwrap();
    loaded.config.output.dir = dir.path().to_string_lossy().into_owned();
    let outcome = sfbs::experiment::run_experiment(&loaded).unwrap();
    assert_eq!(outcome.exit_code, 0, "{}", outcome.message);
}

/// The committed reference points really are fixed points: the recorded
/// long-run residual is reproduced by evaluating the residual at the stored
/// vector.
#[test]
fn reference_fixtures_have_vanishing_residuals() {
    let fixtures = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let loaded = sfbs::config::load_config(&fixtures.join("lasso_deterministic.toml")).unwrap();
    let build = loaded.build_fb_problem().unwrap();
    let prob = FbProblem::new(build.a.clone(), build.b.clone().unwrap());
    let gamma = loaded.build_schedule().unwrap().eval(0).gamma;
    let res = fb::residual(&prob, &build.z_refs[0], gamma).unwrap();
    assert!(res <= 1e-10, "reference residual {res}");
    let meta: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(fixtures.join("lasso_zref_meta.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(meta["reference_run_length"], 1_000_000);
    assert!(meta["final_residual"].as_f64().unwrap() <= 1e-10);
}

/// Deterministic TV denoising reaches the stored reference objective of the
/// million-iteration self-run within 1e-6.
#[test]
fn tv_objective_matches_long_reference_run() {
    let fixtures = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let loaded = sfbs::config::load_config(&fixtures.join("tv1d_deterministic.toml")).unwrap();
    let model = loaded.build_pd_model().unwrap();
    let sched = loaded.build_schedule().unwrap();
    let pd = loaded.config.problem.pd.as_ref().unwrap();
    let x0 = loaded.load_vector(&pd.x0).unwrap();
    let mut bundle = sfbs::primal_dual::PdOracleBundle::exact(&model);
    let opts = RunOptions::new(StoppingRule::max_iters(30_000)).with_thin(30_000);
    let trace = sfbs::primal_dual::pd_run(
        &model,
        &mut bundle,
        &sched,
        x0,
        sfbs::spaces::BlockVector::zeros(&model.dual_space()),
        &opts,
    )
    .unwrap();
    let meta: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(fixtures.join("tv_zref_meta.json")).unwrap(),
    )
    .unwrap();
    let want = meta["final_objective"].as_f64().unwrap();
    let got = trace.last_value("objective").unwrap();
    assert!(
        (got - want).abs() <= 1e-6,
        "objective {got} vs reference {want}"
    );
}

/// Starting the error-free sweep at the stored solution pair leaves the
/// state unchanged to 1e-12.
#[test]
fn pd_solution_pair_is_a_fixed_point() {
    let fixtures = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let loaded = sfbs::config::load_config(&fixtures.join("tv1d_deterministic.toml")).unwrap();
    let model = loaded.build_pd_model().unwrap();
    let (zx, zv) = model.z_ref.clone().unwrap();
    let sched = IterationSchedule::constant(1.0, 1.0).unwrap();
    let mut bundle = sfbs::primal_dual::PdOracleBundle::exact(&model);
    let state = sfbs::primal_dual::PdState::initial(zx.clone(), zv.clone());
    let next = sfbs::primal_dual::pd_step(&state, &model, &mut bundle, &sched).unwrap();
    let scale = 1.0 + zx.norm();
    assert!((&next.x - &zx).norm() <= 1e-12 * scale);
    assert!(next.v.sub(&zv).unwrap().norm() <= 1e-12 * scale);
}

/// With no smooth terms the converged sweep yields a subgradient
/// certificate: the pulled-back dual point is a subgradient of f at the
/// limit and every dual block lies in the subdifferential of its g_k.
#[test]
fn pure_nonsmooth_run_recovers_subgradient_certificate() {
    // min (1/2)||x - b||^2 + w ||Lx||_1 posed with f strongly convex, h = 0.
    let d = 8;
    let mut b_vec = DVector::zeros(d);
    for i in 0..d {
        b_vec[i] = if i < d / 2 { 1.0 } else { -0.4 };
    }
    let mut diff = DMatrix::zeros(d - 1, d);
    for i in 0..d - 1 {
        diff[(i, i)] = -1.0;
        diff[(i, i + 1)] = 1.0;
    }
    let w_tv = 0.25;
    let block = sfbs::primal_dual::PdBlock::new(
        ProxFunction::l1(w_tv).unwrap(),
        sfbs::primal_dual::JTerm::None { nu: 0.05 },
        sfbs::spaces::LinearMap::new(diff.clone()).unwrap(),
        SpdMetric::scaled_identity(d - 1, 0.2).unwrap(),
    )
    .unwrap();
    let model = sfbs::primal_dual::PdModel::new(
        ProxFunction::squared_l2(1.0, b_vec.clone()).unwrap(),
        CocoerciveMap::zero(d),
        vec![block],
        SpdMetric::scaled_identity(d, 0.2).unwrap(),
        0.05, // h = 0; any positive bound is valid
    )
    .unwrap();
    let sched = IterationSchedule::constant(1.0, 1.0).unwrap();
    let mut bundle = sfbs::primal_dual::PdOracleBundle::exact(&model);
    let opts = RunOptions::new(StoppingRule::max_iters(200_000))
        .with_audit_exact(false)
        .with_thin(200_000);
    let trace = sfbs::primal_dual::pd_run(
        &model,
        &mut bundle,
        &sched,
        DVector::zeros(d),
        sfbs::spaces::BlockVector::zeros(&model.dual_space()),
        &opts,
    )
    .unwrap();
    let emb = sfbs::primal_dual::embed_as_fb(&model).unwrap();
    let (x_hat, v_hat) = emb.unpack(&trace.final_state().unwrap()).unwrap();
    let v0 = v_hat.block(0);

    // primal certificate: -L' v must be the gradient of (1/2)||x - b||^2
    let pulled = diff.tr_mul(v0);
    let grad_f = &x_hat - &b_vec;
    assert!(
        (&grad_f + &pulled).norm() <= 1e-8,
        "stationarity residual {}",
        (&grad_f + &pulled).norm()
    );
    // dual certificate: v in the subdifferential of w||.||_1 at Lx
    let lx = &diff * &x_hat;
    for i in 0..d - 1 {
        assert!(v0[i].abs() <= w_tv + 1e-8);
        if lx[i].abs() > 1e-6 {
            assert!((v0[i] - w_tv * lx[i].signum()).abs() <= 1e-8);
        }
    }
}

/// Degenerate sample distributions (constant matrix and vector draws) make
/// the recorded conditional bias identically zero.
#[test]
fn degenerate_empirical_bias_series_is_zero() {
    let k = DMatrix::from_row_slice(2, 2, &[0.8, 0.1, -0.2, 0.9]);
    let z = DVector::from_vec(vec![0.4, -0.1]);
    let ledger = SampleLedger::new(
        11,
        MatrixDist::Constant(k.clone()),
        VectorDist::Constant(z.clone()),
    )
    .unwrap();
    let batch = BatchRule::new(1.0, 1.2).unwrap();
    let mut oracle = GradientOracle::empirical_quadratic(ledger, batch).unwrap();
    let b = oracle.exact_map().unwrap().clone();
    let problem = FbProblem::new(
        ResolventOperator::Subdifferential(ProxFunction::l1(0.05).unwrap()),
        b,
    );
    let sched = IterationSchedule::constant(1.0, 0.5).unwrap();
    let opts = RunOptions::new(StoppingRule::max_iters(50))
        .with_record_bias(true)
        .with_thin(50);
    let trace = fb::run(
        &problem,
        &mut oracle,
        &PerturbationSource::Zero,
        &sched,
        DVector::from_vec(vec![1.0, -1.0]),
        &opts,
    )
    .unwrap();
    for v in trace.column("bias_norm").unwrap() {
        if v.is_finite() {
            assert!(v <= 1e-13, "bias {v}");
        }
    }
}

// ---------------------------------------------------------------------------
// property tests
// ---------------------------------------------------------------------------

fn finite_f64() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e12..1e12f64,
        Just(0.0),
        Just(-0.0),
        Just(2e-308),
        Just(f64::MIN_POSITIVE),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Trace CSV round-trips arbitrary finite doubles bitwise.
    #[test]
    fn trace_csv_roundtrip_bitwise(rows in proptest::collection::vec(
        (finite_f64(), finite_f64(), finite_f64()), 1..20)) {
        let mut trace = RunTrace::new(
            vec!["n".into(), "a".into(), "b".into()],
            9,
            "digest".into(),
            1.0,
        );
        for (i, (_, a, b)) in rows.iter().enumerate() {
            trace.push_row(vec![i as f64, *a, *b]).unwrap();
        }
        let text = trace_to_csv(&trace);
        let back = trace_from_csv(&text, None).unwrap();
        for (ra, rb) in trace.rows.iter().zip(&back.rows) {
            for (x, y) in ra.iter().zip(rb) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        prop_assert_eq!(trace_to_csv(&back), text);
    }

    /// The scalar Moreau identity `prox_f(x) + prox_{f*}(x) = x` holds across
    /// the catalog under the identity metric.
    #[test]
    fn moreau_identity_reconstructs_input(
        seed in 0u64..1000,
        weight in 0.2f64..2.0,
        kind in 0u32..3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DVector::from_fn(3, |_, _| rng.random::<f64>() * 6.0 - 3.0);
        let f = match kind {
            0 => ProxFunction::l1(weight).unwrap(),
            1 => ProxFunction::squared_l2(weight, DVector::from_fn(3, |_, _| rng.random::<f64>() - 0.5)).unwrap(),
            _ => ProxFunction::uniform_box(3, -weight, weight).unwrap(),
        };
        let u = SpdMetric::identity(3);
        let p = f.prox(&x, 1.0).unwrap();
        let q = conjugate_prox(&f, &x, &u).unwrap();
        prop_assert!((&p + &q - &x).norm() <= 1e-10);
    }

    /// Metric prox with a scalar metric agrees with the plain prox at the
    /// reciprocal parameter.
    #[test]
    fn scalar_metric_prox_matches_prox(
        seed in 0u64..1000,
        sigma in 0.2f64..4.0,
        kind in 0u32..3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DVector::from_fn(2, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let f = match kind {
            0 => ProxFunction::l1(0.8).unwrap(),
            1 => ProxFunction::squared_l2(1.1, DVector::zeros(2)).unwrap(),
            _ => ProxFunction::uniform_box(2, -0.5, 1.0).unwrap(),
        };
        let u = SpdMetric::scaled_identity(2, sigma).unwrap();
        let a = f.metric_prox(&x, &u).unwrap();
        let b = f.prox(&x, 1.0 / sigma).unwrap();
        prop_assert!((a - b).norm() <= 1e-12);
    }
}
