//! Regenerates the bundled fixture data: problem matrices, long-run
//! reference solutions with their provenance metadata, and the experiment
//! configuration files. Run with `cargo run --release --example
//! gen_fixtures`; outputs are committed under `fixtures/`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sfbs::fb::{self, FbProblem, RunOptions, StoppingRule};
use sfbs::operators::{CocoerciveMap, ProxFunction, ResolventOperator};
use sfbs::primal_dual::{pd_run, JTerm, PdBlock, PdModel, PdOracleBundle};
use sfbs::spaces::{write_matrix_text, write_vector_text, LinearMap, SpdMetric};
use sfbs::stochastic::{GradientOracle, IterationSchedule, PerturbationSource};

const REFERENCE_ITERS: usize = 1_000_000;

fn fixtures_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn meta_json(iters: usize, final_residual: f64, final_objective: f64) -> String {
    serde_json::to_string_pretty(&serde_json::json!({
        "reference_run_length": iters,
        "final_residual": final_residual,
        "final_objective": final_objective,
    }))
    .unwrap()
}

fn long_fb_reference(
    prob: &FbProblem,
    gamma: f64,
    x0: DVector<f64>,
) -> (DVector<f64>, f64, f64) {
    let sched = IterationSchedule::constant(1.0, gamma).unwrap();
    let mut oracle = GradientOracle::exact(prob.b.clone());
    let opts = RunOptions::new(StoppingRule::max_iters(REFERENCE_ITERS))
        .with_audit_exact(false)
        .with_thin(REFERENCE_ITERS);
    let trace = fb::run(prob, &mut oracle, &PerturbationSource::Zero, &sched, x0, &opts).unwrap();
    let x = trace.final_state().unwrap();
    let res = fb::residual(prob, &x, gamma).unwrap();
    let obj = match &prob.a {
        ResolventOperator::Subdifferential(f) => {
            f.eval(&x) + prob.b.potential(&x).unwrap_or(f64::NAN)
        }
        _ => f64::NAN,
    };
    (x, res, obj)
}

fn main() {
    let dir = fixtures_dir();
    std::fs::create_dir_all(&dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20_150_217);

    // ----- lasso data ------------------------------------------------------
    let rows = 15;
    let cols = 10;
    let k = normal_matrix(&mut rng, rows, cols) / (rows as f64).sqrt();
    // a sparse ground truth observed through k plus noise
    let mut x_true = DVector::zeros(cols);
    x_true[1] = 1.5;
    x_true[4] = -0.8;
    x_true[7] = 0.5;
    let noise = normal_matrix(&mut rng, rows, 1).column(0) * 0.05;
    let z = &k * &x_true + noise;
    write_matrix_text(&dir.join("lasso_k.txt"), &k).unwrap();
    write_vector_text(&dir.join("lasso_z.txt"), &z).unwrap();
    write_vector_text(&dir.join("lasso_x0.txt"), &DVector::zeros(cols)).unwrap();

    let l1_weight = 0.05;
    let b_det = CocoerciveMap::affine_gradient(k.clone(), z.clone()).unwrap();
    let gamma_det = b_det.theta(); // 1 / ||K||^2, half the admissible bound
    let prob_det = FbProblem::new(
        ResolventOperator::Subdifferential(ProxFunction::l1(l1_weight).unwrap()),
        b_det.clone(),
    );
    let (zref, res, obj) = long_fb_reference(&prob_det, gamma_det, DVector::zeros(cols));
    write_vector_text(&dir.join("lasso_zref.txt"), &zref).unwrap();
    std::fs::write(dir.join("lasso_zref_meta.json"), meta_json(REFERENCE_ITERS, res, obj)).unwrap();
    println!("lasso: gamma = {gamma_det:.6e}, reference residual = {res:.3e}");

    // ----- stochastic lasso: expectation problem --------------------------
    // A well-conditioned mean matrix keeps the slowly-relaxed schedule's
    // deterministic transient within the iteration budget: singular values
    // are compressed into [0.85, 1.15].
    let sample_std = 0.05;
    let g1 = normal_matrix(&mut rng, rows, cols);
    let g2 = normal_matrix(&mut rng, cols, cols);
    let q1 = g1.qr().q();
    let q2 = g2.qr().q();
    let singulars = DVector::from_fn(cols, |i, _| 0.85 + 0.3 * i as f64 / (cols - 1) as f64);
    let k_mean = &q1 * DMatrix::from_diagonal(&singulars) * q2.transpose();
    let z_mean = &k_mean * &x_true + normal_matrix(&mut rng, rows, 1).column(0) * 0.05;
    write_matrix_text(&dir.join("lasso_stoch_kmean.txt"), &k_mean).unwrap();
    write_vector_text(&dir.join("lasso_stoch_zmean.txt"), &z_mean).unwrap();
    let q_stoch =
        k_mean.tr_mul(&k_mean) + DMatrix::identity(cols, cols) * (rows as f64 * sample_std * sample_std);
    let r_stoch = k_mean.tr_mul(&z_mean);
    let b_stoch = CocoerciveMap::quadratic(q_stoch.clone(), r_stoch.clone()).unwrap();
    let gamma_stoch = b_stoch.theta();
    let prob_stoch = FbProblem::new(
        ResolventOperator::Subdifferential(ProxFunction::l1(l1_weight).unwrap()),
        b_stoch.clone(),
    );
    let (zref_s, res_s, obj_s) = long_fb_reference(&prob_stoch, gamma_stoch, DVector::zeros(cols));
    write_vector_text(&dir.join("lasso_stoch_zref.txt"), &zref_s).unwrap();
    std::fs::write(
        dir.join("lasso_stoch_zref_meta.json"),
        meta_json(REFERENCE_ITERS, res_s, obj_s),
    )
    .unwrap();
    println!("stochastic lasso: gamma = {gamma_stoch:.6e}, reference residual = {res_s:.3e}");

    // ----- TV-1D denoising -------------------------------------------------
    let d = 16;
    let mut signal = DVector::zeros(d);
    for i in 0..d {
        signal[i] = if i < 5 {
            1.0
        } else if i < 11 {
            -0.5
        } else {
            0.8
        };
    }
    let tv_noise = normal_matrix(&mut rng, d, 1).column(0) * 0.1;
    let b_tv = &signal + tv_noise;
    let mut diff = DMatrix::zeros(d - 1, d);
    for i in 0..d - 1 {
        diff[(i, i)] = -1.0;
        diff[(i, i + 1)] = 1.0;
    }
    write_vector_text(&dir.join("tv_b.txt"), &b_tv).unwrap();
    write_matrix_text(&dir.join("tv_l.txt"), &diff).unwrap();
    write_vector_text(&dir.join("tv_x0.txt"), &DVector::zeros(d)).unwrap();

    let sigma_w = 0.2;
    let tau_u = 0.2;
    let tv_weight = 0.3;
    let h_tv = CocoerciveMap::affine_gradient(DMatrix::identity(d, d), b_tv.clone()).unwrap();
    let block = PdBlock::new(
        ProxFunction::l1(tv_weight).unwrap(),
        JTerm::None { nu: 0.05 },
        LinearMap::new(diff.clone()).unwrap(),
        SpdMetric::scaled_identity(d - 1, tau_u).unwrap(),
    )
    .unwrap();
    let model = PdModel::new(
        ProxFunction::Zero,
        h_tv,
        vec![block],
        SpdMetric::scaled_identity(d, sigma_w).unwrap(),
        sigma_w, // Hessian of h is the identity
    )
    .unwrap();
    let sched = IterationSchedule::constant(1.0, 1.0).unwrap();
    let mut bundle = PdOracleBundle::exact(&model);
    let opts = RunOptions::new(StoppingRule::max_iters(REFERENCE_ITERS))
        .with_audit_exact(false)
        .with_thin(REFERENCE_ITERS);
    let trace = pd_run(
        &model,
        &mut bundle,
        &sched,
        DVector::zeros(d),
        sfbs::spaces::BlockVector::zeros(&model.dual_space()),
        &opts,
    )
    .unwrap();
    let emb = sfbs::primal_dual::embed_as_fb(&model).unwrap();
    let flat = trace.final_state().unwrap();
    let (x_tv, v_tv) = emb.unpack(&flat).unwrap();
    let res_tv = fb::residual(&emb.problem, &flat, 1.0).unwrap();
    let obj_tv = model.objective(&x_tv).unwrap();
    write_vector_text(&dir.join("tv_zref_primal.txt"), &x_tv).unwrap();
    write_vector_text(&dir.join("tv_zref_dual.txt"), v_tv.block(0)).unwrap();
    std::fs::write(dir.join("tv_zref_meta.json"), meta_json(REFERENCE_ITERS, res_tv, obj_tv)).unwrap();
    println!("tv-1d: reference residual = {res_tv:.3e}, objective = {obj_tv:.12}");

    // ----- growing-batch construction data ---------------------------------
    let m52 = 4;
    let n52 = 3;
    let k52 = normal_matrix(&mut rng, m52, n52) * 0.5;
    let z52 = normal_matrix(&mut rng, m52, 1).column(0) * 1.0 + DVector::from_element(m52, 0.5);
    let sample_std_52 = 1.0;
    let q52 = k52.tr_mul(&k52) + DMatrix::identity(n52, n52) * (m52 as f64 * sample_std_52 * sample_std_52);
    let r52 = k52.tr_mul(&z52);
    write_matrix_text(&dir.join("r52_kmean.txt"), &k52).unwrap();
    write_vector_text(&dir.join("r52_zmean.txt"), &z52).unwrap();
    write_matrix_text(&dir.join("r52_q.txt"), &q52).unwrap();
    write_vector_text(&dir.join("r52_r.txt"), &r52).unwrap();
    write_vector_text(&dir.join("r52_x0.txt"), &DVector::from_element(n52, 4.0)).unwrap();
    println!("r52: ||EQ|| = {:.4}", sfbs::spaces::operator_norm(&q52, 1e-10, 10_000).unwrap());

    // error-free reference pair for the growing-batch construction's model
    let mu52 = 0.05 * sfbs::spaces::operator_norm(&q52, 1e-12, 100_000).unwrap();
    let h52 = CocoerciveMap::quadratic(q52.clone(), r52.clone()).unwrap();
    let block52 = PdBlock::new(
        ProxFunction::l1(0.1).unwrap(),
        JTerm::None { nu: 0.1 },
        LinearMap::new(DMatrix::identity(n52, n52) * 0.3).unwrap(),
        SpdMetric::scaled_identity(n52, 0.3).unwrap(),
    )
    .unwrap();
    let model52 = PdModel::new(
        ProxFunction::uniform_box(n52, -5.0, 5.0).unwrap(),
        h52,
        vec![block52],
        SpdMetric::scaled_identity(n52, 0.05).unwrap(),
        mu52,
    )
    .unwrap();
    let mut bundle52 = PdOracleBundle::exact(&model52);
    let opts52 = RunOptions::new(StoppingRule::max_iters(REFERENCE_ITERS))
        .with_audit_exact(false)
        .with_thin(REFERENCE_ITERS);
    let trace52 = pd_run(
        &model52,
        &mut bundle52,
        &IterationSchedule::constant(1.0, 1.0).unwrap(),
        DVector::from_element(n52, 4.0),
        sfbs::spaces::BlockVector::zeros(&model52.dual_space()),
        &opts52,
    )
    .unwrap();
    let emb52 = sfbs::primal_dual::embed_as_fb(&model52).unwrap();
    let flat52 = trace52.final_state().unwrap();
    let (x52, v52) = emb52.unpack(&flat52).unwrap();
    let res52 = fb::residual(&emb52.problem, &flat52, 1.0).unwrap();
    write_vector_text(&dir.join("r52_zref_primal.txt"), &x52).unwrap();
    write_vector_text(&dir.join("r52_zref_dual.txt"), v52.block(0)).unwrap();
    std::fs::write(
        dir.join("r52_zref_meta.json"),
        meta_json(REFERENCE_ITERS, res52, model52.objective(&x52).unwrap()),
    )
    .unwrap();
    println!("r52 reference residual = {res52:.3e}");

    // ----- configuration files ---------------------------------------------
    let varying_beta0 = l1_weight * (cols as f64).sqrt();
    let configs: Vec<(&str, String)> = vec![
        (
            "lasso_deterministic.toml",
            format!(
                r#"# Deterministic forward-backward lasso run.
[problem]
kind = "fb"

[problem.fb]
a = {{ kind = "l1", weight = {l1_weight} }}
b = {{ kind = "affine_gradient", k = {{ file = "lasso_k.txt" }}, z = {{ file = "lasso_z.txt" }} }}
x0 = {{ file = "lasso_x0.txt" }}
z_ref = {{ file = "lasso_zref.txt" }}
demiregular_b = true

[schedule]
lambda = {{ kind = "constant", value = 1.0 }}
gamma = {{ kind = "constant", value = {gamma_det:.17e} }}

[run]
seeds = [42]
max_iters = 50000
residual_tol = 1e-8
thin = 1000

[output]
dir = "out/lasso_deterministic"
"#
            ),
        ),
        (
            "lasso_stochastic.toml",
            format!(
                r#"# Growing-batch stochastic forward-backward lasso run.
# The exact forward map is derived from the sample distributions:
# E[K'K] = Kmean'Kmean + rows*std^2*I, E[K'z] = Kmean' zmean.
[problem]
kind = "fb"

[problem.fb]
a = {{ kind = "l1", weight = {l1_weight} }}
x0 = {{ file = "lasso_x0.txt" }}
z_ref = {{ file = "lasso_stoch_zref.txt" }}
demiregular_b = true

[oracle]
kind = "empirical_quadratic"
k_dist = {{ kind = "mean_plus_gaussian", matrix = {{ file = "lasso_stoch_kmean.txt" }}, std = {sample_std} }}
z_dist = {{ kind = "gaussian", vector = {{ file = "lasso_stoch_zmean.txt" }}, std = {sample_std} }}

[schedule]
lambda = {{ kind = "power", scale = 1.0, exponent = -0.9 }}
gamma = {{ kind = "constant", value = {gamma_stoch:.17e} }}
batch = {{ c = 1.0, exponent = 1.2 }}

[run]
seeds = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20]
max_iters = 40000
thin = 1000
record_bias = true

[output]
dir = "out/lasso_stochastic"
"#
            ),
        ),
        (
            "varying_moreau.toml",
            format!(
                r#"# Deterministic lasso run with the smoothed-l1 resolvent family:
# the step-n operator smooths the l1 term with parameter rho_n = 2^-n,
# drifting from the fixed operator by at most beta_n = weight*sqrt(d)*rho_n.
[problem]
kind = "fb"

[problem.fb]
a = {{ kind = "l1", weight = {l1_weight} }}
b = {{ kind = "affine_gradient", k = {{ file = "lasso_k.txt" }}, z = {{ file = "lasso_z.txt" }} }}
x0 = {{ file = "lasso_x0.txt" }}
z_ref = {{ file = "lasso_zref.txt" }}

[problem.fb.varying]
kind = "moreau_l1"
weight = {l1_weight}
rho = {{ kind = "geometric", scale = 1.0, ratio = 0.5 }}
alpha = {{ kind = "constant", value = 0.0 }}
beta = {{ kind = "geometric", scale = {varying_beta0:.17e}, ratio = 0.5 }}

[schedule]
lambda = {{ kind = "constant", value = 1.0 }}
gamma = {{ kind = "constant", value = {gamma_det:.17e} }}

[run]
seeds = [42]
max_iters = 20000
residual_tol = 1e-8
thin = 1000

[output]
dir = "out/varying_moreau"
"#
            ),
        ),
        (
            "tv1d_deterministic.toml",
            format!(
                r#"# Deterministic primal-dual total-variation denoising in 1-D.
[problem]
kind = "pd"

[problem.pd]
f = {{ kind = "zero" }}
h = {{ kind = "affine_gradient", k = {{ file = "tv_identity.txt" }}, z = {{ file = "tv_b.txt" }} }}
w = {{ scale = {sigma_w} }}
mu = {sigma_w}
x0 = {{ file = "tv_x0.txt" }}
z_ref_primal = {{ file = "tv_zref_primal.txt" }}
demiregular_h = true

[[problem.pd.block]]
g = {{ kind = "l1", weight = {tv_weight} }}
j = {{ kind = "none", nu = 0.05 }}
l = {{ file = "tv_l.txt" }}
u = {{ scale = {tau_u} }}
z_ref = {{ file = "tv_zref_dual.txt" }}

[schedule]
lambda = {{ kind = "constant", value = 1.0 }}
gamma = {{ kind = "constant", value = 1.0 }}

[run]
seeds = [42]
max_iters = 30000
residual_tol = 1e-8
thin = 1000

[output]
dir = "out/tv1d_deterministic"
"#
            ),
        ),
        (
            "pd_additive_noise.toml",
            format!(
                r#"# Stochastic primal-dual TV run: unbiased additive noise on the
# smooth gradient with a summable L2 envelope.
[problem]
kind = "pd"

[problem.pd]
f = {{ kind = "zero" }}
h = {{ kind = "affine_gradient", k = {{ file = "tv_identity.txt" }}, z = {{ file = "tv_b.txt" }} }}
w = {{ scale = {sigma_w} }}
mu = {sigma_w}
x0 = {{ file = "tv_x0.txt" }}
z_ref_primal = {{ file = "tv_zref_primal.txt" }}
demiregular_h = true

[[problem.pd.block]]
g = {{ kind = "l1", weight = {tv_weight} }}
j = {{ kind = "none", nu = 0.05 }}
l = {{ file = "tv_l.txt" }}
u = {{ scale = {tau_u} }}
z_ref = {{ file = "tv_zref_dual.txt" }}

[oracle]
kind = "additive_noise"
shape = "gaussian"
scale = {{ kind = "power", scale = 0.5, exponent = -1.1 }}

[schedule]
lambda = {{ kind = "power", scale = 1.0, exponent = -0.9 }}
gamma = {{ kind = "constant", value = 1.0 }}

[run]
seeds = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10]
max_iters = 5000
thin = 1000

[output]
dir = "out/pd_additive_noise"
"#
            ),
        ),
        (
            "repro52.toml",
            format!(
                r#"# Growing-batch empirical-gradient construction: empirical estimates
# of the expected-quadratic gradient with m_n = 1 + ceil(c n^(1+delta))
# samples, relaxations lambda_n = (n+1)^-kappa, exact conjugate gradients,
# and a box-constrained primal term keeping the iterates bounded.
[problem]
kind = "pd"

[problem.pd]
f = {{ kind = "box", lo = -5.0, hi = 5.0 }}
h = {{ kind = "quadratic", q = {{ file = "r52_q.txt" }}, r = {{ file = "r52_r.txt" }} }}
w = {{ scale = 0.05 }}
mu = {mu52:.17e}
x0 = {{ file = "r52_x0.txt" }}
z_ref_primal = {{ file = "r52_zref_primal.txt" }}

[[problem.pd.block]]
g = {{ kind = "l1", weight = 0.1 }}
j = {{ kind = "none", nu = 0.1 }}
l = {{ file = "r52_l.txt" }}
u = {{ scale = 0.3 }}
z_ref = {{ file = "r52_zref_dual.txt" }}

[oracle]
kind = "empirical_quadratic"
k_dist = {{ kind = "mean_plus_gaussian", matrix = {{ file = "r52_kmean.txt" }}, std = 1.0 }}
z_dist = {{ kind = "gaussian", vector = {{ file = "r52_zmean.txt" }}, std = 1.0 }}

[schedule]
lambda = {{ kind = "power", scale = 1.0, exponent = -0.9 }}
gamma = {{ kind = "constant", value = 1.0 }}
batch = {{ c = 1.0, exponent = 1.2 }}

[run]
seeds = [42]
max_iters = 400
thin = 100

[output]
dir = "out/repro52"

[reproduce52]
delta = 0.2
kappa = 0.9
c = 1.0
n_iters = 400
variance_trials = 64
variance_stride = 1
"#,
                mu52 = mu52,
            ),
        ),
    ];
    // identity observation operator for the TV smooth term
    write_matrix_text(&dir.join("tv_identity.txt"), &DMatrix::identity(d, d)).unwrap();
    // coupling map for the r52 block
    write_matrix_text(&dir.join("r52_l.txt"), &(DMatrix::identity(n52, n52) * 0.3)).unwrap();

    for (name, body) in configs {
        std::fs::write(dir.join(name), body).unwrap();
        println!("wrote {name}");
    }
}
