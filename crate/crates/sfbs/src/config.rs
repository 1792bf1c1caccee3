//! Experiment configuration: a single TOML file validated against a strict
//! schema (unknown keys rejected), with matrices referenced by file path and
//! all paths resolved relative to the config file's directory.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::{CocoerciveMap, ProxFunction, ResolventOperator};
use crate::primal_dual::{JTerm, PdBlock, PdModel};
use crate::spaces::{read_matrix_text, read_vector_text, LinearMap, SpdMetric};
use crate::stochastic::{
    BatchRule, GradientOracle, IterationSchedule, MatrixDist, NoiseShape, PerturbationSource,
    Rule, SampleLedger, VectorDist,
};

/// Inline arrays are capped at this many entries; anything larger must live
/// in a referenced file.
pub const MAX_INLINE_ENTRIES: usize = 16;

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSection,
    #[serde(default)]
    pub oracle: OracleSection,
    pub schedule: ScheduleSection,
    pub run: RunSection,
    pub output: OutputSection,
    #[serde(default)]
    pub perturbation: PerturbationSection,
    #[serde(default)]
    pub reproduce52: Option<Reproduce52Section>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub kind: String,
    #[serde(default)]
    pub fb: Option<FbSection>,
    #[serde(default)]
    pub pd: Option<PdSection>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FbSection {
    pub a: FunctionSpec,
    #[serde(default)]
    pub b: Option<MapSpec>,
    pub x0: ArraySpec,
    #[serde(default)]
    pub z_ref: Option<ArraySpec>,
    /// Optional override for the declared cocoercivity constant.
    #[serde(default)]
    pub theta: Option<f64>,
    #[serde(default)]
    pub varying: Option<VaryingSpec>,
    #[serde(default)]
    pub demiregular_a: bool,
    #[serde(default)]
    pub demiregular_b: bool,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PdSection {
    pub f: FunctionSpec,
    pub h: MapSpec,
    pub w: MetricSpec,
    /// Lipschitz constant of the renormed smooth gradient; the string
    /// "estimate" triggers sampling-based estimation with a safety factor.
    pub mu: LipschitzSpec,
    pub x0: ArraySpec,
    #[serde(default)]
    pub z_ref_primal: Option<ArraySpec>,
    pub block: Vec<PdBlockSection>,
    #[serde(default)]
    pub demiregular_h: bool,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PdBlockSection {
    pub g: FunctionSpec,
    pub j: JSpec,
    pub l: MatrixSpec,
    pub u: MetricSpec,
    #[serde(default)]
    pub z_ref: Option<ArraySpec>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(untagged)]
pub enum LipschitzSpec {
    Declared(f64),
    Keyword(String),
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct JSpec {
    pub kind: String,
    #[serde(default)]
    pub nu: Option<f64>,
    #[serde(default)]
    pub rho: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct VaryingSpec {
    /// Only the smoothed-l1 family is built in: the step-n operator is the
    /// subdifferential of the smoothing of `weight * ||.||_1` with parameter
    /// `rho_n`, whose proximity map has the closed Huber form.
    pub kind: String,
    pub weight: f64,
    pub rho: RuleSpec,
    pub alpha: RuleSpec,
    pub beta: RuleSpec,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionSpec {
    pub kind: String,
    #[serde(default)]
    pub weight: Option<f64>,
    #[serde(default)]
    pub center: Option<ArraySpec>,
    #[serde(default)]
    pub lo: Option<f64>,
    #[serde(default)]
    pub hi: Option<f64>,
    #[serde(default)]
    pub dim: Option<usize>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MapSpec {
    pub kind: String,
    #[serde(default)]
    pub k: Option<MatrixSpec>,
    #[serde(default)]
    pub z: Option<ArraySpec>,
    #[serde(default)]
    pub q: Option<MatrixSpec>,
    #[serde(default)]
    pub r: Option<ArraySpec>,
    #[serde(default)]
    pub dim: Option<usize>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    #[serde(default)]
    pub scale: Option<f64>,
    #[serde(default)]
    pub file: Option<String>,
    #[serde(default)]
    pub dim: Option<usize>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    #[serde(default)]
    pub file: Option<String>,
    #[serde(default)]
    pub values: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ArraySpec {
    #[serde(default)]
    pub file: Option<String>,
    #[serde(default)]
    pub values: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    #[serde(default = "default_exact")]
    pub kind: String,
    #[serde(default)]
    pub shape: Option<String>,
    #[serde(default)]
    pub scale: Option<RuleSpec>,
    #[serde(default)]
    pub k_dist: Option<MatrixDistSpec>,
    #[serde(default)]
    pub z_dist: Option<VectorDistSpec>,
}

fn default_exact() -> String {
    "exact".into()
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            kind: default_exact(),
            shape: None,
            scale: None,
            k_dist: None,
            z_dist: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixDistSpec {
    pub kind: String,
    #[serde(default)]
    pub matrix: Option<MatrixSpec>,
    #[serde(default)]
    pub rows: Option<usize>,
    #[serde(default)]
    pub cols: Option<usize>,
    #[serde(default)]
    pub std: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct VectorDistSpec {
    pub kind: String,
    #[serde(default)]
    pub vector: Option<ArraySpec>,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub std: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSection {
    #[serde(default = "default_zero")]
    pub kind: String,
    #[serde(default)]
    pub shape: Option<String>,
    #[serde(default)]
    pub magnitude: Option<RuleSpec>,
}

fn default_zero() -> String {
    "zero".into()
}

impl Default for PerturbationSection {
    fn default() -> Self {
        Self {
            kind: default_zero(),
            shape: None,
            magnitude: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub kind: String,
    #[serde(default)]
    pub value: Option<f64>,
    #[serde(default)]
    pub scale: Option<f64>,
    #[serde(default)]
    pub exponent: Option<f64>,
    #[serde(default)]
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub lambda: RuleSpec,
    pub gamma: RuleSpec,
    #[serde(default)]
    pub tau: Option<RuleSpec>,
    #[serde(default)]
    pub batch: Option<BatchSpec>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSpec {
    pub c: f64,
    pub exponent: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub max_iters: usize,
    #[serde(default)]
    pub residual_tol: Option<f64>,
    #[serde(default = "default_thin")]
    pub thin: usize,
    #[serde(default = "default_true")]
    pub audit_exact: bool,
    #[serde(default)]
    pub record_bias: bool,
    /// Start runs even when the certificate fails.
    #[serde(default)]
    pub force: bool,
}

fn default_thin() -> usize {
    100
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
}

fn default_formats() -> Vec<String> {
    vec!["csv".into(), "json".into()]
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Reproduce52Section {
    pub delta: f64,
    pub kappa: f64,
    #[serde(default = "default_c")]
    pub c: f64,
    pub n_iters: usize,
    #[serde(default = "default_trials")]
    pub variance_trials: usize,
    /// Monte Carlo variance estimates are taken every `stride`-th step.
    #[serde(default = "default_stride")]
    pub variance_stride: usize,
}

fn default_c() -> f64 {
    1.0
}

fn default_trials() -> usize {
    64
}

fn default_stride() -> usize {
    1
}

/// Environment variable overriding the output root directory.
pub const OUTPUT_ROOT_ENV: &str = "SFBS_OUTPUT_ROOT";

/// A parsed config together with the directory its relative paths resolve
/// against and the digest of the raw bytes.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
    pub digest: String,
    pub raw: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let config: ExperimentConfig = toml::from_str(&raw)
        .map_err(|e| Error::Config(format!("config {} is invalid: {e}", path.display())))?;
    validate(&config)?;
    let base_dir = path
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(LoadedConfig {
        digest: sha256_hex(raw.as_bytes()),
        config,
        base_dir,
        raw,
    })
}

fn validate(config: &ExperimentConfig) -> Result<()> {
    match config.problem.kind.as_str() {
        "fb" => {
            if config.problem.fb.is_none() {
                return Err(Error::Config("problem.kind = \"fb\" needs a [problem.fb] table".into()));
            }
        }
        "pd" => {
            if config.problem.pd.is_none() {
                return Err(Error::Config("problem.kind = \"pd\" needs a [problem.pd] table".into()));
            }
        }
        other => {
            return Err(Error::Config(format!(
                "problem.kind must be \"fb\" or \"pd\", got {other:?}"
            )))
        }
    }
    if config.run.seeds.is_empty() {
        return Err(Error::Config("run.seeds must not be empty".into()));
    }
    Ok(())
}

impl LoadedConfig {
    fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        match std::env::var(OUTPUT_ROOT_ENV) {
            Ok(root) if !root.is_empty() => Path::new(&root).join(&self.config.output.dir),
            _ => self.resolve(&self.config.output.dir),
        }
    }

    pub fn load_matrix(&self, spec: &MatrixSpec) -> Result<DMatrix<f64>> {
        match (&spec.file, &spec.values) {
            (Some(f), None) => read_matrix_text(&self.resolve(f)),
            (None, Some(rows)) => {
                let total: usize = rows.iter().map(|r| r.len()).sum();
                if total > MAX_INLINE_ENTRIES {
                    return Err(Error::Config(format!(
                        "inline matrix has {total} entries; matrices above {MAX_INLINE_ENTRIES} entries must be referenced by file"
                    )));
                }
                if rows.is_empty() || rows.iter().any(|r| r.len() != rows[0].len()) {
                    return Err(Error::Config("inline matrix rows must be nonempty and even".into()));
                }
                let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
                Ok(DMatrix::from_row_slice(rows.len(), rows[0].len(), &flat))
            }
            _ => Err(Error::Config(
                "matrix spec needs exactly one of `file` or `values`".into(),
            )),
        }
    }

    pub fn load_vector(&self, spec: &ArraySpec) -> Result<DVector<f64>> {
        match (&spec.file, &spec.values) {
            (Some(f), None) => read_vector_text(&self.resolve(f)),
            (None, Some(vals)) => {
                if vals.len() > MAX_INLINE_ENTRIES {
                    return Err(Error::Config(format!(
                        "inline vector has {} entries; vectors above {MAX_INLINE_ENTRIES} entries must be referenced by file",
                        vals.len()
                    )));
                }
                Ok(DVector::from_vec(vals.clone()))
            }
            _ => Err(Error::Config(
                "array spec needs exactly one of `file` or `values`".into(),
            )),
        }
    }

    pub fn build_rule(&self, spec: &RuleSpec) -> Result<Rule> {
        match spec.kind.as_str() {
            "constant" => Ok(Rule::Constant(spec.value.ok_or_else(|| {
                Error::Config("constant rule needs `value`".into())
            })?)),
            "power" => Ok(Rule::Power {
                scale: spec
                    .scale
                    .ok_or_else(|| Error::Config("power rule needs `scale`".into()))?,
                exponent: spec
                    .exponent
                    .ok_or_else(|| Error::Config("power rule needs `exponent`".into()))?,
            }),
            "geometric" => Ok(Rule::Geometric {
                scale: spec
                    .scale
                    .ok_or_else(|| Error::Config("geometric rule needs `scale`".into()))?,
                ratio: spec
                    .ratio
                    .ok_or_else(|| Error::Config("geometric rule needs `ratio`".into()))?,
            }),
            other => Err(Error::Config(format!("unknown rule kind {other:?}"))),
        }
    }

    pub fn build_function(&self, spec: &FunctionSpec, dim: usize) -> Result<ProxFunction> {
        match spec.kind.as_str() {
            "zero" => Ok(ProxFunction::Zero),
            "l1" => ProxFunction::l1(spec.weight.unwrap_or(1.0)),
            "squared_l2" => {
                let center = match &spec.center {
                    Some(c) => self.load_vector(c)?,
                    None => DVector::zeros(dim),
                };
                ProxFunction::squared_l2(spec.weight.unwrap_or(1.0), center)
            }
            "box" => {
                let lo = spec
                    .lo
                    .ok_or_else(|| Error::Config("box function needs `lo`".into()))?;
                let hi = spec
                    .hi
                    .ok_or_else(|| Error::Config("box function needs `hi`".into()))?;
                ProxFunction::uniform_box(dim, lo, hi)
            }
            other => Err(Error::Config(format!("unknown function kind {other:?}"))),
        }
    }

    pub fn build_map(&self, spec: &MapSpec) -> Result<CocoerciveMap> {
        match spec.kind.as_str() {
            "zero" => {
                let dim = spec
                    .dim
                    .ok_or_else(|| Error::Config("zero map needs `dim`".into()))?;
                Ok(CocoerciveMap::zero(dim))
            }
            "identity" => {
                let dim = spec
                    .dim
                    .ok_or_else(|| Error::Config("identity map needs `dim`".into()))?;
                Ok(CocoerciveMap::identity(dim))
            }
            "affine_gradient" => {
                let k = self.load_matrix(
                    spec.k
                        .as_ref()
                        .ok_or_else(|| Error::Config("affine_gradient needs `k`".into()))?,
                )?;
                let z = self.load_vector(
                    spec.z
                        .as_ref()
                        .ok_or_else(|| Error::Config("affine_gradient needs `z`".into()))?,
                )?;
                CocoerciveMap::affine_gradient(k, z)
            }
            "quadratic" => {
                let q = self.load_matrix(
                    spec.q
                        .as_ref()
                        .ok_or_else(|| Error::Config("quadratic map needs `q`".into()))?,
                )?;
                let r = self.load_vector(
                    spec.r
                        .as_ref()
                        .ok_or_else(|| Error::Config("quadratic map needs `r`".into()))?,
                )?;
                CocoerciveMap::quadratic(q, r)
            }
            other => Err(Error::Config(format!("unknown map kind {other:?}"))),
        }
    }

    pub fn build_metric(&self, spec: &MetricSpec, dim: usize) -> Result<SpdMetric> {
        match (&spec.scale, &spec.file) {
            (Some(s), None) => SpdMetric::scaled_identity(spec.dim.unwrap_or(dim), *s),
            (None, Some(f)) => SpdMetric::new(read_matrix_text(&self.resolve(f))?),
            _ => Err(Error::Config(
                "metric spec needs exactly one of `scale` or `file`".into(),
            )),
        }
    }

    pub fn build_schedule(&self) -> Result<IterationSchedule> {
        let s = &self.config.schedule;
        let tau = match &s.tau {
            Some(t) => self.build_rule(t)?,
            None => Rule::zero(),
        };
        let mut sched =
            IterationSchedule::new(self.build_rule(&s.lambda)?, self.build_rule(&s.gamma)?, tau)?;
        if let Some(b) = &s.batch {
            sched = sched.with_batch(BatchRule::new(b.c, b.exponent)?);
        }
        if let Some(fb) = &self.config.problem.fb {
            if let Some(v) = &fb.varying {
                sched = sched.with_drift(self.build_rule(&v.alpha)?, self.build_rule(&v.beta)?);
            }
        }
        Ok(sched)
    }

    fn noise_shape(name: &Option<String>) -> Result<NoiseShape> {
        match name.as_deref() {
            Some("gaussian") | None => Ok(NoiseShape::GaussianUnit),
            Some("ball") => Ok(NoiseShape::Ball),
            Some(other) => Err(Error::Config(format!("unknown noise shape {other:?}"))),
        }
    }

    pub fn build_matrix_dist(&self, spec: &MatrixDistSpec) -> Result<MatrixDist> {
        match spec.kind.as_str() {
            "constant" => Ok(MatrixDist::Constant(self.load_matrix(
                spec.matrix
                    .as_ref()
                    .ok_or_else(|| Error::Config("constant matrix dist needs `matrix`".into()))?,
            )?)),
            "gaussian_iid" => Ok(MatrixDist::GaussianIid {
                rows: spec
                    .rows
                    .ok_or_else(|| Error::Config("gaussian_iid needs `rows`".into()))?,
                cols: spec
                    .cols
                    .ok_or_else(|| Error::Config("gaussian_iid needs `cols`".into()))?,
                std: spec.std.unwrap_or(1.0),
            }),
            "mean_plus_gaussian" => Ok(MatrixDist::MeanPlusGaussian {
                mean: self.load_matrix(spec.matrix.as_ref().ok_or_else(|| {
                    Error::Config("mean_plus_gaussian needs `matrix`".into())
                })?)?,
                std: spec.std.unwrap_or(1.0),
            }),
            other => Err(Error::Config(format!("unknown matrix dist {other:?}"))),
        }
    }

    pub fn build_vector_dist(&self, spec: &VectorDistSpec) -> Result<VectorDist> {
        match spec.kind.as_str() {
            "constant" => Ok(VectorDist::Constant(self.load_vector(
                spec.vector
                    .as_ref()
                    .ok_or_else(|| Error::Config("constant vector dist needs `vector`".into()))?,
            )?)),
            "gaussian" => {
                let mean = match &spec.vector {
                    Some(v) => self.load_vector(v)?,
                    None => DVector::zeros(spec.dim.ok_or_else(|| {
                        Error::Config("gaussian vector dist needs `vector` or `dim`".into())
                    })?),
                };
                Ok(VectorDist::Gaussian {
                    mean,
                    std: spec.std.unwrap_or(1.0),
                })
            }
            other => Err(Error::Config(format!("unknown vector dist {other:?}"))),
        }
    }

    /// Build the gradient oracle for one seeded run. The exact base map (for
    /// exact and additive-noise kinds) is supplied by the problem builder.
    pub fn build_oracle(&self, base: Option<&CocoerciveMap>, seed: u64) -> Result<GradientOracle> {
        let o = &self.config.oracle;
        match o.kind.as_str() {
            "exact" => {
                let map = base
                    .ok_or_else(|| Error::Config("exact oracle needs the problem's map".into()))?;
                Ok(GradientOracle::exact(map.clone()))
            }
            "additive_noise" => {
                let map = base.ok_or_else(|| {
                    Error::Config("additive_noise oracle needs the problem's map".into())
                })?;
                let scale = self.build_rule(o.scale.as_ref().ok_or_else(|| {
                    Error::Config("additive_noise oracle needs `scale`".into())
                })?)?;
                Ok(GradientOracle::additive_noise(
                    map.clone(),
                    Self::noise_shape(&o.shape)?,
                    scale,
                    seed,
                ))
            }
            "empirical_quadratic" => {
                let kd = self.build_matrix_dist(o.k_dist.as_ref().ok_or_else(|| {
                    Error::Config("empirical_quadratic oracle needs `k_dist`".into())
                })?)?;
                let zd = self.build_vector_dist(o.z_dist.as_ref().ok_or_else(|| {
                    Error::Config("empirical_quadratic oracle needs `z_dist`".into())
                })?)?;
                let batch = self
                    .config
                    .schedule
                    .batch
                    .as_ref()
                    .ok_or_else(|| {
                        Error::Config("empirical_quadratic oracle needs schedule.batch".into())
                    })
                    .and_then(|b| BatchRule::new(b.c, b.exponent))?;
                let ledger = SampleLedger::new(seed, kd, zd)?;
                GradientOracle::empirical_quadratic(ledger, batch)
            }
            other => Err(Error::Config(format!("unknown oracle kind {other:?}"))),
        }
    }

    pub fn build_perturbation(&self, seed: u64) -> Result<PerturbationSource> {
        let p = &self.config.perturbation;
        match p.kind.as_str() {
            "zero" => Ok(PerturbationSource::Zero),
            "decaying" => {
                let magnitude = self.build_rule(p.magnitude.as_ref().ok_or_else(|| {
                    Error::Config("decaying perturbation needs `magnitude`".into())
                })?)?;
                Ok(PerturbationSource::decaying(
                    Self::noise_shape(&p.shape)?,
                    magnitude,
                    seed,
                ))
            }
            other => Err(Error::Config(format!("unknown perturbation kind {other:?}"))),
        }
    }

    pub fn build_pd_model(&self) -> Result<PdModel> {
        let pd = self
            .config
            .problem
            .pd
            .as_ref()
            .ok_or_else(|| Error::Config("missing [problem.pd]".into()))?;
        let h = self.build_map(&pd.h)?;
        let dim_h = h.dim();
        let w = self.build_metric(&pd.w, dim_h)?;
        let f = self.build_function(&pd.f, dim_h)?;
        let mut blocks = Vec::with_capacity(pd.block.len());
        for (k, bs) in pd.block.iter().enumerate() {
            let l = LinearMap::new(self.load_matrix(&bs.l)?)?;
            let u = self.build_metric(&bs.u, l.rows())?;
            let g = self.build_function(&bs.g, l.rows())?;
            let j = match bs.j.kind.as_str() {
                "none" => JTerm::None {
                    nu: bs.j.nu.ok_or_else(|| {
                        Error::Config(format!("block {k}: j.kind = \"none\" needs an explicit `nu`"))
                    })?,
                },
                "quadratic" => JTerm::Quadratic {
                    rho: bs.j.rho.ok_or_else(|| {
                        Error::Config(format!("block {k}: quadratic j needs `rho`"))
                    })?,
                },
                other => {
                    return Err(Error::Config(format!(
                        "block {k}: unknown j kind {other:?}"
                    )))
                }
            };
            blocks.push(PdBlock::new(g, j, l, u)?);
        }
        let mut model = PdModel::new(f, h, blocks, w, 1.0)?;
        model.mu = match &pd.mu {
            LipschitzSpec::Declared(v) => *v,
            LipschitzSpec::Keyword(k) if k == "estimate" => {
                crate::primal_dual::estimate_mu(&model, 1000, 0x6d75)?
            }
            LipschitzSpec::Keyword(k) => {
                return Err(Error::Config(format!(
                    "mu must be a number or \"estimate\", got {k:?}"
                )))
            }
        };
        model.demiregular_h = pd.demiregular_h;
        if let Some(zx) = &pd.z_ref_primal {
            let zx = self.load_vector(zx)?;
            let mut zv_blocks = Vec::new();
            for (k, bs) in pd.block.iter().enumerate() {
                let spec = bs.z_ref.as_ref().ok_or_else(|| {
                    Error::Config(format!(
                        "primal z_ref given but block {k} has no dual z_ref"
                    ))
                })?;
                zv_blocks.push(self.load_vector(spec)?);
            }
            let zv = crate::spaces::BlockVector::new(zv_blocks)?;
            model = model.with_z_ref(zx, zv);
        }
        Ok(model)
    }

    /// Forward-backward problem pieces: resolvent operator, exact map,
    /// starting point, references, optional varying family, and theta.
    pub fn build_fb_problem(&self) -> Result<FbBuild> {
        let fb = self
            .config
            .problem
            .fb
            .as_ref()
            .ok_or_else(|| Error::Config("missing [problem.fb]".into()))?;
        let x0 = self.load_vector(&fb.x0)?;
        let dim = x0.len();
        let a_fun = self.build_function(&fb.a, dim)?;
        let b = match &fb.b {
            Some(spec) => Some(self.build_map(spec)?),
            None => None,
        };
        let z_refs = match &fb.z_ref {
            Some(z) => vec![self.load_vector(z)?],
            None => Vec::new(),
        };
        let varying = match &fb.varying {
            Some(v) => {
                if v.kind != "moreau_l1" {
                    return Err(Error::Config(format!(
                        "unknown varying family {:?} (only \"moreau_l1\" is built in)",
                        v.kind
                    )));
                }
                Some(VaryingBuild {
                    weight: v.weight,
                    rho: self.build_rule(&v.rho)?,
                })
            }
            None => None,
        };
        Ok(FbBuild {
            a: ResolventOperator::Subdifferential(a_fun),
            b,
            x0,
            z_refs,
            theta_override: fb.theta,
            varying,
            demiregular_a: fb.demiregular_a,
            demiregular_b: fb.demiregular_b,
        })
    }
}

impl std::fmt::Debug for FbBuild {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FbBuild(dim {})", self.x0.len())
    }
}

pub struct VaryingBuild {
    pub weight: f64,
    pub rho: Rule,
}

pub struct FbBuild {
    pub a: ResolventOperator,
    pub b: Option<CocoerciveMap>,
    pub x0: DVector<f64>,
    pub z_refs: Vec<DVector<f64>>,
    pub theta_override: Option<f64>,
    pub varying: Option<VaryingBuild>,
    pub demiregular_a: bool,
    pub demiregular_b: bool,
}

/// Machine-readable description of the accepted configuration schema.
pub fn config_schema() -> serde_json::Value {
    serde_json::json!({
        "format": "sfbs experiment config v1 (TOML)",
        "sections": {
            "problem": {
                "kind": "\"fb\" | \"pd\"",
                "fb": {
                    "a": "function spec: {kind: zero|l1|squared_l2|box, ...}",
                    "b": "map spec (optional when oracle is empirical_quadratic): {kind: zero|identity|affine_gradient|quadratic, ...}",
                    "x0": "{file} or {values} (inline capped at 16 entries)",
                    "z_ref": "optional reference point",
                    "theta": "optional cocoercivity override",
                    "varying": "{kind: moreau_l1, weight, rho: rule, alpha: rule, beta: rule}",
                    "demiregular_a": "bool", "demiregular_b": "bool"
                },
                "pd": {
                    "f": "function spec", "h": "map spec", "w": "{scale} or {file}",
                    "mu": "number or \"estimate\"",
                    "x0": "array spec", "z_ref_primal": "optional array spec",
                    "block": "[{g, j: {kind: none|quadratic, nu|rho}, l: matrix spec, u: metric spec, z_ref}]",
                    "demiregular_h": "bool"
                }
            },
            "oracle": {
                "kind": "exact | additive_noise | empirical_quadratic",
                "shape": "gaussian | ball (additive_noise)",
                "scale": "rule (additive_noise)",
                "k_dist": "{kind: constant|gaussian_iid|mean_plus_gaussian, ...} (empirical)",
                "z_dist": "{kind: constant|gaussian, ...} (empirical)"
            },
            "perturbation": {
                "kind": "zero | decaying",
                "shape": "gaussian | ball",
                "magnitude": "rule"
            },
            "schedule": {
                "lambda": "rule: {kind: constant|power|geometric, value|scale, exponent, ratio}",
                "gamma": "rule",
                "tau": "rule (optional, default 0)",
                "batch": "{c, exponent} (required by empirical oracles)"
            },
            "run": {
                "seeds": "[u64]", "max_iters": "usize",
                "residual_tol": "optional f64", "thin": "usize (default 100)",
                "audit_exact": "bool (default true)", "record_bias": "bool",
                "force": "bool (run despite certificate failure)"
            },
            "output": { "dir": "path (relative to config)", "formats": "[csv|json]" },
            "reproduce52": {
                "delta": "> 0", "kappa": "in ]1-delta, 1] ∩ [0, 1]",
                "c": "batch constant (default 1)", "n_iters": "usize",
                "variance_trials": "usize (default 64)",
                "variance_stride": "usize (default 1)"
            }
        },
        "exit_codes": { "0": "certificates pass, runs converge", "2": "certificate failure", "3": "divergence", "4": "config error" },
        "env": { OUTPUT_ROOT_ENV: "overrides the output root directory" },
        "trace_csv": { "format_line": crate::diagnostics::TRACE_FORMAT_LINE, "numbers": "17 significant digits, bit-faithful re-import" }
    })
}
