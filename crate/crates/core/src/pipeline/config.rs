//! Pipeline configuration, read from TOML. Every block validates before any
//! stage runs and unknown keys are rejected.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::eki::EkiConfig;
use crate::error::{CesError, Result};
use crate::gp::{GpConfig, DEFAULT_MAX_JITTER, MIN_TRAINING_PAIRS};
use crate::io;
use crate::mcmc::{ChainConfig, MIN_REGION_SAMPLES};
use crate::model::Scenario;
use crate::model::{ForwardModel, LinearModel, Lorenz96, Lorenz96Config};
use crate::noise::{Boundary, BoundarySpec, UnboundedDistance};
use crate::params::{Bounds, ParameterDef, ParameterSpace};
use crate::predict::{PredictionSpec, ScenarioSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; every random stream of the run is derived from it.
    pub seed: u64,
    /// Number of noisy data realizations.
    pub realizations: usize,
    pub model: ModelConfig,
    pub parameters: Vec<ParameterDef>,
    /// Full prior covariance in computational space. When present its
    /// diagonal replaces each `prior_var`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_covariance: Option<Vec<Vec<f64>>>,
    pub noise: NoiseConfig,
    pub eki: EkiBlock,
    pub gp: GpBlock,
    pub mcmc: McmcBlock,
    pub predict: PredictionSpec,
    pub benchmark: BenchmarkConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Lorenz96,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Averaging window T.
    pub window: f64,
    /// Warm-up discarded before averaging; one window when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spin_up: Option<f64>,
    /// Physical parameters used to generate the synthetic data.
    pub truth: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lorenz96: Option<Lorenz96Config>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear: Option<LinearConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearConfig {
    /// Rows of A in G(theta) = A theta.
    pub matrix: Vec<Vec<f64>>,
    /// Covariance of window averages at `reference_window`; none means an
    /// exactly linear map.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub internal_covariance: Option<Vec<Vec<f64>>>,
    #[serde(default = "one")]
    pub reference_window: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Consecutive windows of the long truth run used to estimate Sigma.
    pub n_windows: usize,
    pub c_infl: f64,
    /// Boundary distance rule for indices without a physical boundary.
    pub unbounded: UnboundedDistance,
    /// Per-index boundaries; the model's own when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundaries: Option<Vec<Boundary>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EkiBlock {
    pub ensemble_size: usize,
    pub n_iter: usize,
    /// Diagnostic iterations after the training iterations.
    pub extra_iter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpBlock {
    pub restarts: usize,
    pub max_iter: usize,
    /// Jitter ladder ceiling relative to the kernel variance.
    pub max_jitter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcBlock {
    pub n_burn: usize,
    pub n_samples: usize,
    pub step_scale: f64,
    pub target_acceptance: f64,
    pub adapt_interval: usize,
    pub adapt_rate: f64,
    pub min_step_scale: f64,
    pub n_chains: usize,
    /// Every `storage_stride`-th state is written to the chain table.
    pub storage_stride: usize,
    /// Sample cap for the credible-region density estimate.
    pub hpd_max_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// Grid nodes per parameter.
    pub shape: Vec<usize>,
    /// Half-width of the grid box in posterior standard deviations around
    /// the posterior mean, in computational space.
    pub width: f64,
    /// Explicit computational-space box; overrides `width`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranges: Option<Vec<(f64, f64)>>,
    /// Largest admissible number of grid nodes.
    pub budget: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let forcing_max = 14.0;
        PipelineConfig {
            seed: 20_240_901,
            realizations: 4,
            model: ModelConfig {
                kind: ModelKind::Lorenz96,
                window: 20.0,
                spin_up: None,
                truth: vec![10.0, 0.8],
                lorenz96: Some(Lorenz96Config {
                    forcing_max,
                    exceedance_threshold: 9.0,
                    ..Lorenz96Config::default()
                }),
                linear: None,
            },
            parameters: vec![
                ParameterDef::new(
                    "forcing",
                    Bounds::Interval {
                        lower: 0.0,
                        upper: forcing_max,
                    },
                    0.0,
                    1.0,
                ),
                ParameterDef::new("tau", Bounds::Positive, 0.0, 1.0),
            ],
            prior_covariance: None,
            noise: NoiseConfig::default(),
            eki: EkiBlock::default(),
            gp: GpBlock::default(),
            mcmc: McmcBlock::default(),
            predict: PredictionSpec::default(),
            benchmark: BenchmarkConfig::default(),
        }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            n_windows: 600,
            c_infl: BoundarySpec::DEFAULT_C_INFL,
            unbounded: UnboundedDistance::Fixed(0.25),
            boundaries: None,
        }
    }
}

impl Default for EkiBlock {
    fn default() -> Self {
        let e = EkiConfig::default();
        EkiBlock {
            ensemble_size: e.ensemble_size,
            n_iter: e.n_iter,
            extra_iter: e.extra_iter,
        }
    }
}

impl Default for GpBlock {
    fn default() -> Self {
        let g = GpConfig::default();
        GpBlock {
            restarts: g.restarts,
            max_iter: g.max_iter,
            max_jitter: DEFAULT_MAX_JITTER,
        }
    }
}

impl Default for McmcBlock {
    fn default() -> Self {
        let c = ChainConfig::default();
        McmcBlock {
            n_burn: c.n_burn,
            n_samples: c.n_samples,
            step_scale: c.step_scale,
            target_acceptance: c.target_acceptance,
            adapt_interval: c.adapt_interval,
            adapt_rate: c.adapt_rate,
            min_step_scale: c.min_step_scale,
            n_chains: 1,
            storage_stride: 1,
            hpd_max_points: 4000,
        }
    }
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            shape: vec![20, 20],
            width: 5.0,
            ranges: None,
            budget: 400,
        }
    }
}

fn config_err(e: CesError) -> CesError {
    match e {
        CesError::Config(_) => e,
        other => CesError::Config(other.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(CesError::Config(format!(
            "{what} must be a non-empty rectangular matrix"
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CesError::Config(format!("{what} has non-finite entries")));
    }
    Ok(DMatrix::from_row_iterator(
        n,
        m,
        rows.iter().flatten().copied(),
    ))
}

impl PipelineConfig {
    /// Default configuration for the linear-Gaussian model, whose posterior is
    /// known in closed form.
    pub fn linear_default() -> Self {
        let base = PipelineConfig::default();
        PipelineConfig {
            model: ModelConfig {
                kind: ModelKind::Linear,
                window: 1.0,
                spin_up: Some(0.0),
                truth: vec![1.0, -0.5],
                lorenz96: None,
                linear: Some(LinearConfig {
                    matrix: vec![vec![1.0, 0.5], vec![-0.3, 1.0], vec![0.8, 0.8]],
                    // Small next to the measurement noise, so the emulator
                    // is nearly exact and the closed-form posterior applies.
                    internal_covariance: Some(vec![
                        vec![4e-4, 1e-4, 0.0],
                        vec![1e-4, 5e-4, 0.0],
                        vec![0.0, 0.0, 3e-4],
                    ]),
                    reference_window: 1.0,
                }),
            },
            parameters: vec![
                ParameterDef::new("a", Bounds::Unbounded, 0.0, 1.0),
                ParameterDef::new("b", Bounds::Unbounded, 0.0, 1.0),
            ],
            // delta = C_infl * 1 = 0.2 on every output.
            noise: NoiseConfig {
                unbounded: UnboundedDistance::Fixed(1.0),
                ..base.noise.clone()
            },
            // Two parameters and a linear map need far fewer members; the
            // smaller training set keeps a full-length chain under two minutes.
            eki: EkiBlock {
                ensemble_size: 50,
                ..base.eki
            },
            predict: PredictionSpec {
                long_window: 1.0,
                scenarios: vec![ScenarioSpec {
                    name: "control".into(),
                    knobs: Scenario::control(),
                }],
                ..PredictionSpec::default()
            },
            ..base
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| CesError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CesError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CesError::Config(m) => CesError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| CesError::Config(format!("cannot encode config: {e}")))
    }

    /// SHA-256 of the canonical JSON form, so comments and key order in the
    /// TOML file do not change it.
    pub fn hash(&self) -> String {
        io::sha256_hex(&serde_json::to_vec(self).expect("config always serializes"))
    }

    pub fn build_model(&self) -> Result<Box<dyn ForwardModel>> {
        let m = &self.model;
        let model: Box<dyn ForwardModel> = match m.kind {
            ModelKind::Lorenz96 => {
                if m.linear.is_some() {
                    return Err(CesError::Config(
                        "model.linear given for a lorenz96 model".into(),
                    ));
                }
                let spin = m.spin_up.unwrap_or(m.window);
                Box::new(
                    Lorenz96::new(m.lorenz96.clone().unwrap_or_default(), spin)
                        .map_err(config_err)?,
                )
            }
            ModelKind::Linear => {
                if m.lorenz96.is_some() {
                    return Err(CesError::Config(
                        "model.lorenz96 given for a linear model".into(),
                    ));
                }
                let lin = m.linear.as_ref().ok_or_else(|| {
                    CesError::Config("model.kind = \"linear\" needs a [model.linear] table".into())
                })?;
                let a = matrix(&lin.matrix, "model.linear.matrix")?;
                let mut model = LinearModel::new(a);
                if let Some(c) = &lin.internal_covariance {
                    let c = matrix(c, "model.linear.internal_covariance")?;
                    model = model
                        .with_internal_noise(&c, lin.reference_window)
                        .map_err(config_err)?;
                }
                Box::new(model)
            }
        };
        Ok(model)
    }

    pub fn space(&self) -> Result<ParameterSpace> {
        match &self.prior_covariance {
            None => ParameterSpace::new(self.parameters.clone()),
            Some(c) => ParameterSpace::with_covariance(
                self.parameters.clone(),
                matrix(c, "prior_covariance")?,
            ),
        }
        .map_err(config_err)
    }

    pub fn boundary_spec(&self, model: &dyn ForwardModel) -> BoundarySpec {
        BoundarySpec {
            boundaries: self
                .noise
                .boundaries
                .clone()
                .unwrap_or_else(|| model.output_boundaries()),
            c_infl: self.noise.c_infl,
            unbounded: self.noise.unbounded,
        }
    }

    pub fn eki_config(&self, seed: u64) -> EkiConfig {
        EkiConfig {
            ensemble_size: self.eki.ensemble_size,
            n_iter: self.eki.n_iter,
            extra_iter: self.eki.extra_iter,
            window: self.model.window,
            seed,
        }
    }

    pub fn gp_config(&self, seed: u64) -> GpConfig {
        GpConfig {
            restarts: self.gp.restarts,
            max_iter: self.gp.max_iter,
            seed,
            max_jitter: self.gp.max_jitter,
        }
    }

    pub fn chain_config(&self, seed: u64) -> ChainConfig {
        let m = &self.mcmc;
        ChainConfig {
            n_burn: m.n_burn,
            n_samples: m.n_samples,
            step_scale: m.step_scale,
            target_acceptance: m.target_acceptance,
            seed,
            adapt_interval: m.adapt_interval,
            adapt_rate: m.adapt_rate,
            min_step_scale: m.min_step_scale,
        }
    }

    /// Full validation; every failure is a configuration error.
    pub fn validate(&self) -> Result<()> {
        self.validate_inner().map_err(config_err)
    }

    fn validate_inner(&self) -> Result<()> {
        let bad = |m: String| Err(CesError::Config(m));
        if self.realizations == 0 {
            return bad("realizations must be at least 1".into());
        }
        let m = &self.model;
        if !(m.window > 0.0 && m.window.is_finite()) {
            return bad(format!("model.window must be positive, got {}", m.window));
        }
        if let Some(s) = m.spin_up {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("model.spin_up must be non-negative, got {s}"));
            }
        }
        let model = self.build_model()?;
        let space = self.space()?;
        if space.dim() != model.param_dim() {
            return bad(format!(
                "{} parameters configured but model {} has {}",
                space.dim(),
                model.name(),
                model.param_dim()
            ));
        }
        for (def, b) in self.parameters.iter().zip(model.param_bounds()) {
            if def.bounds != b {
                return bad(format!(
                    "parameter {}: bounds {:?} differ from the model's {:?}",
                    def.name, def.bounds, b
                ));
            }
        }
        let mut names: Vec<&str> = space.names();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("parameter names must be unique".into());
        }
        model.check_theta(&m.truth)?;

        let n = &self.noise;
        if n.n_windows < 2 {
            return bad("noise.n_windows must be at least 2".into());
        }
        if !(n.c_infl >= 0.0 && n.c_infl.is_finite()) {
            return bad(format!(
                "noise.c_infl must be non-negative, got {}",
                n.c_infl
            ));
        }
        if let UnboundedDistance::Fixed(d) = n.unbounded {
            if !(d >= 0.0 && d.is_finite()) {
                return bad(format!(
                    "noise.unbounded fixed distance must be non-negative, got {d}"
                ));
            }
        }
        if let Some(b) = &n.boundaries {
            if b.len() != model.data_dim() {
                return bad(format!(
                    "noise.boundaries has {} entries, model has {} outputs",
                    b.len(),
                    model.data_dim()
                ));
            }
        }

        let e = &self.eki;
        if e.ensemble_size < 2 || e.n_iter < 1 {
            return bad("eki needs ensemble_size >= 2 and n_iter >= 1".into());
        }
        if (e.n_iter + 1) * e.ensemble_size < MIN_TRAINING_PAIRS {
            return bad(format!(
                "eki yields {} training pairs; the emulator needs at least {MIN_TRAINING_PAIRS}",
                (e.n_iter + 1) * e.ensemble_size
            ));
        }
        if self.gp.max_iter == 0 {
            return bad("gp.max_iter must be positive".into());
        }
        self.gp_config(0).validate()?;

        let mc = &self.mcmc;
        self.chain_config(0).validate()?;
        if mc.n_chains == 0 || mc.storage_stride == 0 {
            return bad("mcmc.n_chains and mcmc.storage_stride must be positive".into());
        }
        if mc.hpd_max_points < MIN_REGION_SAMPLES {
            return bad(format!(
                "mcmc.hpd_max_points must be at least {MIN_REGION_SAMPLES}"
            ));
        }
        let stored = mc.n_samples.div_ceil(mc.storage_stride);
        if stored < MIN_REGION_SAMPLES {
            return bad(format!(
                "only {stored} chain states would be stored; credible regions need {MIN_REGION_SAMPLES}"
            ));
        }

        let p = &self.predict;
        p.validate(m.window)?;
        if p.n_posterior_samples > stored * mc.n_chains {
            return bad(format!(
                "predict.n_posterior_samples = {} exceeds the {} stored chain states",
                p.n_posterior_samples,
                stored * mc.n_chains
            ));
        }
        let mut names: Vec<&str> = p.scenarios.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("predict scenario names must be unique".into());
        }
        for s in &p.scenarios {
            model.check_scenario(&s.knobs)?;
        }

        let b = &self.benchmark;
        if b.shape.len() != space.dim() || b.shape.contains(&0) {
            return bad(format!(
                "benchmark.shape needs {} positive entries",
                space.dim()
            ));
        }
        if b.shape.iter().product::<usize>() > b.budget {
            return bad(format!(
                "benchmark grid of {} nodes exceeds benchmark.budget = {}",
                b.shape.iter().product::<usize>(),
                b.budget
            ));
        }
        if b.shape.iter().product::<usize>() < MIN_TRAINING_PAIRS {
            return bad(format!(
                "benchmark grid needs at least {MIN_TRAINING_PAIRS} nodes"
            ));
        }
        if !(b.width > 0.0 && b.width.is_finite()) {
            return bad("benchmark.width must be positive".into());
        }
        if let Some(r) = &b.ranges {
            if r.len() != space.dim()
                || r.iter()
                    .any(|&(lo, hi)| !(lo < hi && lo.is_finite() && hi.is_finite()))
            {
                return bad(format!(
                    "benchmark.ranges needs {} finite intervals lo < hi",
                    space.dim()
                ));
            }
        }
        Ok(())
    }
}
