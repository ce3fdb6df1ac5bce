//! Gaussian-process emulator of the infinite-time forward map.
//!
//! Outputs are mapped to decorrelated coordinates with the noise model's
//! basis and one scalar GP is fitted per coordinate. Inputs are standardized
//! per dimension; reported hyperparameters are in those standardized units.
//!
//! The predictive variance returned by [`Emulator::predict`] is the latent
//! GP variance plus the learned white-noise variance, so that it stands in
//! for the internal-variability covariance in the likelihood.

use std::path::Path;
use std::sync::Once;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::eki::{TrainingPair, TrainingSet};
use crate::error::{check_dim, CesError, Result};
use crate::io;
use crate::model::{ForwardModel, Scenario};
use crate::noise::NoiseModel;
use crate::params::ParameterSpace;
use crate::seed::{self, tag};

pub mod optim;
mod scalar;

pub use scalar::{neg_lml_and_grad, Inputs, KernelParams, ScalarGp};

pub const MIN_TRAINING_PAIRS: usize = 10;

pub const DEFAULT_MAX_JITTER: f64 = 1e-4;
const FORMAT: &str = "ces-emulator/1";

/// Anything that predicts decorrelated means and variances at a
/// computational-space parameter.
pub trait Surrogate: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Mean and (diagonal) variance in decorrelated coordinates.
    fn predict(&self, theta: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
    /// Largest diagonal jitter, relative to the kernel's total variance, tried
    /// before training fails. Must lie in [1e-10, 1].
    pub max_jitter: f64,
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(CesError::InvalidInput(
                "at least one optimizer restart is required".into(),
            ));
        }
        if !(1e-10..=1.0).contains(&self.max_jitter) {
            return Err(CesError::InvalidInput(format!(
                "max_jitter {} not in [1e-10, 1]",
                self.max_jitter
            )));
        }
        Ok(())
    }
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            restarts: 5,
            max_iter: 200,
            seed: 0,
            max_jitter: DEFAULT_MAX_JITTER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartRecord {
    pub start: Vec<f64>,
    pub initial_neg_lml: f64,
    pub final_neg_lml: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimReport {
    pub dim: usize,
    pub restarts: Vec<RestartRecord>,
    pub log_marginal_likelihood: f64,
}

/// Affine input map x_norm = (x - mean) / scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaling {
    pub fn identity(p: usize) -> Self {
        InputScaling {
            mean: vec![0.0; p],
            scale: vec![1.0; p],
        }
    }

    /// Zero mean, unit sample standard deviation per dimension.
    pub fn standardize(inputs: &[DVector<f64>]) -> Result<Self> {
        let n = inputs.len();
        if n < 2 {
            return Err(CesError::InvalidInput(
                "need at least 2 inputs to standardize".into(),
            ));
        }
        let p = inputs[0].len();
        let mut mean = vec![0.0; p];
        for x in inputs {
            for j in 0..p {
                mean[j] += x[j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut scale = vec![0.0; p];
        for x in inputs {
            for j in 0..p {
                scale[j] += (x[j] - mean[j]).powi(2);
            }
        }
        for (j, s) in scale.iter_mut().enumerate() {
            *s = (*s / (n - 1) as f64).sqrt();
            if !(*s > 0.0 && s.is_finite()) {
                return Err(CesError::InvalidInput(format!(
                    "degenerate training inputs: dimension {j} has no spread"
                )));
            }
        }
        Ok(InputScaling { mean, scale })
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for j in 0..x.len() {
            out[j] = (x[j] - self.mean[j]) / self.scale[j];
        }
    }
}

fn sequential_faer() {
    static ONCE: Once = Once::new();
    // Parallelism comes from fitting output dimensions concurrently; a fixed
    // sequential factorization also keeps results independent of thread count.
    ONCE.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
}

#[derive(Debug, Clone)]
pub struct Emulator {
    noise: NoiseModel,
    scaling: InputScaling,
    raw_inputs: Vec<Vec<f64>>,
    /// Decorrelated training targets, `targets[dim][i]`.
    targets: Vec<Vec<f64>>,
    inputs: Inputs,
    gps: Vec<ScalarGp>,
    reports: Vec<DimReport>,
}

impl Emulator {
    pub fn train(training: &TrainingSet, noise: &NoiseModel, cfg: &GpConfig) -> Result<Self> {
        Self::train_raw(&training.inputs(), &training.outputs(), noise, cfg)
    }

    /// Trains on computational-space inputs and physical-space outputs.
    pub fn train_raw(
        inputs: &[DVector<f64>],
        outputs: &[DVector<f64>],
        noise: &NoiseModel,
        cfg: &GpConfig,
    ) -> Result<Self> {
        sequential_faer();
        check_dim("training outputs", inputs.len(), outputs.len())?;
        if inputs.len() < MIN_TRAINING_PAIRS {
            return Err(CesError::InvalidInput(format!(
                "GP training needs at least {MIN_TRAINING_PAIRS} pairs, got {}",
                inputs.len()
            )));
        }
        cfg.validate()?;
        let scaling = InputScaling::standardize(inputs)?;
        let targets = decorrelated_targets(outputs, noise)?;
        let x = normalize(inputs, &scaling);
        let sqd = x.squared_distances();
        let fitted: Vec<(ScalarGp, DimReport)> = targets
            .par_iter()
            .enumerate()
            .map(|(d, y)| train_dim(&x, &sqd, y, d, cfg))
            .collect::<Result<_>>()?;
        let (gps, reports) = fitted.into_iter().unzip();
        Ok(Emulator {
            noise: noise.clone(),
            scaling,
            raw_inputs: inputs.iter().map(|v| v.as_slice().to_vec()).collect(),
            targets,
            inputs: x,
            gps,
            reports,
        })
    }

    /// Builds an emulator with given hyperparameters (no optimization).
    pub fn with_params(
        inputs: &[DVector<f64>],
        outputs: &[DVector<f64>],
        noise: &NoiseModel,
        scaling: InputScaling,
        params: &[KernelParams],
    ) -> Result<Self> {
        sequential_faer();
        check_dim("training outputs", inputs.len(), outputs.len())?;
        check_dim("kernel parameter sets", noise.dim(), params.len())?;
        if inputs.len() < 2 {
            return Err(CesError::InvalidInput(
                "need at least 2 training pairs".into(),
            ));
        }
        let targets = decorrelated_targets(outputs, noise)?;
        let jitters = vec![None; params.len()];
        Self::assemble(
            noise,
            scaling,
            inputs.iter().map(|v| v.as_slice().to_vec()).collect(),
            targets,
            params,
            &jitters,
            Vec::new(),
        )
    }

    fn assemble(
        noise: &NoiseModel,
        scaling: InputScaling,
        raw_inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
        params: &[KernelParams],
        jitters: &[Option<f64>],
        reports: Vec<DimReport>,
    ) -> Result<Self> {
        let p = scaling.mean.len();
        for r in &raw_inputs {
            check_dim("training input", p, r.len())?;
        }
        let vecs: Vec<DVector<f64>> = raw_inputs
            .iter()
            .map(|r| DVector::from_column_slice(r))
            .collect();
        let x = normalize(&vecs, &scaling);
        let gps = params
            .iter()
            .zip(jitters)
            .zip(&targets)
            .enumerate()
            .map(|(d, ((prm, jit), y))| {
                prm.validate()?;
                check_dim("kernel lengthscales", p, prm.lengthscales.len())?;
                match jit {
                    Some(j) => ScalarGp::fit(&x, y, prm, *j).ok_or_else(|| CesError::Training {
                        dim: d,
                        reason: "stored hyperparameters no longer factorize".into(),
                    }),
                    None => ScalarGp::fit_with_jitter(&x, y, prm, d, DEFAULT_MAX_JITTER),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Emulator {
            noise: noise.clone(),
            scaling,
            raw_inputs,
            targets,
            inputs: x,
            gps,
            reports,
        })
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn n_train(&self) -> usize {
        self.inputs.n
    }

    pub fn scaling(&self) -> &InputScaling {
        &self.scaling
    }

    pub fn params(&self) -> Vec<&KernelParams> {
        self.gps.iter().map(|g| &g.params).collect()
    }

    pub fn jitters(&self) -> Vec<f64> {
        self.gps.iter().map(|g| g.jitter).collect()
    }

    pub fn reports(&self) -> &[DimReport] {
        &self.reports
    }

    /// Mean and covariance in the original (correlated) data coordinates.
    pub fn predict_physical(&self, theta: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (m, v) = self.predict(theta)?;
        let mean = self.noise.recorrelate_mean(&m)?;
        let cov = self.noise.recorrelate_cov(&DMatrix::from_diagonal(&v))?;
        Ok((mean, cov))
    }

    pub fn to_file(&self) -> EmulatorFile {
        EmulatorFile {
            format: FORMAT.to_string(),
            scaling: self.scaling.clone(),
            inputs: self.raw_inputs.clone(),
            targets: self.targets.clone(),
            gps: self
                .gps
                .iter()
                .map(|g| GpRecord {
                    params: g.params.clone(),
                    jitter: g.jitter,
                    y_mean: g.y_mean,
                })
                .collect(),
            basis_checksum: basis_checksum(&self.noise),
            reports: self.reports.clone(),
        }
    }

    pub fn from_file(file: EmulatorFile, noise: &NoiseModel) -> Result<Self> {
        if file.format != FORMAT {
            return Err(CesError::InvalidInput(format!(
                "unknown emulator format {:?}",
                file.format
            )));
        }
        if file.basis_checksum != basis_checksum(noise) {
            return Err(CesError::Upstream(
                "emulator was trained against a different noise model basis".into(),
            ));
        }
        check_dim("emulator output dimensions", noise.dim(), file.gps.len())?;
        check_dim("emulator targets", noise.dim(), file.targets.len())?;
        let params: Vec<KernelParams> = file.gps.iter().map(|g| g.params.clone()).collect();
        let jitters: Vec<Option<f64>> = file.gps.iter().map(|g| Some(g.jitter)).collect();
        Self::assemble(
            noise,
            file.scaling,
            file.inputs,
            file.targets,
            &params,
            &jitters,
            file.reports,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, &self.to_file())
    }

    pub fn load(path: &Path, noise: &NoiseModel) -> Result<Self> {
        Self::from_file(io::read_json(path)?, noise)
    }
}

impl Surrogate for Emulator {
    fn input_dim(&self) -> usize {
        self.inputs.p
    }

    fn output_dim(&self) -> usize {
        self.gps.len()
    }

    fn predict(&self, theta: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        check_dim("emulator input", self.inputs.p, theta.len())?;
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(CesError::Domain(format!(
                "non-finite emulator input {theta:?}"
            )));
        }
        let mut q = vec![0.0; self.inputs.p];
        self.scaling.apply(theta.as_slice(), &mut q);
        let mut mean = DVector::zeros(self.gps.len());
        let mut var = DVector::zeros(self.gps.len());
        for (d, gp) in self.gps.iter().enumerate() {
            let (m, v) = gp.predict(&self.inputs, &q);
            mean[d] = m;
            var[d] = v + gp.params.noise_variance;
        }
        Ok((mean, var))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpRecord {
    pub params: KernelParams,
    pub jitter: f64,
    pub y_mean: f64,
}

/// Serialized emulator. Predictions are rebuilt from hyperparameters and
/// training data, so a reload reproduces them bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulatorFile {
    pub format: String,
    pub scaling: InputScaling,
    /// Computational-space training inputs.
    pub inputs: Vec<Vec<f64>>,
    /// Decorrelated training targets, one vector per output dimension.
    pub targets: Vec<Vec<f64>>,
    pub gps: Vec<GpRecord>,
    pub basis_checksum: String,
    pub reports: Vec<DimReport>,
}

pub fn basis_checksum(noise: &NoiseModel) -> String {
    let mut v = noise.basis().as_slice().to_vec();
    v.extend_from_slice(noise.scales().as_slice());
    io::sha256_f64(&v)
}

fn normalize(inputs: &[DVector<f64>], scaling: &InputScaling) -> Inputs {
    let p = scaling.mean.len();
    let mut x = vec![0.0; inputs.len() * p];
    for (i, v) in inputs.iter().enumerate() {
        scaling.apply(v.as_slice(), &mut x[i * p..(i + 1) * p]);
    }
    Inputs {
        n: inputs.len(),
        p,
        x,
    }
}

fn decorrelated_targets(outputs: &[DVector<f64>], noise: &NoiseModel) -> Result<Vec<Vec<f64>>> {
    let d = noise.dim();
    let mut y = DMatrix::zeros(d, outputs.len());
    for (i, g) in outputs.iter().enumerate() {
        check_dim("training output", d, g.len())?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(CesError::InvalidInput(format!(
                "non-finite training output at pair {i}"
            )));
        }
        y.set_column(i, g);
    }
    let yt = noise.decorrelate(&y)?;
    Ok((0..d)
        .map(|k| yt.row(k).iter().copied().collect())
        .collect())
}

fn train_dim(
    x: &Inputs,
    sqd: &[Vec<f64>],
    y: &[f64],
    dim: usize,
    cfg: &GpConfig,
) -> Result<(ScalarGp, DimReport)> {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let yc: Vec<f64> = y.iter().map(|v| v - mean).collect();
    let var = (yc.iter().map(|v| v * v).sum::<f64>() / (n - 1.0)).max(1e-12);
    let p = x.p;
    let lv = var.ln();
    let mut lower = vec![lv + (1e-6f64).ln()];
    let mut upper = vec![lv + (1e6f64).ln()];
    lower.extend(std::iter::repeat_n((1e-2f64).ln(), p));
    upper.extend(std::iter::repeat_n((1e3f64).ln(), p));
    lower.push(lv + (1e-10f64).ln());
    upper.push(lv + (10f64).ln());

    let mut starts = Vec::with_capacity(cfg.restarts);
    let mut heuristic = vec![lv];
    heuristic.extend(std::iter::repeat_n(0.0, p));
    heuristic.push(lv + (0.1f64).ln());
    starts.push(heuristic);
    let mut rng = seed::rng_from(cfg.seed, &[tag::GP_RESTARTS, dim as u64]);
    let span = (1e2f64).ln();
    while starts.len() < cfg.restarts {
        let mut s = Vec::with_capacity(p + 2);
        s.push(lv + rng.random_range(-span..span));
        for _ in 0..p {
            s.push(rng.random_range(-span..span));
        }
        s.push(lv + rng.random_range(-span..span));
        starts.push(s);
    }

    let opts = optim::BfgsOptions {
        max_iter: cfg.max_iter,
        ..optim::BfgsOptions::default()
    };
    let mut records = Vec::with_capacity(starts.len());
    let mut best: Option<(f64, Vec<f64>)> = None;
    for s in starts {
        let Some(m) = optim::minimize(
            |lp| neg_lml_and_grad(x, sqd, &yc, lp),
            &s,
            &lower,
            &upper,
            &opts,
        ) else {
            debug!(dim, "restart skipped: start point does not factorize");
            records.push(RestartRecord {
                start: s,
                initial_neg_lml: f64::INFINITY,
                final_neg_lml: f64::INFINITY,
                iterations: 0,
            });
            continue;
        };
        records.push(RestartRecord {
            start: s,
            initial_neg_lml: m.f0,
            final_neg_lml: m.f,
            iterations: m.iterations,
        });
        if best.as_ref().is_none_or(|(f, _)| m.f < *f) {
            best = Some((m.f, m.x));
        }
    }
    let Some((_, lp)) = best else {
        return Err(CesError::Training {
            dim,
            reason: "no optimizer restart produced a valid factorization".into(),
        });
    };
    let params = KernelParams::from_log(&lp);
    let gp = ScalarGp::fit_with_jitter(x, y, &params, dim, cfg.max_jitter)?;
    let lml = gp.log_marginal_likelihood();
    debug!(dim, lml, ?params, "trained output dimension");
    Ok((
        gp,
        DimReport {
            dim,
            restarts: records,
            log_marginal_likelihood: lml,
        },
    ))
}

/// Parameter grid over computational-space boxes; the last parameter varies
/// fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub ranges: Vec<(f64, f64)>,
    pub shape: Vec<usize>,
    /// Largest admissible number of grid nodes.
    pub budget: usize,
}

impl GridSpec {
    pub fn points(&self) -> Result<Vec<DVector<f64>>> {
        check_dim("grid shape", self.ranges.len(), self.shape.len())?;
        let total: usize = self.shape.iter().product();
        if total > self.budget {
            return Err(CesError::InvalidInput(format!(
                "grid of {total} nodes exceeds the budget of {}",
                self.budget
            )));
        }
        if self.shape.contains(&0) {
            return Err(CesError::InvalidInput(
                "grid shape entries must be positive".into(),
            ));
        }
        for &(lo, hi) in &self.ranges {
            if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
                return Err(CesError::InvalidInput(format!(
                    "bad grid range [{lo}, {hi}]"
                )));
            }
        }
        let axes: Vec<Vec<f64>> = self
            .ranges
            .iter()
            .zip(&self.shape)
            .map(|(&(lo, hi), &n)| {
                if n == 1 {
                    vec![0.5 * (lo + hi)]
                } else {
                    (0..n)
                        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                        .collect()
                }
            })
            .collect();
        let p = axes.len();
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; p];
        for _ in 0..total {
            out.push(DVector::from_iterator(p, (0..p).map(|j| axes[j][idx[j]])));
            for j in (0..p).rev() {
                idx[j] += 1;
                if idx[j] < self.shape[j] {
                    break;
                }
                idx[j] = 0;
            }
        }
        Ok(out)
    }
}

/// Trains the grid baseline: one forward run per grid node with a fresh seed,
/// then the same GP training as for EKI pairs.
pub fn benchmark_grid_train(
    grid: &GridSpec,
    model: &dyn ForwardModel,
    space: &ParameterSpace,
    noise: &NoiseModel,
    window: f64,
    seed_: u64,
    cfg: &GpConfig,
) -> Result<(Emulator, TrainingSet)> {
    check_dim("grid dimensions", space.dim(), grid.ranges.len())?;
    let points = grid.points()?;
    let scenario = Scenario::control();
    let outputs: Vec<_> = points
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let s = seed::derive_seed(seed_, &[tag::BENCHMARK_EVAL, i as u64]);
            model
                .evaluate(&space.to_physical(t), s, window, &scenario)
                .map(|g| (s, g))
        })
        .collect::<Result<_>>()?;
    let pairs = points
        .iter()
        .zip(outputs)
        .enumerate()
        .map(|(i, (t, (s, g)))| TrainingPair {
            iteration: 0,
            member: i,
            seed: s,
            theta: t.as_slice().to_vec(),
            output: g.as_slice().to_vec(),
        })
        .collect();
    let training = TrainingSet { pairs };
    let emu = Emulator::train(&training, noise, cfg)?;
    Ok((emu, training))
}

#[cfg(test)]
mod tests;
