use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{DataVector, ForwardModel, Scenario};
use crate::error::{CesError, Result};
use crate::linalg;
use crate::seed::{self, tag};

#[derive(Debug, Clone)]
pub struct TruthRunConfig {
    pub theta: Vec<f64>,
    pub window: f64,
    /// Consecutive windows in the long control run (covariance estimation).
    pub n_windows: usize,
    /// Independent finite-window realizations of the data.
    pub n_realizations: usize,
    pub master_seed: u64,
}

/// Synthetic-data generation in the perfect-model setting.
#[derive(Debug, Clone)]
pub struct TruthRun {
    /// Mean over all long-run windows; the stand-in for G_inf(theta_true).
    pub long_mean: DataVector,
    pub windows: Vec<DataVector>,
    /// Noise-free window averages G_T(theta_true; z_i), one per realization.
    pub realizations: Vec<DataVector>,
    pub window_seed: u64,
    pub realization_seeds: Vec<u64>,
}

pub fn surrogate_truth_run(model: &dyn ForwardModel, cfg: &TruthRunConfig) -> Result<TruthRun> {
    if cfg.n_realizations == 0 {
        return Err(CesError::InvalidInput(
            "at least one realization is required".into(),
        ));
    }
    let control = Scenario::control();
    let window_seed = seed::derive_seed(cfg.master_seed, &[tag::TRUTH_WINDOWS]);
    let windows =
        model.evaluate_long(&cfg.theta, window_seed, cfg.window, cfg.n_windows, &control)?;
    let long_mean = linalg::mean_of(&windows);
    let realization_seeds: Vec<u64> = (1..=cfg.n_realizations as u64)
        .map(|k| seed::derive_seed(cfg.master_seed, &[tag::TRUTH_REALIZATION, k]))
        .collect();
    let realizations = realization_seeds
        .iter()
        .map(|&s| model.evaluate(&cfg.theta, s, cfg.window, &control))
        .collect::<Result<Vec<_>>>()?;
    Ok(TruthRun {
        long_mean,
        windows,
        realizations,
        window_seed,
        realization_seeds,
    })
}

/// y = G_T + eta with eta ~ N(0, delta); `delta` is diagonal.
pub fn add_measurement_noise<R: Rng + ?Sized>(
    clean: &DataVector,
    delta: &DMatrix<f64>,
    rng: &mut R,
) -> DataVector {
    let sd = delta.diagonal().map(|v| v.max(0.0).sqrt());
    let z = DVector::from_iterator(
        clean.len(),
        (0..clean.len()).map(|_| rng.sample::<f64, _>(StandardNormal)),
    );
    clean + sd.component_mul(&z)
}
