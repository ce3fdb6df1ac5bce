//! Forward models G_T(theta; z0): parameters in, finite-time-averaged
//! observables out.
//!
//! The initial condition z0 is realized as an RNG seed, so an evaluation is a
//! pure function of (theta, seed, scenario, window).

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{CesError, Result};
use crate::noise::Boundary;
use crate::params::Bounds;

mod linear;
mod lorenz96;
mod truth;

pub use linear::LinearModel;
pub use lorenz96::{Lorenz96, Lorenz96Config};
pub use truth::{add_measurement_noise, surrogate_truth_run, TruthRun, TruthRunConfig};

/// Output of one forward-model evaluation; indices are described by a
/// [`DataLayout`].
pub type DataVector = DVector<f64>;

/// Named contiguous group of data indices (one observed quantity).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataLayout {
    pub blocks: Vec<Block>,
    /// Per-index location tag (e.g. the centre of the spatial band).
    pub coordinates: Vec<f64>,
}

impl DataLayout {
    pub fn single_block(name: &str, len: usize) -> Self {
        DataLayout {
            blocks: vec![Block {
                name: name.to_string(),
                start: 0,
                len,
            }],
            coordinates: (0..len).map(|i| i as f64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.coordinates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coordinates.is_empty()
    }

    pub fn block_of(&self, index: usize) -> &str {
        self.blocks
            .iter()
            .find(|b| index >= b.start && index < b.start + b.len)
            .map(|b| b.name.as_str())
            .unwrap_or("")
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.len())
            .map(|i| self.block_of(i).to_string())
            .collect()
    }
}

/// Named scalar scenario knobs. Absent knobs take the identity value 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Scenario(pub BTreeMap<String, f64>);

impl Scenario {
    pub fn control() -> Self {
        Scenario::default()
    }

    pub fn with(mut self, knob: &str, value: f64) -> Self {
        self.0.insert(knob.to_string(), value);
        self
    }

    pub fn get(&self, knob: &str) -> f64 {
        self.0.get(knob).copied().unwrap_or(1.0)
    }

    pub fn is_control(&self) -> bool {
        self.0.values().all(|&v| v == 1.0)
    }

    pub fn label(&self) -> String {
        if self.is_control() {
            return "control".to_string();
        }
        self.0
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub(crate) fn check_knobs(&self, model: &str, supported: &[&str]) -> Result<()> {
        for (k, v) in &self.0 {
            if !supported.contains(&k.as_str()) {
                return Err(CesError::Unsupported(format!(
                    "model {model} has no scenario knob {k}"
                )));
            }
            if !v.is_finite() {
                return Err(CesError::InvalidInput(format!("scenario knob {k} = {v}")));
            }
        }
        Ok(())
    }
}

/// Pooled per-site samples of an instantaneous observable, used for
/// exceedance statistics. `sites[i]` holds every sample for site `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteSamples {
    pub sites: Vec<Vec<f64>>,
    pub coordinates: Vec<f64>,
}

pub trait ForwardModel: Send + Sync {
    fn name(&self) -> &str;

    /// Physical-space domain of each parameter.
    fn param_bounds(&self) -> Vec<Bounds>;

    fn param_dim(&self) -> usize {
        self.param_bounds().len()
    }

    fn layout(&self) -> &DataLayout;

    fn data_dim(&self) -> usize {
        self.layout().len()
    }

    /// Physical constraints on each output index, used to size measurement noise.
    fn output_boundaries(&self) -> Vec<Boundary>;

    /// Warm-up time discarded before averaging starts.
    fn spin_up(&self) -> f64;

    /// Finite-time average over `window` following spin-up.
    fn evaluate(
        &self,
        theta: &[f64],
        seed: u64,
        window: f64,
        scenario: &Scenario,
    ) -> Result<DataVector>;

    /// `n_windows` consecutive window averages from one long trajectory.
    fn evaluate_long(
        &self,
        theta: &[f64],
        seed: u64,
        window: f64,
        n_windows: usize,
        scenario: &Scenario,
    ) -> Result<Vec<DataVector>>;

    /// Instantaneous per-site samples over `window`, for exceedance statistics.
    fn site_samples(
        &self,
        _theta: &[f64],
        _seed: u64,
        _window: f64,
        _scenario: &Scenario,
    ) -> Result<SiteSamples> {
        Err(CesError::Unsupported(format!(
            "model {} does not expose instantaneous samples",
            self.name()
        )))
    }

    fn check_scenario(&self, scenario: &Scenario) -> Result<()>;

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        let bounds = self.param_bounds();
        crate::error::check_dim("model parameter vector", bounds.len(), theta.len())?;
        for (i, (b, &x)) in bounds.iter().zip(theta).enumerate() {
            if !b.contains_strictly(x) {
                return Err(CesError::Domain(format!(
                    "{}: parameter {i} = {x} outside {b:?}",
                    self.name()
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_window(window: f64) -> Result<()> {
    if !(window > 0.0 && window.is_finite()) {
        return Err(CesError::InvalidInput(format!(
            "averaging window must be positive, got {window}"
        )));
    }
    Ok(())
}
