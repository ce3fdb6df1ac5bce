use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use super::{check_window, DataLayout, DataVector, ForwardModel, Scenario};
use crate::error::{check_dim, CesError, Result};
use crate::linalg;
use crate::noise::Boundary;
use crate::params::Bounds;
use crate::seed;

/// G_T(theta) = A theta + e, e ~ N(0, (T_ref / T) S).
///
/// With `S = 0` (the default) the map is exactly linear and every window is
/// identical. A nonzero `S` mimics internal variability whose covariance
/// shrinks like 1/T, which makes the Gaussian posterior available in closed
/// form for end-to-end checks.
#[derive(Debug, Clone)]
pub struct LinearModel {
    matrix: DMatrix<f64>,
    noise_factor: Option<DMatrix<f64>>,
    reference_window: f64,
    layout: DataLayout,
}

impl LinearModel {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        let layout = DataLayout::single_block("y", matrix.nrows());
        LinearModel {
            matrix,
            noise_factor: None,
            reference_window: 1.0,
            layout,
        }
    }

    /// Adds internal variability with covariance `cov` at window length
    /// `reference_window`.
    pub fn with_internal_noise(
        mut self,
        cov: &DMatrix<f64>,
        reference_window: f64,
    ) -> Result<Self> {
        check_dim(
            "internal noise covariance",
            self.matrix.nrows(),
            cov.nrows(),
        )?;
        check_window(reference_window)?;
        let chol = linalg::cholesky(cov, "internal noise covariance")?;
        self.noise_factor = Some(chol.l());
        self.reference_window = reference_window;
        Ok(self)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    fn draw(&self, theta: &[f64], rng: &mut seed::CesRng, window: f64) -> DataVector {
        let mut out = &self.matrix * DVector::from_column_slice(theta);
        if let Some(l) = &self.noise_factor {
            let z = DVector::from_iterator(
                l.ncols(),
                (0..l.ncols()).map(|_| StandardNormal.sample(rng)),
            );
            out += l * z * (self.reference_window / window).sqrt();
        }
        out
    }
}

impl ForwardModel for LinearModel {
    fn name(&self) -> &str {
        "linear"
    }

    fn param_bounds(&self) -> Vec<Bounds> {
        vec![Bounds::Unbounded; self.matrix.ncols()]
    }

    fn layout(&self) -> &DataLayout {
        &self.layout
    }

    fn output_boundaries(&self) -> Vec<Boundary> {
        vec![Boundary::None; self.matrix.nrows()]
    }

    fn spin_up(&self) -> f64 {
        0.0
    }

    fn evaluate(
        &self,
        theta: &[f64],
        seed: u64,
        window: f64,
        scenario: &Scenario,
    ) -> Result<DataVector> {
        self.check_theta(theta)?;
        check_window(window)?;
        self.check_scenario(scenario)?;
        Ok(self.draw(theta, &mut seed::rng(seed), window))
    }

    fn evaluate_long(
        &self,
        theta: &[f64],
        seed: u64,
        window: f64,
        n_windows: usize,
        scenario: &Scenario,
    ) -> Result<Vec<DataVector>> {
        if n_windows < 2 {
            return Err(CesError::InvalidInput(format!(
                "evaluate_long needs at least 2 windows, got {n_windows}"
            )));
        }
        self.check_theta(theta)?;
        check_window(window)?;
        self.check_scenario(scenario)?;
        let mut rng = seed::rng(seed);
        Ok((0..n_windows)
            .map(|_| self.draw(theta, &mut rng, window))
            .collect())
    }

    fn check_scenario(&self, scenario: &Scenario) -> Result<()> {
        scenario.check_knobs(self.name(), &[])
    }
}
