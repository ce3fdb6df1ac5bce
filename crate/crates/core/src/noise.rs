//! Internal-variability covariance, measurement noise, and the decorrelating
//! eigenbasis shared by the emulator and the sampler.
//!
//! With `sigma = V D^2 V^T`, data are mapped to uncorrelated coordinates by
//! `y~ = D^{-1} V^T y`, in which the internal variability is the identity.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{check_dim, CesError, Result};
use crate::linalg;

/// Eigenvalues below `EIG_FLOOR_REL * lambda_max` are raised to that value.
pub const EIG_FLOOR_REL: f64 = 1e-8;
/// Absolute lower limit of the floor, reached when sigma is (numerically) zero.
pub const EIG_FLOOR_ABS: f64 = 1.491_668_146_240_041_3e-154; // sqrt(f64::MIN_POSITIVE)

/// Physical boundary set of one data index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    None,
    Lower(f64),
    Upper(f64),
    Interval(f64, f64),
}

impl Boundary {
    /// Signed distance to the boundary set, negative when `x` lies outside the
    /// admissible region. `None` for unbounded indices.
    fn signed_distance(&self, x: f64) -> Option<f64> {
        match *self {
            Boundary::None => None,
            Boundary::Lower(a) => Some(x - a),
            Boundary::Upper(b) => Some(b - x),
            Boundary::Interval(a, b) => Some((x - a).min(b - x)),
        }
    }
}

/// How indices without a physical boundary are treated when sizing
/// measurement noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnboundedDistance {
    /// dist = |mu_i| + 2 sqrt(sigma_ii)
    ScaleProportional,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySpec {
    pub boundaries: Vec<Boundary>,
    pub c_infl: f64,
    pub unbounded: UnboundedDistance,
}

impl BoundarySpec {
    pub const DEFAULT_C_INFL: f64 = 0.2;

    pub fn new(boundaries: Vec<Boundary>) -> Self {
        BoundarySpec {
            boundaries,
            c_infl: Self::DEFAULT_C_INFL,
            unbounded: UnboundedDistance::ScaleProportional,
        }
    }
}

/// An index whose 95% interval crosses its physical boundary; its
/// measurement noise was set to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaWarning {
    pub index: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct DeltaReport {
    /// diag(delta_i^2)
    pub delta: DMatrix<f64>,
    pub warnings: Vec<DeltaWarning>,
}

#[derive(Debug, Clone)]
pub struct SigmaEstimate {
    pub sigma: DMatrix<f64>,
    /// Fewer windows than data_dim + 1: the raw estimate is singular and
    /// flooring is doing real work.
    pub rank_deficient: bool,
    pub n_windows: usize,
}

/// Unbiased sample covariance of window averages, symmetrized and
/// eigenvalue-floored.
pub fn estimate_sigma(windows: &[DVector<f64>]) -> Result<SigmaEstimate> {
    if windows.len() < 2 {
        return Err(CesError::InvalidInput(format!(
            "covariance estimation needs at least 2 windows, got {}",
            windows.len()
        )));
    }
    let dim = windows[0].len();
    for w in windows {
        check_dim("window average", dim, w.len())?;
        if w.iter().any(|x| !x.is_finite()) {
            return Err(CesError::InvalidInput("non-finite window average".into()));
        }
    }
    let raw = linalg::covariance(windows);
    let (values, vectors, _, _) = floored_eigen(&raw);
    let sigma =
        linalg::symmetrize(&(&vectors * DMatrix::from_diagonal(&values) * vectors.transpose()));
    Ok(SigmaEstimate {
        sigma,
        rank_deficient: windows.len() < dim + 1,
        n_windows: windows.len(),
    })
}

/// Returns floored eigenvalues (descending), eigenvectors, the floor, and
/// the count of eigenvalues that did not need flooring.
fn floored_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>, f64, usize) {
    let (mut values, vectors) = linalg::sorted_eigen(m);
    let lmax = values.iter().copied().fold(0.0, f64::max);
    let floor = (EIG_FLOOR_REL * lmax).max(EIG_FLOOR_ABS);
    // Eigenvalues of an already floored matrix sit at the floor up to rounding.
    let rank = values.iter().filter(|&&v| v > floor * (1.0 + 1e-6)).count();
    for v in values.iter_mut() {
        *v = v.max(floor);
    }
    (values, vectors, floor, rank)
}

/// delta_i = C min(dist(mu_i + 2 s_i, dOmega_i), dist(mu_i - 2 s_i, dOmega_i)),
/// s_i = sqrt(sigma_ii); returns diag(delta_i^2).
pub fn build_delta(
    sigma: &DMatrix<f64>,
    means: &DVector<f64>,
    spec: &BoundarySpec,
) -> Result<DeltaReport> {
    let n = means.len();
    check_dim("sigma", n, sigma.nrows())?;
    check_dim("boundary spec", n, spec.boundaries.len())?;
    if !(spec.c_infl > 0.0 && spec.c_infl.is_finite()) {
        return Err(CesError::InvalidInput(format!(
            "c_infl must be positive, got {}",
            spec.c_infl
        )));
    }
    let mut delta = DMatrix::zeros(n, n);
    let mut warnings = Vec::new();
    for i in 0..n {
        let mu = means[i];
        let var = sigma[(i, i)];
        if !mu.is_finite() || !(var >= 0.0) {
            return Err(CesError::InvalidInput(format!(
                "index {i}: mean {mu} / variance {var} not admissible"
            )));
        }
        let s = var.sqrt();
        let dist = match (
            spec.boundaries[i].signed_distance(mu + 2.0 * s),
            spec.boundaries[i].signed_distance(mu - 2.0 * s),
        ) {
            (Some(a), Some(b)) => {
                let d = a.min(b);
                if d < 0.0 {
                    warn!(
                        index = i,
                        mean = mu,
                        std = s,
                        "95% interval crosses the physical boundary; delta set to 0"
                    );
                    warnings.push(DeltaWarning {
                        index: i,
                        mean: mu,
                        std: s,
                    });
                    0.0
                } else {
                    d
                }
            }
            _ => match spec.unbounded {
                UnboundedDistance::ScaleProportional => mu.abs() + 2.0 * s,
                UnboundedDistance::Fixed(d) => d,
            },
        };
        let d = spec.c_infl * dist;
        delta[(i, i)] = d * d;
    }
    Ok(DeltaReport { delta, warnings })
}

/// Immutable noise model: sigma, delta, gamma = sigma + delta and the basis
/// (V, D) of sigma.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    sigma: DMatrix<f64>,
    delta: DMatrix<f64>,
    gamma: DMatrix<f64>,
    v: DMatrix<f64>,
    d: DVector<f64>,
    rank: usize,
    floor: f64,
    /// D^{-1} V^T delta V D^{-1}
    delta_tilde: DMatrix<f64>,
}

impl NoiseModel {
    pub fn new(sigma: DMatrix<f64>, delta: DMatrix<f64>) -> Result<Self> {
        let n = sigma.nrows();
        check_dim("sigma columns", n, sigma.ncols())?;
        check_dim("delta rows", n, delta.nrows())?;
        check_dim("delta columns", n, delta.ncols())?;
        for i in 0..n {
            for j in 0..n {
                if i != j && delta[(i, j)] != 0.0 {
                    return Err(CesError::InvalidInput("delta must be diagonal".into()));
                }
            }
            if !(delta[(i, i)] >= 0.0) {
                return Err(CesError::InvalidInput(format!("delta[{i}] is negative")));
            }
        }
        if sigma.iter().any(|x| !x.is_finite()) {
            return Err(CesError::InvalidInput(
                "sigma has non-finite entries".into(),
            ));
        }
        let (eig, v, floor, rank) = floored_eigen(&sigma);
        let sigma = linalg::symmetrize(&(&v * DMatrix::from_diagonal(&eig) * v.transpose()));
        let d = eig.map(f64::sqrt);
        let gamma = &sigma + &delta;
        let dinv = d.map(|x| 1.0 / x);
        let w = DMatrix::from_diagonal(&dinv) * v.transpose();
        let delta_tilde = linalg::symmetrize(&(&w * &delta * w.transpose()));
        Ok(NoiseModel {
            sigma,
            delta,
            gamma,
            v,
            d,
            rank,
            floor,
            delta_tilde,
        })
    }

    /// Builds sigma and delta from window averages in one go.
    pub fn from_windows(
        windows: &[DVector<f64>],
        spec: &BoundarySpec,
    ) -> Result<(Self, Vec<DeltaWarning>)> {
        let est = estimate_sigma(windows)?;
        let mean = linalg::mean_of(windows);
        let report = build_delta(&est.sigma, &mean, spec)?;
        Ok((NoiseModel::new(est.sigma, report.delta)?, report.warnings))
    }

    pub fn dim(&self) -> usize {
        self.d.len()
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn delta(&self) -> &DMatrix<f64> {
        &self.delta
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// Square roots of the floored eigenvalues of sigma, descending.
    pub fn scales(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn delta_tilde(&self) -> &DMatrix<f64> {
        &self.delta_tilde
    }

    /// Y~ = D^{-1} V^T Y for a matrix whose columns are data vectors.
    pub fn decorrelate(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("decorrelate rows", self.dim(), y.nrows())?;
        let mut out = self.v.transpose() * y;
        for (mut row, &d) in out.row_iter_mut().zip(self.d.iter()) {
            row /= d;
        }
        Ok(out)
    }

    pub fn decorrelate_vec(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("decorrelate", self.dim(), y.len())?;
        Ok((self.v.transpose() * y).component_div(&self.d))
    }

    /// V D g~
    pub fn recorrelate_mean(&self, g: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("recorrelate_mean", self.dim(), g.len())?;
        Ok(&self.v * g.component_mul(&self.d))
    }

    /// V D S~ D V^T
    pub fn recorrelate_cov(&self, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("recorrelate_cov", self.dim(), s.nrows())?;
        check_dim("recorrelate_cov", self.dim(), s.ncols())?;
        let vd = &self.v * DMatrix::from_diagonal(&self.d);
        Ok(linalg::symmetrize(&(&vd * s * vd.transpose())))
    }

    /// Gamma~_GP = diag(var) + D^{-1} V^T delta V D^{-1}.
    pub fn gamma_tilde(&self, gp_var: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim("gamma_tilde", self.dim(), gp_var.len())?;
        if let Some(i) = gp_var.iter().position(|v| !(*v >= 0.0)) {
            return Err(CesError::Domain(format!(
                "GP variance at index {i} is negative: {}",
                gp_var[i]
            )));
        }
        let mut out = self.delta_tilde.clone();
        for (i, v) in gp_var.iter().enumerate() {
            out[(i, i)] += v;
        }
        Ok(out)
    }

    /// Mean of sqrt(gamma_ii / sigma_ii).
    pub fn inflation_ratio(&self) -> f64 {
        let n = self.dim();
        (0..n)
            .map(|i| (self.gamma[(i, i)] / self.sigma[(i, i)]).sqrt())
            .sum::<f64>()
            / n as f64
    }

    pub fn correlation(&self) -> DMatrix<f64> {
        let s = self.sigma.diagonal().map(f64::sqrt);
        DMatrix::from_fn(self.dim(), self.dim(), |i, j| {
            self.sigma[(i, j)] / (s[i] * s[j])
        })
    }
}
