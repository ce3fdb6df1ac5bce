//! Bounded physical parameters, their bijection onto an unbounded
//! computational space, and Gaussian priors defined in that space.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, CesError, Result};
use crate::linalg;

/// Sigmoid arguments are clipped to this magnitude; at double precision the
/// result stays strictly inside (0, 1).
const SIGMOID_CLIP: f64 = 36.0;
/// exp() arguments are clipped so the inverse log map stays finite and positive.
const EXP_CLIP: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Bounds {
    Interval {
        lower: f64,
        upper: f64,
    },
    /// The half-line [0, inf).
    Positive,
    Unbounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Logit,
    Log,
    Identity,
}

impl Bounds {
    pub fn natural_transform(&self) -> Transform {
        match self {
            Bounds::Interval { .. } => Transform::Logit,
            Bounds::Positive => Transform::Log,
            Bounds::Unbounded => Transform::Identity,
        }
    }

    pub fn contains_strictly(&self, x: f64) -> bool {
        match *self {
            Bounds::Interval { lower, upper } => x > lower && x < upper,
            Bounds::Positive => x > 0.0 && x.is_finite(),
            Bounds::Unbounded => x.is_finite(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterDef {
    pub name: String,
    pub bounds: Bounds,
    /// Defaults to the transform matching `bounds`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<Transform>,
    /// Prior mean in computational space.
    pub prior_mean: f64,
    /// Prior variance in computational space.
    pub prior_var: f64,
}

impl ParameterDef {
    pub fn new(name: impl Into<String>, bounds: Bounds, prior_mean: f64, prior_var: f64) -> Self {
        ParameterDef {
            name: name.into(),
            bounds,
            transform: None,
            prior_mean,
            prior_var,
        }
    }

    pub fn transform(&self) -> Transform {
        self.transform
            .unwrap_or_else(|| self.bounds.natural_transform())
    }

    pub fn validate(&self) -> Result<()> {
        if self.transform() != self.bounds.natural_transform() {
            return Err(CesError::Config(format!(
                "parameter {}: transform {:?} does not match bounds {:?}",
                self.name,
                self.transform(),
                self.bounds
            )));
        }
        if let Bounds::Interval { lower, upper } = self.bounds {
            if !(lower.is_finite() && upper.is_finite() && lower < upper) {
                return Err(CesError::Config(format!(
                    "parameter {}: interval [{lower}, {upper}] is empty or not finite",
                    self.name
                )));
            }
        }
        if !(self.prior_var > 0.0 && self.prior_var.is_finite()) {
            return Err(CesError::Config(format!(
                "parameter {}: prior_var must be positive, got {}",
                self.name, self.prior_var
            )));
        }
        if !self.prior_mean.is_finite() {
            return Err(CesError::Config(format!(
                "parameter {}: prior_mean must be finite",
                self.name
            )));
        }
        Ok(())
    }

    pub fn to_computational(&self, x: f64) -> Result<f64> {
        if !self.bounds.contains_strictly(x) {
            return Err(CesError::Domain(format!(
                "parameter {} = {x} is not strictly inside {:?}",
                self.name, self.bounds
            )));
        }
        Ok(match self.bounds {
            Bounds::Interval { lower, upper } => {
                let u = (x - lower) / (upper - lower);
                (u / (1.0 - u)).ln()
            }
            Bounds::Positive => x.ln(),
            Bounds::Unbounded => x,
        })
    }

    pub fn to_physical(&self, z: f64) -> f64 {
        match self.bounds {
            Bounds::Interval { lower, upper } => {
                let x = lower + (upper - lower) * sigmoid(z);
                x.clamp(next_up(lower), next_down(upper))
            }
            Bounds::Positive => z.clamp(-EXP_CLIP, EXP_CLIP).exp(),
            Bounds::Unbounded => z,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    let z = if z.is_nan() {
        0.0
    } else {
        z.clamp(-SIGMOID_CLIP, SIGMOID_CLIP)
    };
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn next_up(x: f64) -> f64 {
    if x == 0.0 {
        f64::from_bits(1)
    } else if x > 0.0 {
        f64::from_bits(x.to_bits() + 1)
    } else {
        f64::from_bits(x.to_bits() - 1)
    }
}

fn next_down(x: f64) -> f64 {
    -next_up(-x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Physical,
    Computational,
}

/// A parameter vector tagged with the space it lives in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub space: Space,
}

impl ParameterVector {
    pub fn physical(values: Vec<f64>) -> Self {
        ParameterVector {
            values,
            space: Space::Physical,
        }
    }

    pub fn computational(values: Vec<f64>) -> Self {
        ParameterVector {
            values,
            space: Space::Computational,
        }
    }
}

/// The full parameter space: definitions plus the Gaussian prior N(m, C) in
/// computational coordinates.
#[derive(Debug, Clone)]
pub struct ParameterSpace {
    defs: Vec<ParameterDef>,
    prior_mean: DVector<f64>,
    prior_cov: DMatrix<f64>,
    prior_chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl ParameterSpace {
    /// Independent priors built from each definition's mean and variance.
    pub fn new(defs: Vec<ParameterDef>) -> Result<Self> {
        let cov = DMatrix::from_diagonal(&DVector::from_iterator(
            defs.len(),
            defs.iter().map(|d| d.prior_var),
        ));
        Self::with_covariance(defs, cov)
    }

    /// Correlated prior; the diagonal of `cov` overrides each `prior_var`.
    pub fn with_covariance(mut defs: Vec<ParameterDef>, cov: DMatrix<f64>) -> Result<Self> {
        if defs.is_empty() {
            return Err(CesError::Config(
                "at least one parameter is required".into(),
            ));
        }
        check_dim("prior covariance rows", defs.len(), cov.nrows())?;
        check_dim("prior covariance cols", defs.len(), cov.ncols())?;
        for (i, d) in defs.iter_mut().enumerate() {
            d.prior_var = cov[(i, i)];
            d.validate()?;
        }
        let cov = linalg::symmetrize(&cov);
        let prior_chol = linalg::cholesky(&cov, "prior covariance")
            .map_err(|_| CesError::Config("prior covariance is not positive definite".into()))?;
        let dim = defs.len() as f64;
        let log_norm = -0.5 * (dim * (2.0 * PI).ln() + linalg::chol_logdet(&prior_chol));
        let prior_mean = DVector::from_iterator(defs.len(), defs.iter().map(|d| d.prior_mean));
        Ok(ParameterSpace {
            defs,
            prior_mean,
            prior_cov: cov,
            prior_chol,
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.defs.len()
    }

    pub fn defs(&self) -> &[ParameterDef] {
        &self.defs
    }

    pub fn names(&self) -> Vec<&str> {
        self.defs.iter().map(|d| d.name.as_str()).collect()
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }

    pub fn prior_cov(&self) -> &DMatrix<f64> {
        &self.prior_cov
    }

    /// Lower Cholesky factor of the prior covariance.
    pub fn prior_cov_factor(&self) -> DMatrix<f64> {
        self.prior_chol.l()
    }

    pub fn to_computational(&self, phys: &[f64]) -> Result<DVector<f64>> {
        check_dim("physical parameter vector", self.dim(), phys.len())?;
        let vals = self
            .defs
            .iter()
            .zip(phys)
            .map(|(d, &x)| d.to_computational(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(vals))
    }

    pub fn to_physical(&self, comp: &DVector<f64>) -> Vec<f64> {
        debug_assert_eq!(comp.len(), self.dim());
        self.defs
            .iter()
            .zip(comp.iter())
            .map(|(d, &z)| d.to_physical(z))
            .collect()
    }

    pub fn convert(&self, v: &ParameterVector, to: Space) -> Result<ParameterVector> {
        Ok(match (v.space, to) {
            (a, b) if a == b => v.clone(),
            (Space::Physical, _) => ParameterVector::computational(
                self.to_computational(&v.values)?.as_slice().to_vec(),
            ),
            (Space::Computational, _) => {
                check_dim("computational parameter vector", self.dim(), v.values.len())?;
                ParameterVector::physical(self.to_physical(&DVector::from_column_slice(&v.values)))
            }
        })
    }

    /// The quadratic prior penalty 1/2 ||theta - m||^2_C.
    pub fn prior_penalty(&self, comp: &DVector<f64>) -> f64 {
        0.5 * linalg::mahalanobis_sq(&self.prior_chol, &(comp - &self.prior_mean))
    }

    /// Normalized Gaussian log density:
    /// -1/2 ||theta - m||^2_C - 1/2 log det(2 pi C).
    pub fn prior_logpdf(&self, comp: &DVector<f64>) -> f64 {
        self.log_norm - self.prior_penalty(comp)
    }

    pub fn prior_sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<DVector<f64>> {
        let l = self.prior_chol.l();
        (0..count)
            .map(|_| {
                let z = DVector::from_iterator(
                    self.dim(),
                    (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)),
                );
                &self.prior_mean + &l * z
            })
            .collect()
    }
}
