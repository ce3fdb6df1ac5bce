//! Posterior summaries, convergence diagnostics and KDE credible regions.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, CesError, Result};
use crate::linalg;
use crate::params::ParameterSpace;

use super::Chain;

/// Credible-region levels reported for every run.
pub const HPD_LEVELS: [f64; 3] = [0.5, 0.75, 0.99];

pub const MIN_REGION_SAMPLES: usize = 100;

/// Sokal's window constant for the integrated autocorrelation time.
const SOKAL_C: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean_comp: f64,
    pub std_comp: f64,
    /// Moments of the transformed samples, not transformed moments.
    pub mean_phys: f64,
    pub std_phys: f64,
    pub autocorr_time: f64,
    pub ess: f64,
    pub split_r_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub params: Vec<ParamSummary>,
    pub n_chains: usize,
    pub n_samples: usize,
    pub acceptance_rate: f64,
    pub tuned_step_scales: Vec<f64>,
    /// Advisory only: true when every split R-hat is below 1.05.
    pub converged: bool,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    // Shifted by the first sample so a constant series has exactly zero spread.
    let n = xs.len() as f64;
    let k = xs[0];
    let (s, s2) = xs.iter().fold((0.0, 0.0), |(s, s2), x| {
        (s + (x - k), s2 + (x - k) * (x - k))
    });
    let mean = k + s / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = ((s2 - s * s / n) / (n - 1.0)).max(0.0);
    (mean, var.sqrt())
}

/// Summary over the pooled states of one or more chains.
pub fn posterior_summary(chains: &[Chain], space: &ParameterSpace) -> Result<PosteriorSummary> {
    if chains.is_empty() || chains.iter().any(Chain::is_empty) {
        return Err(CesError::InvalidInput(
            "posterior summary needs non-empty chains".into(),
        ));
    }
    let p = space.dim();
    for c in chains {
        check_dim("chain state", p, c.states[0].len())?;
    }
    let phys: Vec<Vec<Vec<f64>>> = chains
        .iter()
        .map(|c| c.states.iter().map(|s| space.to_physical(s)).collect())
        .collect();
    let names = space.names();
    let mut params = Vec::with_capacity(p);
    for j in 0..p {
        let cols: Vec<Vec<f64>> = chains.iter().map(|c| c.column(j)).collect();
        let pooled: Vec<f64> = cols.concat();
        let pooled_phys: Vec<f64> = phys.iter().flat_map(|c| c.iter().map(|s| s[j])).collect();
        let (mean_comp, std_comp) = mean_std(&pooled);
        let (mean_phys, std_phys) = mean_std(&pooled_phys);
        let taus: Vec<f64> = cols.iter().map(|c| integrated_autocorr_time(c)).collect();
        let ess = cols
            .iter()
            .zip(&taus)
            .map(|(c, t)| c.len() as f64 / t)
            .sum();
        let autocorr_time = taus.iter().sum::<f64>() / taus.len() as f64;
        let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
        params.push(ParamSummary {
            name: names[j].to_string(),
            mean_comp,
            std_comp,
            mean_phys,
            std_phys,
            autocorr_time,
            ess,
            split_r_hat: split_r_hat(&refs),
        });
    }
    let n_samples = chains.iter().map(Chain::len).sum();
    let accepted: usize = chains
        .iter()
        .map(|c| c.accepted.iter().filter(|&&a| a).count())
        .sum();
    let converged = params.iter().all(|q| q.split_r_hat < 1.05);
    Ok(PosteriorSummary {
        params,
        n_chains: chains.len(),
        n_samples,
        acceptance_rate: accepted as f64 / n_samples as f64,
        tuned_step_scales: chains.iter().map(|c| c.tuned_step_scale).collect(),
        converged,
    })
}

/// Integrated autocorrelation time with Sokal's adaptive window
/// (smallest M with M >= 5 tau(M)). A constant series returns 1.
pub fn integrated_autocorr_time(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 1.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let d: Vec<f64> = xs.iter().map(|x| x - mean).collect();
    let c0 = d.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return 1.0;
    }
    let mut tau = 1.0;
    for t in 1..n / 2 {
        let ct = d[..n - t]
            .iter()
            .zip(&d[t..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n as f64;
        tau += 2.0 * ct / c0;
        if t as f64 >= SOKAL_C * tau {
            break;
        }
    }
    tau.max(1.0)
}

/// Split R-hat: each chain is cut in half and the halves compared with the
/// usual between/within variance ratio.
pub fn split_r_hat(chains: &[&[f64]]) -> f64 {
    let half = chains.iter().map(|c| c.len() / 2).min().unwrap_or(0);
    if half < 2 {
        return f64::NAN;
    }
    let parts: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..half], &c[c.len() - half..]])
        .collect();
    let n = half as f64;
    let stats: Vec<(f64, f64)> = parts.iter().map(|p| mean_std(p)).collect();
    let w = stats.iter().map(|(_, s)| s * s).sum::<f64>() / stats.len() as f64;
    let means: Vec<f64> = stats.iter().map(|(m, _)| *m).collect();
    let (_, sd_means) = mean_std(&means);
    let b = n * sd_means * sd_means;
    if w <= 0.0 {
        return if b <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

#[derive(Debug, Clone)]
enum Kernel {
    /// Whitening factor of the bandwidth matrix, whitened sample points and
    /// log normalizer.
    Gaussian {
        chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
        points: Vec<DVector<f64>>,
        log_norm: f64,
    },
    /// Samples with singular covariance: the region is the sample set itself.
    Atoms(Vec<DVector<f64>>),
}

/// HPD regions of a Gaussian KDE with Scott's full-covariance bandwidth
/// `H = n^(-2/(d+4)) cov`.
#[derive(Debug, Clone)]
pub struct CredibleRegions {
    kernel: Kernel,
    /// KDE density at each sample, descending.
    sample_density: Vec<f64>,
    dim: usize,
}

impl CredibleRegions {
    /// Uses at most `max_points` samples, taken at an even stride.
    pub fn new(samples: &[DVector<f64>], max_points: usize) -> Result<Self> {
        if samples.len() < MIN_REGION_SAMPLES {
            return Err(CesError::InvalidInput(format!(
                "credible regions need at least {MIN_REGION_SAMPLES} samples, got {}",
                samples.len()
            )));
        }
        let stride = samples.len().div_ceil(max_points.max(MIN_REGION_SAMPLES));
        let pts: Vec<DVector<f64>> = samples.iter().step_by(stride).cloned().collect();
        let d = pts[0].len();
        let n = pts.len() as f64;
        let cov = linalg::covariance(&pts);
        let h = cov * n.powf(-2.0 / (d as f64 + 4.0));
        // Relative test for a singular sample covariance.
        let scale = h.diagonal().max();
        let singular = scale <= 0.0 || {
            let (eig, _) = linalg::sorted_eigen(&h);
            eig.min() <= 1e-12 * scale
        };
        let kernel = if singular {
            Kernel::Atoms(pts)
        } else {
            let chol = linalg::cholesky(&h, "KDE bandwidth")?;
            let white: Vec<DVector<f64>> = pts
                .iter()
                .map(|x| chol.l().solve_lower_triangular(x).unwrap())
                .collect();
            let log_norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()
                - 0.5 * linalg::chol_logdet(&chol)
                - n.ln();
            Kernel::Gaussian {
                chol,
                points: white,
                log_norm,
            }
        };
        let mut r = CredibleRegions {
            kernel,
            sample_density: Vec::new(),
            dim: d,
        };
        let mut dens: Vec<f64> = match &r.kernel {
            Kernel::Gaussian { points, .. } => {
                points.par_iter().map(|w| r.density_white(w)).collect()
            }
            Kernel::Atoms(p) => vec![f64::INFINITY; p.len()],
        };
        dens.sort_by(|a, b| b.total_cmp(a));
        r.sample_density = dens;
        Ok(r)
    }

    fn density_white(&self, w: &DVector<f64>) -> f64 {
        match &self.kernel {
            Kernel::Gaussian {
                points, log_norm, ..
            } => {
                let s: f64 = points
                    .iter()
                    .map(|p| (-0.5 * (w - p).norm_squared()).exp())
                    .sum();
                (s.ln() + log_norm).exp()
            }
            Kernel::Atoms(_) => unreachable!(),
        }
    }

    /// KDE density at `x`; infinite on an atom, zero elsewhere for a
    /// degenerate sample set.
    pub fn density(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim("credible-region query", self.dim, x.len())?;
        Ok(match &self.kernel {
            Kernel::Gaussian { chol, .. } => {
                self.density_white(&chol.l().solve_lower_triangular(x).unwrap())
            }
            Kernel::Atoms(p) => {
                if p.iter().any(|a| a == x) {
                    f64::INFINITY
                } else {
                    0.0
                }
            }
        })
    }

    /// Density threshold of the HPD set holding fraction `level` of the
    /// samples.
    pub fn threshold(&self, level: f64) -> Result<f64> {
        if !(level > 0.0 && level <= 1.0) {
            return Err(CesError::Domain(format!(
                "credible level {level} not in (0, 1]"
            )));
        }
        let k = ((level * self.sample_density.len() as f64).ceil() as usize).max(1);
        Ok(self.sample_density[k - 1])
    }

    pub fn contains(&self, x: &DVector<f64>, level: f64) -> Result<bool> {
        let t = self.threshold(level)?;
        let f = self.density(x)?;
        Ok(f > 0.0 && f >= t)
    }

    /// Smallest reported level whose region holds `x`, if any.
    pub fn smallest_level(&self, x: &DVector<f64>) -> Result<Option<f64>> {
        for l in HPD_LEVELS {
            if self.contains(x, l)? {
                return Ok(Some(l));
            }
        }
        Ok(None)
    }

    pub fn n_points(&self) -> usize {
        self.sample_density.len()
    }
}
