//! Scalar GP regression with an ARD squared-exponential plus white-noise
//! kernel, on inputs that have already been normalized.

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{CesError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Kernel hyperparameters, in normalized-input units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    pub noise_variance: f64,
}

impl KernelParams {
    pub fn count(&self) -> usize {
        self.lengthscales.len() + 2
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !ok(self.signal_variance)
            || !ok(self.noise_variance)
            || !self.lengthscales.iter().all(|&l| ok(l))
        {
            return Err(CesError::InvalidInput(format!(
                "kernel hyperparameters must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// [ln s2, ln l_1, .., ln l_p, ln noise]
    pub fn to_log(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.count());
        v.push(self.signal_variance.ln());
        v.extend(self.lengthscales.iter().map(|l| l.ln()));
        v.push(self.noise_variance.ln());
        v
    }

    pub fn from_log(v: &[f64]) -> Self {
        let p = v.len() - 2;
        KernelParams {
            signal_variance: v[0].exp(),
            lengthscales: v[1..=p].iter().map(|x| x.exp()).collect(),
            noise_variance: v[p + 1].exp(),
        }
    }

    fn inv_l2(&self) -> Vec<f64> {
        self.lengthscales.iter().map(|l| 1.0 / (l * l)).collect()
    }
}

/// Row-major `n x p` matrix of normalized inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Inputs {
    pub n: usize,
    pub p: usize,
    pub x: Vec<f64>,
}

impl Inputs {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    /// Per-dimension squared distances, each `n x n` row-major.
    pub fn squared_distances(&self) -> Vec<Vec<f64>> {
        let n = self.n;
        (0..self.p)
            .map(|j| {
                let mut d = vec![0.0; n * n];
                for a in 0..n {
                    for b in 0..a {
                        let v = (self.x[a * self.p + j] - self.x[b * self.p + j]).powi(2);
                        d[a * n + b] = v;
                        d[b * n + a] = v;
                    }
                }
                d
            })
            .collect()
    }
}

#[inline]
fn kernel(a: &[f64], b: &[f64], s2: f64, inv_l2: &[f64]) -> f64 {
    let mut r = 0.0;
    for j in 0..a.len() {
        let d = a[j] - b[j];
        r += d * d * inv_l2[j];
    }
    s2 * (-0.5 * r).exp()
}

fn kernel_matrix(x: &Inputs, params: &KernelParams, diag_extra: f64) -> Mat<f64> {
    let inv_l2 = params.inv_l2();
    let s2 = params.signal_variance;
    let mut k = Mat::<f64>::zeros(x.n, x.n);
    for a in 0..x.n {
        for b in 0..a {
            let v = kernel(x.row(a), x.row(b), s2, &inv_l2);
            k[(a, b)] = v;
            k[(b, a)] = v;
        }
        k[(a, a)] = s2 + diag_extra;
    }
    k
}

/// Fitted scalar GP: cached Cholesky factor and weights.
#[derive(Debug, Clone)]
pub struct ScalarGp {
    pub params: KernelParams,
    /// Training-target mean, added back at prediction.
    pub y_mean: f64,
    /// Diagonal jitter added on top of the noise variance.
    pub jitter: f64,
    alpha: Vec<f64>,
    /// Lower Cholesky factor, packed row-major.
    chol: Vec<f64>,
    log_det: f64,
    quad: f64,
}

impl ScalarGp {
    /// `None` when the train covariance is not numerically positive definite.
    pub fn fit(x: &Inputs, y: &[f64], params: &KernelParams, jitter: f64) -> Option<Self> {
        let n = x.n;
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let k = kernel_matrix(x, params, params.noise_variance + jitter);
        let llt = k.llt(Side::Lower).ok()?;
        let l = llt.L();
        let mut chol = Vec::with_capacity(n * (n + 1) / 2);
        let mut log_det = 0.0;
        for i in 0..n {
            for j in 0..=i {
                chol.push(l[(i, j)]);
            }
            log_det += 2.0 * l[(i, i)].ln();
        }
        let mut rhs = Mat::<f64>::from_fn(n, 1, |i, _| y[i] - y_mean);
        llt.solve_in_place(rhs.as_mut());
        let alpha: Vec<f64> = (0..n).map(|i| rhs[(i, 0)]).collect();
        if !alpha.iter().all(|a| a.is_finite()) || !log_det.is_finite() {
            return None;
        }
        let quad = alpha.iter().zip(y).map(|(a, yi)| a * (yi - y_mean)).sum();
        Some(ScalarGp {
            params: params.clone(),
            y_mean,
            jitter,
            alpha,
            chol,
            log_det,
            quad,
        })
    }

    /// Fits with no jitter first, then jitter escalating by x10 from 1e-10 to
    /// `max_jitter` (rounded down to a power of ten) times the mean diagonal
    /// of the train covariance.
    pub fn fit_with_jitter(
        x: &Inputs,
        y: &[f64],
        params: &KernelParams,
        dim: usize,
        max_jitter: f64,
    ) -> Result<Self> {
        if let Some(gp) = Self::fit(x, y, params, 0.0) {
            return Ok(gp);
        }
        let scale = params.signal_variance + params.noise_variance;
        let min_exp = (-max_jitter.log10()).ceil() as i32;
        for exp in (min_exp..=10).rev() {
            let jitter = scale * 10f64.powi(-exp);
            if let Some(gp) = Self::fit(x, y, params, jitter) {
                return Ok(gp);
            }
        }
        Err(CesError::Training {
            dim,
            reason: format!(
                "train covariance not positive definite even with jitter {:e}",
                scale * max_jitter
            ),
        })
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.alpha.len() as f64;
        -0.5 * self.quad - 0.5 * self.log_det - 0.5 * n * LN_2PI
    }

    /// Predictive mean and latent variance (white noise excluded) at a
    /// normalized query point.
    pub fn predict(&self, x: &Inputs, q: &[f64]) -> (f64, f64) {
        let n = x.n;
        let inv_l2 = self.params.inv_l2();
        let s2 = self.params.signal_variance;
        let kq: Vec<f64> = (0..n).map(|i| kernel(x.row(i), q, s2, &inv_l2)).collect();
        let mean = self.y_mean + dot(&kq, &self.alpha);
        // v = L^{-1} k, latent var = s2 - |v|^2
        let mut v = vec![0.0; n];
        let mut off = 0;
        for i in 0..n {
            let row = &self.chol[off..off + i + 1];
            v[i] = (kq[i] - dot(&row[..i], &v[..i])) / row[i];
            off += i + 1;
        }
        let var = (s2 - dot(&v, &v)).max(0.0);
        (mean, var)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Negative log marginal likelihood of centered targets and its gradient
/// with respect to the log hyperparameters.
///
/// d(-lml)/d(ln t) = -0.5 tr((alpha alpha^T - K^{-1}) dK/d(ln t))
pub fn neg_lml_and_grad(
    x: &Inputs,
    sqd: &[Vec<f64>],
    yc: &[f64],
    log_params: &[f64],
) -> Option<(f64, Vec<f64>)> {
    let n = x.n;
    let p = x.p;
    let params = KernelParams::from_log(log_params);
    let s2 = params.signal_variance;
    let noise = params.noise_variance;
    let inv_l2 = params.inv_l2();
    // Signal part of K, from the cached distances.
    let mut kf = Mat::<f64>::zeros(n, n);
    for a in 0..n {
        for b in 0..a {
            let mut r = 0.0;
            for j in 0..p {
                r += sqd[j][a * n + b] * inv_l2[j];
            }
            let v = s2 * (-0.5 * r).exp();
            kf[(a, b)] = v;
            kf[(b, a)] = v;
        }
        kf[(a, a)] = s2;
    }
    let mut k = kf.clone();
    for a in 0..n {
        k[(a, a)] += noise;
    }
    let llt = k.llt(Side::Lower).ok()?;
    let l = llt.L();
    let mut log_det = 0.0;
    for i in 0..n {
        log_det += 2.0 * l[(i, i)].ln();
    }
    let mut alpha = Mat::<f64>::from_fn(n, 1, |i, _| yc[i]);
    llt.solve_in_place(alpha.as_mut());
    let quad: f64 = (0..n).map(|i| alpha[(i, 0)] * yc[i]).sum();
    let f = 0.5 * quad + 0.5 * log_det + 0.5 * n as f64 * LN_2PI;
    if !f.is_finite() {
        return None;
    }
    let kinv = llt.inverse();
    let mut g = vec![0.0; p + 2];
    for a in 0..n {
        for b in 0..=a {
            let w = alpha[(a, 0)] * alpha[(b, 0)] - kinv[(a, b)];
            let mult = if a == b { 1.0 } else { 2.0 };
            let wk = mult * w * kf[(a, b)];
            g[0] += wk;
            for j in 0..p {
                g[1 + j] += wk * sqd[j][a * n + b] * inv_l2[j];
            }
            if a == b {
                g[p + 1] += w * noise;
            }
        }
    }
    for v in &mut g {
        *v *= -0.5;
    }
    Some((f, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn inputs_1d(xs: &[f64]) -> Inputs {
        Inputs {
            n: xs.len(),
            p: 1,
            x: xs.to_vec(),
        }
    }

    fn params_1d(s2: f64, l: f64, noise: f64) -> KernelParams {
        KernelParams {
            signal_variance: s2,
            lengthscales: vec![l],
            noise_variance: noise,
        }
    }

    #[test]
    fn matches_dense_closed_form() {
        let xs = [-1.0, 0.3, 1.7];
        let ys = [0.5, -0.2, 1.1];
        let prm = params_1d(1.3, 0.8, 0.05);
        let gp = ScalarGp::fit(&inputs_1d(&xs), &ys, &prm, 0.0).unwrap();
        let k = |a: f64, b: f64| 1.3 * (-0.5 * (a - b) * (a - b) / 0.64).exp();
        let km = DMatrix::from_fn(3, 3, |i, j| {
            k(xs[i], xs[j]) + if i == j { 0.05 } else { 0.0 }
        });
        let kinv = km.clone().try_inverse().unwrap();
        let ybar = (0.5 - 0.2 + 1.1) / 3.0;
        let yc = DVector::from_iterator(3, ys.iter().map(|y| y - ybar));
        let q = 0.9;
        let ks = DVector::from_iterator(3, xs.iter().map(|&x| k(x, q)));
        let mean = ybar + ks.dot(&(&kinv * &yc));
        let var = 1.3 - ks.dot(&(&kinv * &ks));
        let (m, v) = gp.predict(&inputs_1d(&xs), &[q]);
        assert!((m - mean).abs() < 1e-10);
        assert!((v - var).abs() < 1e-10);
        let lml = -0.5 * yc.dot(&(&kinv * &yc)) - 0.5 * km.determinant().ln() - 1.5 * LN_2PI;
        assert!((gp.log_marginal_likelihood() - lml).abs() < 1e-10);
    }

    #[test]
    fn interpolates_without_noise() {
        let xs = [-2.0, 0.0, 2.0];
        let ys = [1.0, 3.0, -1.0];
        let x = inputs_1d(&xs);
        let gp = ScalarGp::fit(&x, &ys, &params_1d(1.0, 1.0, 1e-14), 0.0).unwrap();
        for (xi, yi) in xs.iter().zip(ys) {
            let (m, v) = gp.predict(&x, &[*xi]);
            assert!((m - yi).abs() < 1e-8);
            assert!(v < 1e-8);
        }
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let xs = [-1.0, 0.0, 1.0];
        let x = inputs_1d(&xs);
        let gp = ScalarGp::fit(&x, &[0.1, 0.2, 0.3], &params_1d(2.0, 0.5, 0.1), 0.0).unwrap();
        let (m, v) = gp.predict(&x, &[10.0]);
        assert!((v - 2.0).abs() < 0.01 * 2.0);
        assert!((m - 0.2).abs() < 1e-12);
    }

    #[test]
    fn jitter_rescues_duplicate_inputs() {
        let xs = [0.0, 0.0, 1.0];
        let x = inputs_1d(&xs);
        let prm = params_1d(1.0, 1.0, 0.0f64.max(1e-300));
        assert!(ScalarGp::fit(&x, &[1.0, 1.0, 2.0], &prm, 0.0).is_none());
        let gp = ScalarGp::fit_with_jitter(&x, &[1.0, 1.0, 2.0], &prm, 0, 1e-4).unwrap();
        assert!(gp.jitter > 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = Inputs {
            n: 6,
            p: 2,
            x: vec![
                0.1, -0.3, 0.5, 0.9, -1.2, 0.4, 0.0, 0.0, 1.1, -0.8, -0.4, 1.5,
            ],
        };
        let yc = [0.3, -0.1, 0.7, 0.2, -0.5, -0.6];
        let sqd = x.squared_distances();
        let lp = [0.2, -0.1, 0.3, -2.0];
        let (_, g) = neg_lml_and_grad(&x, &sqd, &yc, &lp).unwrap();
        for i in 0..4 {
            let h = 1e-6;
            let mut a = lp;
            let mut b = lp;
            a[i] += h;
            b[i] -= h;
            let fd = (neg_lml_and_grad(&x, &sqd, &yc, &a).unwrap().0
                - neg_lml_and_grad(&x, &sqd, &yc, &b).unwrap().0)
                / (2.0 * h);
            assert!(
                (fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "{i}: {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn log_round_trip() {
        let p = KernelParams {
            signal_variance: 2.0,
            lengthscales: vec![0.5, 3.0],
            noise_variance: 1e-3,
        };
        let back = KernelParams::from_log(&p.to_log());
        assert!((back.signal_variance - 2.0).abs() < 1e-14);
        assert_eq!(p.count(), 4);
        assert!(KernelParams {
            noise_variance: 0.0,
            ..p
        }
        .validate()
        .is_err());
    }
}
