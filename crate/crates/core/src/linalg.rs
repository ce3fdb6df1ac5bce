//! Small dense helpers shared by the noise model, EKI and the sampler.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{CesError, Result};

pub fn mean_of(vectors: &[DVector<f64>]) -> DVector<f64> {
    let dim = vectors.first().map_or(0, |v| v.len());
    let mut acc = DVector::zeros(dim);
    for v in vectors {
        acc += v;
    }
    acc / vectors.len() as f64
}

/// Unbiased (1/(n-1)) cross-covariance of paired samples, shape a_dim x b_dim.
pub fn cross_covariance(a: &[DVector<f64>], b: &[DVector<f64>]) -> DMatrix<f64> {
    assert_eq!(a.len(), b.len());
    assert!(a.len() >= 2, "covariance needs at least two samples");
    let ma = mean_of(a);
    let mb = mean_of(b);
    let mut acc = DMatrix::zeros(ma.len(), mb.len());
    for (x, y) in a.iter().zip(b) {
        let dx = x - &ma;
        let dy = y - &mb;
        acc.ger(1.0, &dx, &dy, 1.0);
    }
    acc / (a.len() - 1) as f64
}

pub fn covariance(samples: &[DVector<f64>]) -> DMatrix<f64> {
    symmetrize(&cross_covariance(samples, samples))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
pub fn sorted_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        // Fix the sign so the largest-magnitude entry is positive; keeps the
        // basis reproducible across platforms.
        let pivot = col.iamax();
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone())
        .ok_or_else(|| CesError::Numerical(format!("{what} is not positive definite")))
}

/// Cholesky with escalating diagonal jitter, for matrices that are SPD in exact
/// arithmetic but may lose definiteness to rounding.
pub fn cholesky_jittered(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows().max(1);
    let scale = (m.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = 1e-12 * scale;
    while jitter <= 1e-6 * scale {
        let mut shifted = m.clone();
        for i in 0..m.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(shifted) {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(CesError::Numerical(format!(
        "{what} is not positive definite even with jitter"
    )))
}

/// log det of the factored matrix.
pub fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Squared Mahalanobis norm ||r||^2_A = r^T A^{-1} r using a factorization of A.
pub fn mahalanobis_sq(c: &Cholesky<f64, Dyn>, r: &DVector<f64>) -> f64 {
    let z = c
        .l_dirty()
        .solve_lower_triangular(r)
        .expect("Cholesky factor has a nonzero diagonal");
    z.norm_squared()
}

pub fn frobenius_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.norm();
    if denom == 0.0 {
        a.norm()
    } else {
        (a - b).norm() / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unbiased_covariance_of_two_points() {
        let xs = vec![DVector::from_vec(vec![0.0]), DVector::from_vec(vec![2.0])];
        assert_eq!(covariance(&xs)[(0, 0)], 2.0);
    }

    #[test]
    fn eigen_sorted_descending_with_reconstruction() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 0.5, 0.0, 0.5, 1.0]);
        let (vals, vecs) = sorted_eigen(&m);
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
        let recon = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        assert!(frobenius_rel(&recon, &m) < 1e-12);
    }
}
