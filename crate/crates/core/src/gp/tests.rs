use super::*;
use crate::model::LinearModel;
use crate::params::{Bounds, ParameterDef};
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal, Uniform};

fn identity_noise(d: usize) -> NoiseModel {
    NoiseModel::new(DMatrix::identity(d, d), DMatrix::zeros(d, d)).unwrap()
}

fn random_inputs(n: usize, p: usize, seed_: u64) -> Vec<DVector<f64>> {
    let mut rng = seed::rng(seed_);
    let u = Uniform::new(-2.0, 2.0).unwrap();
    (0..n)
        .map(|_| DVector::from_fn(p, |_, _| u.sample(&mut rng)))
        .collect()
}

fn ard(s2: f64, l: &[f64], noise: f64) -> KernelParams {
    KernelParams {
        signal_variance: s2,
        lengthscales: l.to_vec(),
        noise_variance: noise,
    }
}

/// Textbook GP posterior with a dense inverse.
fn dense_oracle(
    xs: &[DVector<f64>],
    ys: &[f64],
    prm: &KernelParams,
    q: &DVector<f64>,
) -> (f64, f64) {
    let k = |a: &DVector<f64>, b: &DVector<f64>| {
        let r: f64 = (0..a.len())
            .map(|j| ((a[j] - b[j]) / prm.lengthscales[j]).powi(2))
            .sum();
        prm.signal_variance * (-0.5 * r).exp()
    };
    let n = xs.len();
    let km = DMatrix::from_fn(n, n, |i, j| {
        k(&xs[i], &xs[j]) + if i == j { prm.noise_variance } else { 0.0 }
    });
    let kinv = km.try_inverse().unwrap();
    let ybar = ys.iter().sum::<f64>() / n as f64;
    let yc = DVector::from_iterator(n, ys.iter().map(|y| y - ybar));
    let ks = DVector::from_iterator(n, xs.iter().map(|x| k(x, q)));
    let mean = ybar + ks.dot(&(&kinv * yc));
    let var = prm.signal_variance - ks.dot(&(&kinv * &ks)) + prm.noise_variance;
    (mean, var)
}

#[test]
fn fixed_hyperparameters_match_dense_oracle() {
    let xs = random_inputs(50, 2, 1);
    let ys: Vec<f64> = xs
        .iter()
        .map(|x| (x[0]).sin() + 0.3 * x[1] * x[1])
        .collect();
    let outs: Vec<_> = ys.iter().map(|&y| DVector::from_vec(vec![y])).collect();
    let prm = ard(1.5, &[0.7, 1.3], 0.01);
    let emu = Emulator::with_params(
        &xs,
        &outs,
        &identity_noise(1),
        InputScaling::identity(2),
        std::slice::from_ref(&prm),
    )
    .unwrap();
    for q in random_inputs(20, 2, 2) {
        let (m, v) = emu.predict(&q).unwrap();
        let (mo, vo) = dense_oracle(&xs, &ys, &prm, &q);
        assert!((m[0] - mo).abs() < 1e-10, "{} vs {mo}", m[0]);
        assert!((v[0] - vo).abs() < 1e-10, "{} vs {vo}", v[0]);
    }
}

#[test]
fn one_dimensional_three_point_oracle() {
    let xs: Vec<_> = [-1.0, 0.2, 1.5]
        .iter()
        .map(|&x| DVector::from_vec(vec![x]))
        .collect();
    let ys = [0.4, 1.0, -0.3];
    let outs: Vec<_> = ys.iter().map(|&y| DVector::from_vec(vec![y])).collect();
    let prm = ard(0.8, &[0.9], 0.02);
    let emu = Emulator::with_params(
        &xs,
        &outs,
        &identity_noise(1),
        InputScaling::identity(1),
        std::slice::from_ref(&prm),
    )
    .unwrap();
    let q = DVector::from_vec(vec![0.7]);
    let (m, v) = emu.predict(&q).unwrap();
    let (mo, vo) = dense_oracle(&xs, &ys, &prm, &q);
    assert!((m[0] - mo).abs() < 1e-10);
    assert!((v[0] - vo).abs() < 1e-10);
}

#[test]
fn interpolation_limit_and_prior_reversion() {
    let xs: Vec<_> = [-2.0, -0.5, 1.0, 2.5]
        .iter()
        .map(|&x| DVector::from_vec(vec![x]))
        .collect();
    let ys = [1.0, -1.0, 0.5, 2.0];
    let outs: Vec<_> = ys.iter().map(|&y| DVector::from_vec(vec![y])).collect();
    let prm = ard(1.0, &[0.8], 1e-13);
    let emu = Emulator::with_params(
        &xs,
        &outs,
        &identity_noise(1),
        InputScaling::identity(1),
        &[prm],
    )
    .unwrap();
    for (x, y) in xs.iter().zip(ys) {
        let (m, v) = emu.predict(x).unwrap();
        assert!((m[0] - y).abs() < 1e-8);
        assert!(v[0] < 1e-8);
    }
    let prm = ard(2.0, &[0.8], 0.3);
    let emu = Emulator::with_params(
        &xs,
        &outs,
        &identity_noise(1),
        InputScaling::identity(1),
        &[prm],
    )
    .unwrap();
    let (_, v) = emu
        .predict(&DVector::from_vec(vec![2.5 + 10.0 * 0.8]))
        .unwrap();
    assert!((v[0] - 2.3).abs() < 0.01 * 2.3);
}

#[test]
fn trained_on_linear_function_reproduces_held_out_points() {
    let xs = random_inputs(60, 2, 5);
    let f = |x: &DVector<f64>| {
        DVector::from_vec(vec![1.0 + 2.0 * x[0] - 0.5 * x[1], -x[0] + 3.0 * x[1]])
    };
    let outs: Vec<_> = xs.iter().map(f).collect();
    let emu = Emulator::train_raw(&xs, &outs, &identity_noise(2), &GpConfig::default()).unwrap();
    assert_eq!(emu.params()[0].count(), 4);
    // Held-out points well inside the hull.
    let mut rng = seed::rng(6);
    let u = Uniform::new(-1.2, 1.2).unwrap();
    for _ in 0..20 {
        let q = DVector::from_fn(2, |_, _| u.sample(&mut rng));
        let (m, _) = emu.predict(&q).unwrap();
        let t = f(&q);
        for d in 0..2 {
            assert!(
                (m[d] - t[d]).abs() <= 1e-3 * t[d].abs().max(1.0),
                "dim {d}: {} vs {}",
                m[d],
                t[d]
            );
        }
    }
}

#[test]
fn every_restart_ascends_the_marginal_likelihood() {
    let xs = random_inputs(40, 2, 7);
    let mut rng = seed::rng(8);
    let outs: Vec<_> = xs
        .iter()
        .map(|x| {
            let e: f64 = StandardNormal.sample(&mut rng);
            DVector::from_vec(vec![x[0].cos() + 0.1 * e])
        })
        .collect();
    let emu = Emulator::train_raw(&xs, &outs, &identity_noise(1), &GpConfig::default()).unwrap();
    let rep = &emu.reports()[0];
    assert_eq!(rep.restarts.len(), 5);
    for r in &rep.restarts {
        assert!(r.final_neg_lml <= r.initial_neg_lml);
    }
    let best = rep
        .restarts
        .iter()
        .map(|r| r.final_neg_lml)
        .fold(f64::INFINITY, f64::min);
    assert!((-best - rep.log_marginal_likelihood).abs() < 1e-6 * best.abs());
}

#[test]
fn permutation_invariance() {
    let xs = random_inputs(30, 2, 9);
    let outs: Vec<_> = xs
        .iter()
        .map(|x| DVector::from_vec(vec![x[0] * x[1]]))
        .collect();
    let prm = [ard(1.0, &[0.8, 1.1], 0.01)];
    let noise = identity_noise(1);
    let a = Emulator::with_params(&xs, &outs, &noise, InputScaling::identity(2), &prm).unwrap();
    let mut order: Vec<usize> = (0..30).collect();
    order.reverse();
    order.swap(3, 17);
    let xs2: Vec<_> = order.iter().map(|&i| xs[i].clone()).collect();
    let outs2: Vec<_> = order.iter().map(|&i| outs[i].clone()).collect();
    let b = Emulator::with_params(&xs2, &outs2, &noise, InputScaling::identity(2), &prm).unwrap();
    for q in random_inputs(10, 2, 10) {
        let (ma, va) = a.predict(&q).unwrap();
        let (mb, vb) = b.predict(&q).unwrap();
        assert!((ma[0] - mb[0]).abs() < 1e-8);
        assert!((va[0] - vb[0]).abs() < 1e-8);
    }
}

#[test]
fn mean_is_smooth_under_finite_differences() {
    let xs = random_inputs(25, 2, 11);
    let outs: Vec<_> = xs
        .iter()
        .map(|x| DVector::from_vec(vec![(x[0] + x[1]).sin()]))
        .collect();
    let prm = ard(1.0, &[0.9, 1.2], 0.01);
    let emu = Emulator::with_params(
        &xs,
        &outs,
        &identity_noise(1),
        InputScaling::identity(2),
        std::slice::from_ref(&prm),
    )
    .unwrap();
    // Analytic directional derivative of the dense posterior mean.
    let n = xs.len();
    let k = |a: &DVector<f64>, b: &DVector<f64>| {
        let r: f64 = (0..2)
            .map(|j| ((a[j] - b[j]) / prm.lengthscales[j]).powi(2))
            .sum();
        prm.signal_variance * (-0.5 * r).exp()
    };
    let km = DMatrix::from_fn(n, n, |i, j| {
        k(&xs[i], &xs[j]) + if i == j { 0.01 } else { 0.0 }
    });
    let ys: Vec<f64> = outs.iter().map(|o| o[0]).collect();
    let ybar = ys.iter().sum::<f64>() / n as f64;
    let alpha = km.try_inverse().unwrap() * DVector::from_iterator(n, ys.iter().map(|y| y - ybar));
    let q = DVector::from_vec(vec![0.3, -0.2]);
    let u = DVector::from_vec(vec![0.6, 0.8]);
    let deriv: f64 = (0..n)
        .map(|i| {
            let g: f64 = (0..2)
                .map(|j| (xs[i][j] - q[j]) / prm.lengthscales[j].powi(2) * u[j])
                .sum();
            alpha[i] * k(&xs[i], &q) * g
        })
        .sum();
    let m0 = emu.predict(&q).unwrap().0[0];
    let err = |h: f64| ((emu.predict(&(&q + &u * h)).unwrap().0[0] - m0) / h - deriv).abs();
    let ratio = err(1e-3) / err(1e-4);
    assert!((ratio - 10.0).abs() < 1.0, "ratio {ratio}");
}

#[test]
fn physical_prediction_with_identity_basis_is_unchanged() {
    let xs = random_inputs(20, 2, 12);
    let outs: Vec<_> = xs
        .iter()
        .map(|x| DVector::from_vec(vec![x[0], x[1], x[0] * x[1]]))
        .collect();
    let prm: Vec<_> = (0..3).map(|_| ard(1.0, &[1.0, 1.0], 0.05)).collect();
    let emu = Emulator::with_params(
        &xs,
        &outs,
        &identity_noise(3),
        InputScaling::identity(2),
        &prm,
    )
    .unwrap();
    let q = DVector::from_vec(vec![0.1, 0.4]);
    let (m, v) = emu.predict(&q).unwrap();
    let (mp, cp) = emu.predict_physical(&q).unwrap();
    assert!((m - mp).norm() < 1e-14);
    assert!((DMatrix::from_diagonal(&v) - cp).norm() < 1e-14);
}

#[test]
fn physical_covariance_is_symmetric_psd() {
    let sigma = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.3, 0.1, 0.3, 0.7]);
    let noise = NoiseModel::new(
        sigma,
        DMatrix::from_diagonal(&DVector::from_vec(vec![0.1, 0.2, 0.05])),
    )
    .unwrap();
    let xs = random_inputs(30, 2, 13);
    let outs: Vec<_> = xs
        .iter()
        .map(|x| DVector::from_vec(vec![x[0], x[1].exp(), x[0] - x[1]]))
        .collect();
    let emu = Emulator::train_raw(
        &xs,
        &outs,
        &noise,
        &GpConfig {
            restarts: 2,
            ..GpConfig::default()
        },
    )
    .unwrap();
    for q in random_inputs(100, 2, 14) {
        let (_, c) = emu.predict_physical(&(q * 1.5)).unwrap();
        assert!((&c - c.transpose()).norm() < 1e-8 * c.norm());
        let min = c.clone().symmetric_eigen().eigenvalues.min();
        assert!(min > -1e-8 * c.norm());
    }
}

#[test]
fn reload_reproduces_predictions_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emu.json");
    let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
    let noise = NoiseModel::new(sigma, DMatrix::zeros(2, 2)).unwrap();
    let xs = random_inputs(25, 2, 15);
    let outs: Vec<_> = xs
        .iter()
        .map(|x| DVector::from_vec(vec![x[0].sin(), x[1] * x[0]]))
        .collect();
    let emu = Emulator::train_raw(
        &xs,
        &outs,
        &noise,
        &GpConfig {
            restarts: 2,
            ..GpConfig::default()
        },
    )
    .unwrap();
    emu.save(&path).unwrap();
    let back = Emulator::load(&path, &noise).unwrap();
    for q in random_inputs(10, 2, 16) {
        let (a, va) = emu.predict(&q).unwrap();
        let (b, vb) = back.predict(&q).unwrap();
        assert!(a
            .iter()
            .zip(b.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(va
            .iter()
            .zip(vb.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let other = identity_noise(2);
    assert!(matches!(
        Emulator::load(&path, &other),
        Err(CesError::Upstream(_))
    ));
}

#[test]
fn training_preconditions() {
    let noise = identity_noise(1);
    let xs = random_inputs(5, 2, 17);
    let outs: Vec<_> = xs.iter().map(|x| DVector::from_vec(vec![x[0]])).collect();
    assert!(Emulator::train_raw(&xs, &outs, &noise, &GpConfig::default()).is_err());
    let same = vec![DVector::from_vec(vec![1.0, 2.0]); 12];
    let outs: Vec<_> = (0..12).map(|i| DVector::from_vec(vec![i as f64])).collect();
    assert!(matches!(
        Emulator::train_raw(&same, &outs, &noise, &GpConfig::default()),
        Err(CesError::InvalidInput(_))
    ));
    let xs = random_inputs(12, 2, 18);
    let bad: Vec<_> = (0..12).map(|_| DVector::from_vec(vec![f64::NAN])).collect();
    assert!(Emulator::train_raw(&xs, &bad, &noise, &GpConfig::default()).is_err());
    let (m, _) = Emulator::with_params(
        &xs,
        &outs,
        &noise,
        InputScaling::identity(2),
        &[ard(1.0, &[1.0, 1.0], 0.1)],
    )
    .unwrap()
    .predict(&DVector::from_vec(vec![0.0, 0.0]))
    .unwrap();
    assert!(m[0].is_finite());
    let emu = Emulator::with_params(
        &xs,
        &outs,
        &noise,
        InputScaling::identity(2),
        &[ard(1.0, &[1.0, 1.0], 0.1)],
    )
    .unwrap();
    assert!(emu
        .predict(&DVector::from_vec(vec![f64::NAN, 0.0]))
        .is_err());
}

#[test]
fn grid_points_layout() {
    let g = GridSpec {
        ranges: vec![(0.0, 1.0), (-1.0, 1.0)],
        shape: vec![2, 3],
        budget: 100,
    };
    let pts = g.points().unwrap();
    assert_eq!(pts.len(), 6);
    assert_eq!(pts[0].as_slice(), &[0.0, -1.0]);
    assert_eq!(pts[1].as_slice(), &[0.0, 0.0]);
    assert_eq!(pts[5].as_slice(), &[1.0, 1.0]);
    assert!(GridSpec {
        budget: 5,
        ..g.clone()
    }
    .points()
    .is_err());
}

#[test]
fn degenerate_grid_is_rejected() {
    let model = LinearModel::new(DMatrix::identity(2, 2));
    let space = ParameterSpace::new(vec![
        ParameterDef::new("a", Bounds::Unbounded, 0.0, 1.0),
        ParameterDef::new("b", Bounds::Unbounded, 0.0, 1.0),
    ])
    .unwrap();
    let g = GridSpec {
        ranges: vec![(0.0, 1.0), (0.0, 1.0)],
        shape: vec![1, 1],
        budget: 400,
    };
    let noise = identity_noise(2);
    assert!(
        benchmark_grid_train(&g, &model, &space, &noise, 1.0, 0, &GpConfig::default()).is_err()
    );
    let g = GridSpec {
        shape: vec![4, 4],
        ..g
    };
    let (emu, set) = benchmark_grid_train(
        &g,
        &model,
        &space,
        &noise,
        1.0,
        0,
        &GpConfig {
            restarts: 1,
            ..GpConfig::default()
        },
    )
    .unwrap();
    assert_eq!(set.len(), 16);
    assert_eq!(emu.n_train(), 16);
}
