//! Ensemble Kalman inversion in computational parameter space.
//!
//! Every evaluated (member, iteration) pair is kept: iterations `0..=n_iter`
//! form the emulator training set, further iterations only feed diagnostics.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::error::{check_dim, CesError, Result};
use crate::linalg;
use crate::model::{DataVector, ForwardModel, Scenario};
use crate::params::ParameterSpace;
use crate::seed::{self, tag};

/// Resampling attempts per failed member before the run is aborted.
const MAX_RESAMPLE: u64 = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<DVector<f64>>,
    pub iteration: usize,
    /// Seed each member is (or was) evaluated with.
    pub seeds: Vec<u64>,
}

impl Ensemble {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn mean(&self) -> DVector<f64> {
        linalg::mean_of(&self.members)
    }
}

#[derive(Debug, Clone)]
pub struct EvaluatedEnsemble {
    pub ensemble: Ensemble,
    pub outputs: Vec<DataVector>,
    pub c_gg: DMatrix<f64>,
    pub c_thetag: DMatrix<f64>,
}

impl EvaluatedEnsemble {
    pub fn new(ensemble: Ensemble, outputs: Vec<DataVector>) -> Result<Self> {
        check_dim("ensemble outputs", ensemble.size(), outputs.len())?;
        if ensemble.size() < 2 {
            return Err(CesError::InvalidInput(
                "an ensemble needs at least 2 members".into(),
            ));
        }
        let d = outputs[0].len();
        for g in &outputs {
            check_dim("member output", d, g.len())?;
            if g.iter().any(|x| !x.is_finite()) {
                return Err(CesError::InvalidInput("non-finite member output".into()));
            }
        }
        let c_gg = linalg::covariance(&outputs);
        let c_thetag = linalg::cross_covariance(&ensemble.members, &outputs);
        Ok(EvaluatedEnsemble {
            ensemble,
            outputs,
            c_gg,
            c_thetag,
        })
    }

    pub fn mean_output(&self) -> DataVector {
        linalg::mean_of(&self.outputs)
    }
}

/// Initial ensemble of `m` i.i.d. prior draws.
pub fn eki_init<R: rand::Rng + ?Sized>(
    space: &ParameterSpace,
    m: usize,
    rng: &mut R,
) -> Result<Ensemble> {
    if m < 2 {
        return Err(CesError::InvalidInput(format!(
            "ensemble size must be at least 2, got {m}"
        )));
    }
    Ok(Ensemble {
        members: space.prior_sample(rng, m),
        iteration: 0,
        seeds: vec![0; m],
    })
}

/// theta_m += C_thetaG (gamma + C_GG)^{-1} (y - G(theta_m)).
pub fn eki_update(
    evaluated: &EvaluatedEnsemble,
    y: &DataVector,
    gamma: &DMatrix<f64>,
) -> Result<Ensemble> {
    let d = y.len();
    check_dim("eki data", evaluated.c_gg.nrows(), d)?;
    check_dim("eki gamma", d, gamma.nrows())?;
    let s = linalg::symmetrize(&(gamma + &evaluated.c_gg));
    let chol = s.cholesky().ok_or_else(|| {
        CesError::Numerical("gamma + C_GG is not positive definite; gamma must be SPD".into())
    })?;
    let m = evaluated.ensemble.size();
    let mut innov = DMatrix::zeros(d, m);
    for (j, g) in evaluated.outputs.iter().enumerate() {
        innov.set_column(j, &(y - g));
    }
    let step = &evaluated.c_thetag * chol.solve(&innov);
    let members = evaluated
        .ensemble
        .members
        .iter()
        .enumerate()
        .map(|(j, t)| t + step.column(j))
        .collect();
    Ok(Ensemble {
        members,
        iteration: evaluated.ensemble.iteration + 1,
        seeds: evaluated.ensemble.seeds.clone(),
    })
}

/// ||mean_m G(theta_m) - y||^2_gamma
pub fn residual(
    evaluated: &EvaluatedEnsemble,
    y: &DataVector,
    gamma: &DMatrix<f64>,
) -> Result<f64> {
    check_dim("residual data", evaluated.c_gg.nrows(), y.len())?;
    let chol = linalg::cholesky(gamma, "gamma")?;
    Ok(linalg::mahalanobis_sq(
        &chol,
        &(evaluated.mean_output() - y),
    ))
}

/// Per-coordinate sample standard deviation (1/(M-1)).
pub fn ensemble_spread(members: &[DVector<f64>]) -> DVector<f64> {
    linalg::covariance(members)
        .diagonal()
        .map(|v| v.max(0.0).sqrt())
}

/// Spread of the members after mapping each one to physical space.
pub fn ensemble_spread_physical(space: &ParameterSpace, members: &[DVector<f64>]) -> DVector<f64> {
    let phys: Vec<_> = members
        .iter()
        .map(|t| DVector::from_vec(space.to_physical(t)))
        .collect();
    ensemble_spread(&phys)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EkiConfig {
    pub ensemble_size: usize,
    /// Iterations whose evaluations enter the training set (0..=n_iter).
    pub n_iter: usize,
    /// Further iterations evaluated for diagnostics only.
    pub extra_iter: usize,
    pub window: f64,
    /// Stage seed; member seeds derive from it.
    pub seed: u64,
}

impl Default for EkiConfig {
    fn default() -> Self {
        EkiConfig {
            ensemble_size: 100,
            n_iter: 5,
            extra_iter: 4,
            window: 10.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub iteration: usize,
    pub member: usize,
    pub seed: u64,
    pub theta: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    pub pairs: Vec<TrainingPair>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn inputs(&self) -> Vec<DVector<f64>> {
        self.pairs
            .iter()
            .map(|p| DVector::from_column_slice(&p.theta))
            .collect()
    }

    pub fn outputs(&self) -> Vec<DVector<f64>> {
        self.pairs
            .iter()
            .map(|p| DVector::from_column_slice(&p.output))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    pub residual: f64,
    pub mean_comp: Vec<f64>,
    pub mean_phys: Vec<f64>,
    pub spread_comp: Vec<f64>,
    pub spread_phys: Vec<f64>,
    /// Members that failed and were resampled at this iteration.
    pub resampled: usize,
}

/// Everything needed to continue a run after iteration `next.iteration - 1`.
#[derive(Debug, Clone)]
pub struct EkiState {
    /// Ensemble awaiting evaluation.
    pub next: Ensemble,
    /// Evaluated pairs so far, across all iterations.
    pub pairs: Vec<TrainingPair>,
    pub diagnostics: Vec<IterationDiagnostics>,
    pub evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct EkiResult {
    pub training: TrainingSet,
    /// Pairs from iterations beyond `n_iter`.
    pub diagnostic_pairs: Vec<TrainingPair>,
    pub diagnostics: Vec<IterationDiagnostics>,
    /// Last evaluated ensemble.
    pub final_ensemble: Ensemble,
    /// Forward evaluations spent on iterations 0..=n_iter, resamples included.
    pub training_evaluations: usize,
    pub total_evaluations: usize,
}

impl EkiResult {
    /// Mean of the ensemble evaluated at `iteration`.
    pub fn mean_at(&self, iteration: usize) -> Option<&[f64]> {
        self.diagnostics
            .iter()
            .find(|d| d.iteration == iteration)
            .map(|d| d.mean_comp.as_slice())
    }
}

pub fn eki_start(space: &ParameterSpace, cfg: &EkiConfig) -> Result<EkiState> {
    let next = eki_init(
        space,
        cfg.ensemble_size,
        &mut seed::rng_from(cfg.seed, &[tag::EKI_INIT]),
    )?;
    Ok(EkiState {
        next,
        pairs: Vec::new(),
        diagnostics: Vec::new(),
        evaluations: 0,
    })
}

/// Rebuilds the state after the last complete iteration recorded in `pairs`
/// and `diagnostics`. The pending ensemble is recomputed with the same update,
/// so resuming is bit-identical to an uninterrupted run.
pub fn eki_restore(
    space: &ParameterSpace,
    cfg: &EkiConfig,
    y: &DataVector,
    gamma: &DMatrix<f64>,
    pairs: Vec<TrainingPair>,
    diagnostics: Vec<IterationDiagnostics>,
    evaluations: usize,
) -> Result<EkiState> {
    let Some(last) = diagnostics.last().map(|d| d.iteration) else {
        return eki_start(space, cfg);
    };
    for (i, d) in diagnostics.iter().enumerate() {
        if d.iteration != i {
            return Err(CesError::InvalidInput(format!(
                "EKI diagnostics out of order at row {i}"
            )));
        }
    }
    let m = cfg.ensemble_size;
    if pairs.len() != (last + 1) * m
        || pairs
            .iter()
            .enumerate()
            .any(|(i, p)| p.iteration != i / m || p.member != i % m)
    {
        return Err(CesError::InvalidInput(format!(
            "EKI checkpoint does not hold {m} members for each of iterations 0..={last}"
        )));
    }
    let at_last = &pairs[last * m..];
    let ensemble = Ensemble {
        members: at_last
            .iter()
            .map(|p| DVector::from_column_slice(&p.theta))
            .collect(),
        iteration: last,
        seeds: at_last.iter().map(|p| p.seed).collect(),
    };
    let next = if last < cfg.n_iter + cfg.extra_iter {
        let outputs = at_last
            .iter()
            .map(|p| DVector::from_column_slice(&p.output))
            .collect();
        eki_update(&EvaluatedEnsemble::new(ensemble, outputs)?, y, gamma)?
    } else {
        Ensemble {
            iteration: last + 1,
            ..ensemble
        }
    };
    Ok(EkiState {
        next,
        pairs,
        diagnostics,
        evaluations,
    })
}

pub fn eki_run(
    model: &dyn ForwardModel,
    y: &DataVector,
    gamma: &DMatrix<f64>,
    space: &ParameterSpace,
    cfg: &EkiConfig,
) -> Result<EkiResult> {
    let state = eki_start(space, cfg)?;
    eki_resume(model, y, gamma, space, cfg, state, &mut |_| Ok(()))
}

/// Runs the remaining iterations from `state`. `checkpoint` sees the state
/// after each completed iteration, before the next evaluation starts.
pub fn eki_resume(
    model: &dyn ForwardModel,
    y: &DataVector,
    gamma: &DMatrix<f64>,
    space: &ParameterSpace,
    cfg: &EkiConfig,
    mut state: EkiState,
    checkpoint: &mut dyn FnMut(&EkiState) -> Result<()>,
) -> Result<EkiResult> {
    if cfg.n_iter < 1 {
        return Err(CesError::InvalidInput(
            "EKI needs at least one iteration".into(),
        ));
    }
    check_dim("eki data", model.data_dim(), y.len())?;
    check_dim("eki gamma", y.len(), gamma.nrows())?;
    check_dim("eki ensemble", cfg.ensemble_size, state.next.size())?;
    let gamma_chol = linalg::cholesky(gamma, "gamma")?;
    let last = cfg.n_iter + cfg.extra_iter;
    let scenario = Scenario::control();
    let mut final_ensemble = None;

    while state.next.iteration <= last {
        let n = state.next.iteration;
        let (evaluated, resampled, used) =
            evaluate_ensemble(model, space, cfg, &scenario, state.next.clone())?;
        state.evaluations += used;
        for (m, (t, g)) in evaluated
            .ensemble
            .members
            .iter()
            .zip(&evaluated.outputs)
            .enumerate()
        {
            state.pairs.push(TrainingPair {
                iteration: n,
                member: m,
                seed: evaluated.ensemble.seeds[m],
                theta: t.as_slice().to_vec(),
                output: g.as_slice().to_vec(),
            });
        }
        let members = &evaluated.ensemble.members;
        let res = linalg::mahalanobis_sq(&gamma_chol, &(evaluated.mean_output() - y));
        let mean = evaluated.ensemble.mean();
        let diag = IterationDiagnostics {
            iteration: n,
            residual: res,
            mean_phys: space.to_physical(&mean),
            mean_comp: mean.as_slice().to_vec(),
            spread_comp: ensemble_spread(members).as_slice().to_vec(),
            spread_phys: ensemble_spread_physical(space, members).as_slice().to_vec(),
            resampled,
        };
        info!(iteration = n, residual = res, resampled, "EKI iteration");
        state.diagnostics.push(diag);
        if n < last {
            state.next = eki_update(&evaluated, y, gamma)?;
        } else {
            state.next.iteration = n + 1;
            final_ensemble = Some(evaluated.ensemble);
        }
        checkpoint(&state)?;
    }

    let final_ensemble = match final_ensemble {
        Some(e) => e,
        // Resumed from a state that had already finished.
        None => {
            let members = state
                .pairs
                .iter()
                .filter(|p| p.iteration == last)
                .map(|p| DVector::from_column_slice(&p.theta))
                .collect::<Vec<_>>();
            let seeds = state
                .pairs
                .iter()
                .filter(|p| p.iteration == last)
                .map(|p| p.seed)
                .collect();
            Ensemble {
                members,
                iteration: last,
                seeds,
            }
        }
    };
    let per_iter_training = state
        .diagnostics
        .iter()
        .filter(|d| d.iteration <= cfg.n_iter)
        .map(|d| d.resampled)
        .sum::<usize>();
    let training_evaluations = (cfg.n_iter + 1) * cfg.ensemble_size + per_iter_training;
    let (training, diagnostic_pairs): (Vec<_>, Vec<_>) = state
        .pairs
        .into_iter()
        .partition(|p| p.iteration <= cfg.n_iter);
    Ok(EkiResult {
        training: TrainingSet { pairs: training },
        diagnostic_pairs,
        diagnostics: state.diagnostics,
        final_ensemble,
        training_evaluations,
        total_evaluations: state.evaluations,
    })
}

/// Evaluates every member with a fresh seed; failed members are redrawn from
/// the ensemble's empirical Gaussian. Returns the evaluated ensemble, the
/// number of resampled members and the number of forward evaluations used.
fn evaluate_ensemble(
    model: &dyn ForwardModel,
    space: &ParameterSpace,
    cfg: &EkiConfig,
    scenario: &Scenario,
    mut ensemble: Ensemble,
) -> Result<(EvaluatedEnsemble, usize, usize)> {
    let n = ensemble.iteration as u64;
    ensemble.seeds = (0..ensemble.size() as u64)
        .map(|m| seed::derive_seed(cfg.seed, &[tag::EKI_EVAL, n, m]))
        .collect();
    let run =
        |t: &DVector<f64>, s: u64| model.evaluate(&space.to_physical(t), s, cfg.window, scenario);
    let first: Vec<Result<DataVector>> = ensemble
        .members
        .par_iter()
        .zip(ensemble.seeds.par_iter())
        .map(|(t, &s)| run(t, s))
        .collect();
    let mut used = ensemble.size();
    let mut resampled = 0;
    let mut outputs = Vec::with_capacity(ensemble.size());
    let mut sampler: Option<(DVector<f64>, DMatrix<f64>)> = None;
    for (m, r) in first.into_iter().enumerate() {
        let g = match r {
            Ok(g) => g,
            Err(CesError::EvaluationFailed { theta, reason }) => {
                warn!(iteration = n, member = m, ?theta, %reason, "member failed; resampling");
                resampled += 1;
                if sampler.is_none() {
                    let mean = ensemble.mean();
                    let cov = linalg::covariance(&ensemble.members);
                    let l = linalg::cholesky_jittered(&cov, "ensemble covariance")?.l();
                    sampler = Some((mean, l));
                }
                let (mean, l) = sampler.as_ref().expect("initialised above");
                let mut attempt = 0;
                loop {
                    attempt += 1;
                    if attempt > MAX_RESAMPLE {
                        return Err(CesError::EvaluationFailed {
                            theta,
                            reason: format!(
                                "member {m} still failing after {MAX_RESAMPLE} resamples"
                            ),
                        });
                    }
                    let mut rng =
                        seed::rng_from(cfg.seed, &[tag::EKI_RESAMPLE, n, m as u64, attempt]);
                    let z = DVector::from_iterator(
                        mean.len(),
                        (0..mean.len()).map(|_| StandardNormal.sample(&mut rng)),
                    );
                    let t = mean + l * z;
                    let s =
                        seed::derive_seed(cfg.seed, &[tag::EKI_RESAMPLE, n, m as u64, attempt, 1]);
                    used += 1;
                    match run(&t, s) {
                        Ok(g) => {
                            ensemble.members[m] = t;
                            ensemble.seeds[m] = s;
                            break g;
                        }
                        Err(CesError::EvaluationFailed { .. }) => continue,
                        Err(e) => return Err(e),
                    }
                }
            }
            Err(e) => return Err(e),
        };
        outputs.push(g);
    }
    Ok((EvaluatedEnsemble::new(ensemble, outputs)?, resampled, used))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinearModel;
    use crate::params::{Bounds, ParameterDef};
    use proptest::prelude::*;

    fn evaluated_scalar(members: &[f64], g: impl Fn(f64) -> f64) -> EvaluatedEnsemble {
        let ens = Ensemble {
            members: members
                .iter()
                .map(|&t| DVector::from_vec(vec![t]))
                .collect(),
            iteration: 0,
            seeds: vec![0; members.len()],
        };
        let outs = members
            .iter()
            .map(|&t| DVector::from_vec(vec![g(t)]))
            .collect();
        EvaluatedEnsemble::new(ens, outs).unwrap()
    }

    #[test]
    fn scalar_worked_example() {
        let ev = evaluated_scalar(&[0.0, 1.0, 2.0], |t| 2.0 * t);
        // Sample statistics with 1/(M-1): C_thetaG = 2, C_GG = 4, gain 2/(1+4).
        assert!((ev.c_thetag[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((ev.c_gg[(0, 0)] - 4.0).abs() < 1e-15);
        let next =
            eki_update(&ev, &DVector::from_vec(vec![4.0]), &DMatrix::identity(1, 1)).unwrap();
        // theta += 0.4 (4 - 2 theta)
        let expect = [1.6, 1.8, 2.0];
        for (t, e) in next.members.iter().zip(expect) {
            assert!((t[0] - e).abs() < 1e-12, "{} vs {e}", t[0]);
        }
        assert_eq!(next.iteration, 1);
    }

    #[test]
    fn identical_outputs_leave_ensemble_unchanged() {
        let ev = evaluated_scalar(&[0.0, 1.0, 2.0], |_| 3.0);
        let next =
            eki_update(&ev, &DVector::from_vec(vec![4.0]), &DMatrix::identity(1, 1)).unwrap();
        assert_eq!(next.members, ev.ensemble.members);
    }

    #[test]
    fn zero_innovation_is_a_fixed_point() {
        // Every member reproduces y although members differ: C_thetaG = 0
        // is not needed, the innovation itself vanishes.
        let ens = Ensemble {
            members: vec![
                DVector::from_vec(vec![0.0, 1.0]),
                DVector::from_vec(vec![2.0, -1.0]),
            ],
            iteration: 3,
            seeds: vec![1, 2],
        };
        let y = DVector::from_vec(vec![0.5, 0.25, 7.0]);
        let ev = EvaluatedEnsemble::new(ens.clone(), vec![y.clone(), y.clone()]).unwrap();
        let next = eki_update(&ev, &y, &DMatrix::identity(3, 3)).unwrap();
        assert_eq!(next.members, ens.members);
    }

    #[test]
    fn residual_cases() {
        let ev = evaluated_scalar(&[0.0, 1.0], |_| 3.0);
        let r = residual(
            &ev,
            &DVector::from_vec(vec![1.0]),
            &DMatrix::from_element(1, 1, 4.0),
        )
        .unwrap();
        assert!((r - 1.0).abs() < 1e-15);
        let r = residual(
            &ev,
            &DVector::from_vec(vec![3.0]),
            &DMatrix::from_element(1, 1, 4.0),
        )
        .unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn spread_cases() {
        let s = ensemble_spread(&[DVector::from_vec(vec![0.0]), DVector::from_vec(vec![2.0])]);
        assert!((s[0] - 2f64.sqrt()).abs() < 1e-15);
        let s = ensemble_spread(&vec![DVector::from_vec(vec![1.0, 3.0]); 4]);
        assert_eq!(s.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn init_matches_prior_moments() {
        let defs = vec![
            ParameterDef::new("a", Bounds::Unbounded, 1.0, 4.0),
            ParameterDef::new("b", Bounds::Unbounded, -2.0, 0.25),
        ];
        let space = ParameterSpace::new(defs).unwrap();
        let n = 100_000;
        let ens = eki_init(&space, n, &mut seed::rng(3)).unwrap();
        let mean = ens.mean();
        let cov = linalg::covariance(&ens.members);
        let var = [4.0, 0.25];
        for i in 0..2 {
            let se = (var[i] / n as f64).sqrt();
            assert!((mean[i] - space.prior_mean()[i]).abs() < 3.0 * se);
            // Var of the sample variance of a Gaussian: 2 sigma^4 / (n - 1).
            let se_var = (2.0 * var[i] * var[i] / (n - 1) as f64).sqrt();
            assert!((cov[(i, i)] - var[i]).abs() < 3.0 * se_var);
        }
        let se_cov = (var[0] * var[1] / n as f64).sqrt();
        assert!(cov[(0, 1)].abs() < 3.0 * se_cov);

        let a = eki_init(&space, 5, &mut seed::rng(9)).unwrap();
        let b = eki_init(&space, 5, &mut seed::rng(9)).unwrap();
        assert_eq!(a, b);
        assert!(eki_init(&space, 1, &mut seed::rng(9)).is_err());
    }

    fn unbounded_space(p: usize) -> ParameterSpace {
        ParameterSpace::new(
            (0..p)
                .map(|i| ParameterDef::new(format!("t{i}"), Bounds::Unbounded, 0.0, 1.0))
                .collect(),
        )
        .unwrap()
    }

    /// Distance from `x - origin` to the column span of `basis`
    /// (orthogonal projection via modified Gram-Schmidt).
    fn span_residual(basis: &DMatrix<f64>, origin: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let mut q: Vec<DVector<f64>> = Vec::new();
        for c in basis.column_iter() {
            let mut v = c.into_owned();
            for u in &q {
                v -= u * u.dot(&v);
            }
            if v.norm() > 1e-10 * c.norm() {
                q.push(v.normalize());
            }
        }
        let mut r = x - origin;
        for u in &q {
            r -= u * u.dot(&r);
        }
        r.norm()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn updates_stay_in_initial_affine_span(seed_ in any::<u64>(), m in 2usize..5) {
            let p = 5;
            let d = 4;
            let mut rng = seed::rng(seed_);
            let a = DMatrix::from_fn(d, p, |_, _| StandardNormal.sample(&mut rng));
            let members: Vec<DVector<f64>> = (0..m)
                .map(|_| DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng)))
                .collect();
            let y = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            let origin = linalg::mean_of(&members);
            let mut basis = DMatrix::zeros(p, m);
            for (j, t) in members.iter().enumerate() {
                basis.set_column(j, &(t - &origin));
            }
            let mut ens = Ensemble { members, iteration: 0, seeds: vec![0; m] };
            for _ in 0..3 {
                let outs = ens.members.iter().map(|t| &a * t).collect();
                let ev = EvaluatedEnsemble::new(ens, outs).unwrap();
                ens = eki_update(&ev, &y, &DMatrix::identity(d, d)).unwrap();
            }
            for t in &ens.members {
                let r = span_residual(&basis, &origin, t);
                prop_assert!(r < 1e-8, "residual {r}, norm {}", t.norm());
            }
        }

        #[test]
        fn zero_innovation_fixed_point_prop(seed_ in any::<u64>()) {
            let mut rng = seed::rng(seed_);
            let members: Vec<DVector<f64>> = (0..4)
                .map(|_| DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng)))
                .collect();
            let y = DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
            let ens = Ensemble { members: members.clone(), iteration: 0, seeds: vec![0; 4] };
            let ev = EvaluatedEnsemble::new(ens, vec![y.clone(); 4]).unwrap();
            let next = eki_update(&ev, &y, &DMatrix::identity(2, 2)).unwrap();
            prop_assert_eq!(next.members, members);
        }
    }

    #[test]
    fn large_ensemble_matches_kalman_update() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 2.0]);
        let gamma = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.8]);
        let space = ParameterSpace::with_covariance(
            vec![
                ParameterDef::new("a", Bounds::Unbounded, 0.3, 1.0),
                ParameterDef::new("b", Bounds::Unbounded, -0.2, 1.0),
            ],
            DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.5]),
        )
        .unwrap();
        let y = DVector::from_vec(vec![1.0, 2.0]);
        let ens = eki_init(&space, 10_000, &mut seed::rng(12)).unwrap();
        let outs = ens.members.iter().map(|t| &a * t).collect();
        let ev = EvaluatedEnsemble::new(ens, outs).unwrap();
        let next = eki_update(&ev, &y, &gamma).unwrap();

        let c = space.prior_cov();
        let m = space.prior_mean();
        let s = &gamma + &a * c * a.transpose();
        let k = c * a.transpose() * s.try_inverse().unwrap();
        let mean_oracle = m + &k * (&y - &a * m);
        let shift = next.mean() - mean_oracle;
        assert!(shift.norm() < 0.01 * (m.norm() + 1.0), "{shift}");
        let k_emp = &ev.c_thetag * (&gamma + &ev.c_gg).try_inverse().unwrap();
        assert!(linalg::frobenius_rel(&k_emp, &k) < 0.01);
    }

    #[test]
    fn linear_problem_converges_to_least_squares() {
        // Small gamma makes each step nearly a projection.
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 2.0, -1.0, 1.0]);
        let model = LinearModel::new(a.clone());
        let space = unbounded_space(2);
        let theta_true = DVector::from_vec(vec![0.7, -0.4]);
        let y = &a * &theta_true + DVector::from_vec(vec![0.01, -0.02, 0.015]);
        let gamma = DMatrix::identity(3, 3) * 1e-8;
        let cfg = EkiConfig {
            ensemble_size: 10,
            n_iter: 30,
            extra_iter: 0,
            window: 1.0,
            seed: 5,
        };
        let out = eki_run(&model, &y, &gamma, &space, &cfg).unwrap();
        let ls = (a.transpose() * &a).try_inverse().unwrap() * a.transpose() * &y;
        let mean = linalg::mean_of(&out.final_ensemble.members);
        assert!((&mean - &ls).norm() < 1e-6, "{}", (mean - ls).norm());
        assert_eq!(out.training.len(), 31 * 10);
        assert_eq!(out.training_evaluations, 310);
    }

    #[test]
    fn restricted_to_span_when_ensemble_is_small() {
        // p = 3 > M - 1 = 1: the limit is the minimizer over a line.
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.0, 1.0, 0.3, 0.1, 0.0, 1.0]);
        let model = LinearModel::new(a.clone());
        let space = unbounded_space(3);
        let y = DVector::from_vec(vec![1.0, -0.5, 0.25]);
        let gamma = DMatrix::identity(3, 3) * 1e-8;
        let cfg = EkiConfig {
            ensemble_size: 2,
            n_iter: 30,
            extra_iter: 0,
            window: 1.0,
            seed: 8,
        };
        let out = eki_run(&model, &y, &gamma, &space, &cfg).unwrap();
        let init: Vec<_> = out
            .training
            .pairs
            .iter()
            .filter(|p| p.iteration == 0)
            .map(|p| DVector::from_column_slice(&p.theta))
            .collect();
        let origin = linalg::mean_of(&init);
        let e = &init[1] - &init[0];
        let ae = &a * &e;
        let w = ae.dot(&(&y - &a * &origin)) / ae.dot(&ae);
        let oracle = origin + e * w;
        let mean = linalg::mean_of(&out.final_ensemble.members);
        assert!(
            (&mean - &oracle).norm() < 1e-6,
            "{}",
            (mean - oracle).norm()
        );
    }

    #[test]
    fn diagnostics_and_pair_bookkeeping() {
        let model = LinearModel::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let space = unbounded_space(2);
        let y = DVector::from_vec(vec![0.5, 0.5]);
        let cfg = EkiConfig {
            ensemble_size: 6,
            n_iter: 2,
            extra_iter: 2,
            window: 1.0,
            seed: 1,
        };
        let out = eki_run(&model, &y, &DMatrix::identity(2, 2), &space, &cfg).unwrap();
        assert_eq!(out.training.len(), 18);
        assert_eq!(out.diagnostic_pairs.len(), 12);
        assert_eq!(out.diagnostics.len(), 5);
        assert_eq!(out.total_evaluations, 30);
        assert!(out.training.pairs.iter().all(|p| p.iteration <= 2));
        let last = out.diagnostics.last().unwrap();
        let first = &out.diagnostics[0];
        for i in 0..2 {
            assert!(last.spread_comp[i] < first.spread_comp[i]);
        }
        assert!(last.residual < first.residual);
        assert!(out.mean_at(0).is_some());
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let model = LinearModel::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 1.0]));
        let space = unbounded_space(2);
        let y = DVector::from_vec(vec![0.5, -0.5]);
        let gamma = DMatrix::identity(2, 2);
        let cfg = EkiConfig {
            ensemble_size: 5,
            n_iter: 3,
            extra_iter: 1,
            window: 1.0,
            seed: 2,
        };
        let full = eki_run(&model, &y, &gamma, &space, &cfg).unwrap();
        let mut saved = Vec::new();
        let start = eki_start(&space, &cfg).unwrap();
        eki_resume(&model, &y, &gamma, &space, &cfg, start, &mut |s| {
            saved.push(s.clone());
            Ok(())
        })
        .unwrap();
        let resumed = eki_resume(
            &model,
            &y,
            &gamma,
            &space,
            &cfg,
            saved[1].clone(),
            &mut |_| Ok(()),
        )
        .unwrap();
        assert_eq!(resumed.training, full.training);
        assert_eq!(resumed.diagnostics, full.diagnostics);
        assert_eq!(resumed.final_ensemble.members, full.final_ensemble.members);
    }

    #[test]
    fn restore_from_pairs_matches_live_state() {
        let model = LinearModel::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 1.0]));
        let space = unbounded_space(2);
        let y = DVector::from_vec(vec![0.5, -0.5]);
        let gamma = DMatrix::identity(2, 2);
        let cfg = EkiConfig {
            ensemble_size: 5,
            n_iter: 3,
            extra_iter: 1,
            window: 1.0,
            seed: 4,
        };
        let mut saved = Vec::new();
        let full = eki_resume(
            &model,
            &y,
            &gamma,
            &space,
            &cfg,
            eki_start(&space, &cfg).unwrap(),
            &mut |s| {
                saved.push(s.clone());
                Ok(())
            },
        )
        .unwrap();
        for live in &saved {
            let r = eki_restore(
                &space,
                &cfg,
                &y,
                &gamma,
                live.pairs.clone(),
                live.diagnostics.clone(),
                live.evaluations,
            )
            .unwrap();
            // Pending seeds are reassigned at evaluation time, so only the
            // members and iteration have to agree.
            assert_eq!(r.next.members, live.next.members);
            assert_eq!(r.next.iteration, live.next.iteration);
            let resumed = eki_resume(&model, &y, &gamma, &space, &cfg, r, &mut |_| Ok(())).unwrap();
            assert_eq!(resumed.training, full.training);
            assert_eq!(resumed.diagnostics, full.diagnostics);
            assert_eq!(resumed.total_evaluations, full.total_evaluations);
        }
        let fresh = eki_restore(&space, &cfg, &y, &gamma, Vec::new(), Vec::new(), 0).unwrap();
        assert_eq!(fresh.next, eki_start(&space, &cfg).unwrap().next);
        let mut bad = saved[1].pairs.clone();
        bad.pop();
        assert!(eki_restore(
            &space,
            &cfg,
            &y,
            &gamma,
            bad,
            saved[1].diagnostics.clone(),
            0
        )
        .is_err());
    }
}
