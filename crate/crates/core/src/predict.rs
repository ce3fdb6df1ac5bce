//! Forward uncertainty quantification: posterior parameter draws are pushed
//! through the real forward model and summarized as percentile bands, next
//! to a reference band from the true parameters that carries internal
//! variability only.

use nalgebra::DVector;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::error::{check_dim, CesError, Result};
use crate::io::{fmt_f64, Table};
use crate::mcmc::integrated_autocorr_time;
use crate::model::{ForwardModel, Scenario, SiteSamples};
use crate::params::ParameterSpace;
use crate::seed::{self, tag};

/// Percentile of sorted data, `p` in [0, 100], by linear interpolation
/// between order statistics at plotting positions `(i - 0.5) / n`
/// (Hazen). Positions outside the sample clamp to the extremes.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "percentile of empty data");
    let h = (n as f64 * p / 100.0 + 0.5).clamp(1.0, n as f64);
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo >= n {
        return sorted[n - 1];
    }
    sorted[lo - 1] + frac * (sorted[lo] - sorted[lo - 1])
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    #[serde(default)]
    pub knobs: Scenario,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionSpec {
    pub n_posterior_samples: usize,
    pub long_window: f64,
    pub scenarios: Vec<ScenarioSpec>,
    /// Quantile of the control run that defines the exceedance threshold.
    pub extreme_quantile: f64,
    pub lower_percentile: f64,
    pub upper_percentile: f64,
}

impl Default for PredictionSpec {
    fn default() -> Self {
        PredictionSpec {
            n_posterior_samples: 100,
            long_window: 720.0,
            scenarios: vec![
                ScenarioSpec {
                    name: "control".into(),
                    knobs: Scenario::control(),
                },
                ScenarioSpec {
                    name: "perturbed".into(),
                    knobs: Scenario::control().with("forcing_scale", 1.2),
                },
            ],
            extreme_quantile: 0.9,
            lower_percentile: 2.5,
            upper_percentile: 97.5,
        }
    }
}

impl PredictionSpec {
    pub fn validate(&self, calibration_window: f64) -> Result<()> {
        if self.n_posterior_samples < 2 {
            return Err(CesError::InvalidInput(
                "n_posterior_samples must be at least 2".into(),
            ));
        }
        if !(self.long_window >= calibration_window && self.long_window.is_finite()) {
            return Err(CesError::InvalidInput(format!(
                "long_window {} is shorter than the calibration window {calibration_window}",
                self.long_window
            )));
        }
        if self.scenarios.is_empty() {
            return Err(CesError::InvalidInput(
                "at least one prediction scenario is required".into(),
            ));
        }
        if !(self.extreme_quantile > 0.0 && self.extreme_quantile < 1.0) {
            return Err(CesError::InvalidInput(
                "extreme_quantile must lie in (0, 1)".into(),
            ));
        }
        if !(0.0 <= self.lower_percentile
            && self.lower_percentile < 50.0
            && 50.0 < self.upper_percentile
            && self.upper_percentile <= 100.0)
        {
            return Err(CesError::InvalidInput(
                "band percentiles must satisfy 0 <= lower < 50 < upper <= 100".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub index: usize,
    pub coordinate: f64,
    pub block: String,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    pub ref_median: f64,
    pub ref_lower: f64,
    pub ref_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioBands {
    pub name: String,
    pub knobs: Scenario,
    /// Posterior draws whose evaluation succeeded.
    pub n_used: usize,
    pub n_dropped: usize,
    pub ref_n_used: usize,
    pub rows: Vec<BandRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBands {
    /// Chain indices of the posterior draws.
    pub sample_indices: Vec<usize>,
    pub stride: usize,
    pub scenarios: Vec<ScenarioBands>,
}

/// Thinning stride: the largest per-parameter integrated autocorrelation
/// time, rounded up, reduced if needed so that `n` draws remain available.
pub fn thinning_stride(states: &[DVector<f64>], n: usize) -> usize {
    if states.is_empty() {
        return 1;
    }
    let p = states[0].len();
    let tau = (0..p)
        .map(|j| integrated_autocorr_time(&states.iter().map(|s| s[j]).collect::<Vec<_>>()))
        .fold(1.0, f64::max);
    let stride = tau.ceil() as usize;
    let cap = (states.len() / n.max(1)).max(1);
    if stride > cap {
        warn!(
            stride,
            cap, "chain too short for autocorrelation thinning; stride reduced"
        );
    }
    stride.clamp(1, cap)
}

/// `n` chain indices drawn uniformly without replacement from the thinned
/// chain, in ascending order.
pub fn subsample_indices(len: usize, stride: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    let stride = stride.max(1);
    let thinned = len.div_ceil(stride);
    if n > thinned {
        return Err(CesError::InvalidInput(format!(
            "requested {n} posterior draws but the thinned chain has {thinned}"
        )));
    }
    let mut rng = seed::rng_from(seed, &[tag::PREDICT]);
    let mut idx: Vec<usize> = index::sample(&mut rng, thinned, n)
        .into_iter()
        .map(|i| i * stride)
        .collect();
    idx.sort_unstable();
    Ok(idx)
}

fn band_rows(
    model: &dyn ForwardModel,
    post: &[DVector<f64>],
    reference: &[DVector<f64>],
    spec: &PredictionSpec,
) -> Vec<BandRow> {
    let layout = model.layout();
    (0..model.data_dim())
        .map(|i| {
            let a = sorted(post.iter().map(|v| v[i]).collect());
            let b = sorted(reference.iter().map(|v| v[i]).collect());
            BandRow {
                index: i,
                coordinate: layout.coordinates[i],
                block: layout.block_of(i).to_string(),
                median: percentile(&a, 50.0),
                lower: percentile(&a, spec.lower_percentile),
                upper: percentile(&a, spec.upper_percentile),
                ref_median: percentile(&b, 50.0),
                ref_lower: percentile(&b, spec.lower_percentile),
                ref_upper: percentile(&b, spec.upper_percentile),
            }
        })
        .collect()
}

/// Evaluates each job, dropping failures with a log entry.
fn evaluate_all(
    model: &dyn ForwardModel,
    jobs: &[(Vec<f64>, u64)],
    window: f64,
    scenario: &Scenario,
    what: &str,
) -> Vec<DVector<f64>> {
    let out: Vec<Option<DVector<f64>>> = jobs
        .par_iter()
        .map(
            |(theta, s)| match model.evaluate(theta, *s, window, scenario) {
                Ok(v) => Some(v),
                Err(e) => {
                    warn!(%e, what, scenario = %scenario.label(), "prediction run dropped");
                    None
                }
            },
        )
        .collect();
    out.into_iter().flatten().collect()
}

/// Posterior and fixed-truth prediction bands.
///
/// Draw `k` uses one model seed for every scenario; the reference runs use
/// the true parameters with an equal number of independent seeds.
pub fn predict_ensemble(
    states: &[DVector<f64>],
    space: &ParameterSpace,
    model: &dyn ForwardModel,
    theta_true: &[f64],
    spec: &PredictionSpec,
    master_seed: u64,
) -> Result<PredictionBands> {
    spec.validate(0.0)?;
    if states.len() < spec.n_posterior_samples {
        return Err(CesError::InvalidInput(format!(
            "chain has {} states but {} posterior draws were requested",
            states.len(),
            spec.n_posterior_samples
        )));
    }
    check_dim("true parameters", model.param_dim(), theta_true.len())?;
    for s in &spec.scenarios {
        model.check_scenario(&s.knobs)?;
    }
    let n = spec.n_posterior_samples;
    let stride = thinning_stride(states, n);
    let sample_indices = subsample_indices(states.len(), stride, n, master_seed)?;
    let post_jobs: Vec<(Vec<f64>, u64)> = sample_indices
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            (
                space.to_physical(&states[i]),
                seed::derive_seed(master_seed, &[tag::PREDICT, k as u64]),
            )
        })
        .collect();
    let ref_jobs: Vec<(Vec<f64>, u64)> = (0..n as u64)
        .map(|k| {
            (
                theta_true.to_vec(),
                seed::derive_seed(master_seed, &[tag::PREDICT_REFERENCE, k]),
            )
        })
        .collect();

    let mut scenarios = Vec::with_capacity(spec.scenarios.len());
    for s in &spec.scenarios {
        let post = evaluate_all(model, &post_jobs, spec.long_window, &s.knobs, "posterior");
        let reference = evaluate_all(model, &ref_jobs, spec.long_window, &s.knobs, "reference");
        if post.is_empty() || reference.is_empty() {
            return Err(CesError::Numerical(format!(
                "every prediction run failed for scenario {}",
                s.name
            )));
        }
        info!(scenario = %s.name, used = post.len(), dropped = n - post.len(), "scenario evaluated");
        scenarios.push(ScenarioBands {
            name: s.name.clone(),
            knobs: s.knobs.clone(),
            n_used: post.len(),
            n_dropped: n - post.len(),
            ref_n_used: reference.len(),
            rows: band_rows(model, &post, &reference, spec),
        });
    }
    Ok(PredictionBands {
        sample_indices,
        stride,
        scenarios,
    })
}

pub fn bands_table(bands: &PredictionBands, spec: &PredictionSpec) -> Table {
    let lo = fmt_f64(spec.lower_percentile);
    let hi = fmt_f64(spec.upper_percentile);
    let mut t = Table::new([
        "index".to_string(),
        "coordinate".into(),
        "block".into(),
        "scenario".into(),
        "median".into(),
        format!("p{lo}"),
        format!("p{hi}"),
        "ref_median".into(),
        format!("ref_p{lo}"),
        format!("ref_p{hi}"),
    ]);
    for s in &bands.scenarios {
        for r in &s.rows {
            t.push(vec![
                r.index.to_string(),
                fmt_f64(r.coordinate),
                r.block.clone(),
                s.name.clone(),
                fmt_f64(r.median),
                fmt_f64(r.lower),
                fmt_f64(r.upper),
                fmt_f64(r.ref_median),
                fmt_f64(r.ref_lower),
                fmt_f64(r.ref_upper),
            ]);
        }
    }
    t
}

/// Per-site fraction of samples strictly above the site's threshold.
pub fn exceedance_frequency(samples: &SiteSamples, thresholds: &[f64]) -> Result<Vec<f64>> {
    check_dim(
        "exceedance thresholds",
        samples.sites.len(),
        thresholds.len(),
    )?;
    samples
        .sites
        .iter()
        .zip(thresholds)
        .map(|(xs, &t)| {
            if xs.is_empty() {
                return Err(CesError::InvalidInput("site without samples".into()));
            }
            Ok(xs.iter().filter(|&&x| x > t).count() as f64 / xs.len() as f64)
        })
        .collect()
}

/// Batches used for the Monte-Carlo error of an exceedance frequency.
pub const EXCEEDANCE_BATCHES: usize = 20;

/// Standard error of the exceedance frequency of `xs` over `threshold`, by
/// batch means over contiguous blocks (the series is autocorrelated in time).
/// `None` with fewer samples than batches.
pub fn exceedance_standard_error(xs: &[f64], threshold: f64, n_batches: usize) -> Option<f64> {
    if n_batches < 2 || xs.len() < n_batches {
        return None;
    }
    let len = xs.len() / n_batches;
    let means: Vec<f64> = xs
        .chunks_exact(len)
        .take(n_batches)
        .map(|b| b.iter().filter(|&&x| x > threshold).count() as f64 / len as f64)
        .collect();
    let m = means.iter().sum::<f64>() / n_batches as f64;
    let var = means.iter().map(|b| (b - m).powi(2)).sum::<f64>() / (n_batches - 1) as f64;
    Some((var / n_batches as f64).sqrt())
}

/// Per-site `q`-quantile of control samples.
pub fn quantile_thresholds(control: &SiteSamples, q: f64) -> Result<Vec<f64>> {
    if !(q > 0.0 && q < 1.0) {
        return Err(CesError::Domain(format!("quantile {q} not in (0, 1)")));
    }
    control
        .sites
        .iter()
        .map(|xs| {
            if xs.is_empty() {
                return Err(CesError::InvalidInput("site without samples".into()));
            }
            Ok(percentile(&sorted(xs.clone()), 100.0 * q))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExceedanceReport {
    pub quantile: f64,
    pub coordinates: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// Frequency on an independent control run (expected 1 - quantile).
    pub control: Vec<f64>,
    /// Monte-Carlo standard error of `control`: the batch-means error of the
    /// check run times sqrt 2, since the threshold comes from an independent
    /// run of the same length and its quantile error adds equal variance.
    /// Absent for sites with too few samples.
    pub control_se: Vec<Option<f64>>,
    /// (scenario name, per-site frequency).
    pub scenarios: Vec<(String, Vec<f64>)>,
}

/// Thresholds from one control run at the true parameters; frequencies from
/// independent runs of the control and of every non-control scenario.
pub fn exceedance_study(
    model: &dyn ForwardModel,
    theta_true: &[f64],
    spec: &PredictionSpec,
    master_seed: u64,
) -> Result<ExceedanceReport> {
    let run = |k: u64, scenario: &Scenario| {
        model.site_samples(
            theta_true,
            seed::derive_seed(master_seed, &[tag::PREDICT_CONTROL, k]),
            spec.long_window,
            scenario,
        )
    };
    let control = Scenario::control();
    let base = run(0, &control)?;
    let thresholds = quantile_thresholds(&base, spec.extreme_quantile)?;
    let check_run = run(1, &control)?;
    let check = exceedance_frequency(&check_run, &thresholds)?;
    let control_se = check_run
        .sites
        .iter()
        .zip(&thresholds)
        .map(|(xs, &t)| {
            exceedance_standard_error(xs, t, EXCEEDANCE_BATCHES).map(|se| se * 2f64.sqrt())
        })
        .collect();
    let scenarios = spec
        .scenarios
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.knobs.is_control())
        .map(|(i, s)| {
            Ok((
                s.name.clone(),
                exceedance_frequency(&run(2 + i as u64, &s.knobs)?, &thresholds)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExceedanceReport {
        quantile: spec.extreme_quantile,
        coordinates: base.coordinates,
        thresholds,
        control: check,
        control_se,
        scenarios,
    })
}

#[cfg(test)]
mod tests {
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    use super::*;
    use crate::model::{LinearModel, Lorenz96, Lorenz96Config};
    use crate::params::{Bounds, ParameterDef};

    #[test]
    fn hazen_percentiles_of_one_to_hundred() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&xs, 2.5), 3.0);
        assert_eq!(percentile(&xs, 50.0), 50.5);
        assert_eq!(percentile(&xs, 97.5), 98.0);
        assert_eq!(percentile(&xs, 0.0), 1.0);
        assert_eq!(percentile(&xs, 100.0), 100.0);
        assert_eq!(percentile(&[7.0], 30.0), 7.0);
    }

    proptest! {
        #[test]
        fn percentiles_are_ordered(mut xs in prop::collection::vec(-1e6f64..1e6, 1..200), a in 0.0f64..100.0, b in 0.0f64..100.0) {
            xs.sort_by(f64::total_cmp);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(percentile(&xs, lo) <= percentile(&xs, hi));
            prop_assert!(percentile(&xs, lo) >= xs[0] && percentile(&xs, hi) <= xs[xs.len() - 1]);
        }
    }

    fn sites(values: Vec<Vec<f64>>) -> SiteSamples {
        let n = values.len();
        SiteSamples {
            sites: values,
            coordinates: (0..n).map(|i| i as f64).collect(),
        }
    }

    #[test]
    fn exceedance_standard_error_by_batches() {
        // 20 batches of 5 alternately all above and all below: batch means
        // 1, 0, 1, .. with sample variance 20 * 0.25 / 19.
        let xs: Vec<f64> = (0..100)
            .map(|i| if (i / 5) % 2 == 0 { 2.0 } else { 0.0 })
            .collect();
        let se = exceedance_standard_error(&xs, 1.0, 20).unwrap();
        assert!((se - (0.25f64 / 19.0).sqrt()).abs() < 1e-15);
        // A remainder shorter than a batch is ignored.
        let mut longer = xs.clone();
        longer.extend([2.0; 4]);
        assert_eq!(exceedance_standard_error(&longer, 1.0, 20), Some(se));
        assert_eq!(exceedance_standard_error(&[3.0; 40], 1.0, 20), Some(0.0));
        assert_eq!(exceedance_standard_error(&[3.0; 19], 1.0, 20), None);
        assert_eq!(exceedance_standard_error(&[3.0; 40], 1.0, 1), None);
    }

    #[test]
    fn exceedance_edge_cases() {
        let s = sites(vec![(1..=1000).map(f64::from).collect(), vec![1.0, 2.0]]);
        assert_eq!(
            exceedance_frequency(&s, &[f64::NEG_INFINITY; 2]).unwrap(),
            vec![1.0, 1.0]
        );
        let t = quantile_thresholds(&s, 0.9).unwrap();
        let f = exceedance_frequency(&s, &t).unwrap();
        assert!((f[0] - 0.1).abs() < 1e-3);
        assert!(exceedance_frequency(&s, &[0.0]).is_err());
        assert!(quantile_thresholds(&s, 1.0).is_err());
    }

    fn linear_setup(noise: f64) -> (LinearModel, ParameterSpace) {
        let model = LinearModel::new(DMatrix::from_row_slice(
            3,
            2,
            &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0],
        ))
        .with_internal_noise(&(DMatrix::identity(3, 3) * noise), 1.0)
        .unwrap();
        let space = ParameterSpace::new(vec![
            ParameterDef::new("a", Bounds::Unbounded, 0.0, 1.0),
            ParameterDef::new("b", Bounds::Unbounded, 0.0, 1.0),
        ])
        .unwrap();
        (model, space)
    }

    fn linear_spec(n: usize) -> PredictionSpec {
        PredictionSpec {
            n_posterior_samples: n,
            long_window: 1.0,
            scenarios: vec![ScenarioSpec {
                name: "control".into(),
                knobs: Scenario::control(),
            }],
            ..PredictionSpec::default()
        }
    }

    #[test]
    fn degenerate_chain_matches_reference_band() {
        let (model, space) = linear_setup(1.0);
        let theta = [0.3, -0.7];
        let states = vec![DVector::from_column_slice(&theta); 2000];
        let spec = linear_spec(1000);
        let bands = predict_ensemble(&states, &space, &model, &theta, &spec, 4).unwrap();
        let sb = &bands.scenarios[0];
        assert_eq!(sb.n_used, 1000);
        assert_eq!(sb.n_dropped, 0);
        for r in &sb.rows {
            let w = r.upper - r.lower;
            let w_ref = r.ref_upper - r.ref_lower;
            assert!((w / w_ref - 1.0).abs() < 0.15, "widths {w} vs {w_ref}");
            assert!((r.median - r.ref_median).abs() < 0.2);
        }
    }

    #[test]
    fn bands_are_ordered_and_reproducible() {
        let (model, space) = linear_setup(0.1);
        let mut rng = seed::rng(3);
        let states = space.prior_sample(&mut rng, 3000);
        let spec = linear_spec(100);
        let a = predict_ensemble(&states, &space, &model, &[0.0, 0.0], &spec, 9).unwrap();
        let b = predict_ensemble(&states, &space, &model, &[0.0, 0.0], &spec, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sample_indices.len(), 100);
        let mut sorted_idx = a.sample_indices.clone();
        sorted_idx.dedup();
        assert_eq!(sorted_idx.len(), 100);
        assert!(a.sample_indices.iter().all(|i| i % a.stride == 0));
        for r in &a.scenarios[0].rows {
            assert!(r.lower <= r.median && r.median <= r.upper);
            assert!(r.ref_lower <= r.ref_median && r.ref_median <= r.ref_upper);
            // Parametric spread dominates the small internal noise.
            assert!(r.upper - r.lower > r.ref_upper - r.ref_lower);
        }
        let t = bands_table(&a, &spec);
        assert_eq!(t.rows.len(), 3);
        assert_eq!(t.header[5], "p2.5");
        assert_eq!(t.header[9], "ref_p97.5");
    }

    #[test]
    fn preconditions() {
        let (model, space) = linear_setup(0.1);
        let states = vec![DVector::zeros(2); 50];
        assert!(
            predict_ensemble(&states, &space, &model, &[0.0, 0.0], &linear_spec(100), 1).is_err()
        );
        let mut spec = linear_spec(10);
        spec.scenarios[0].knobs = Scenario::control().with("forcing_scale", 2.0);
        let err = predict_ensemble(&states, &space, &model, &[0.0, 0.0], &spec, 1).unwrap_err();
        assert!(matches!(err, CesError::Unsupported(_)));
        assert!(linear_spec(1).validate(0.0).is_err());
        assert!(linear_spec(10).validate(5.0).is_err());
    }

    #[test]
    fn thinning_respects_autocorrelation() {
        // A chain that repeats each value 10 times has tau near 10 (the estimator
        // is biased slightly low).
        let mut rng = seed::rng(5);
        let states: Vec<DVector<f64>> = (0..2000)
            .flat_map(|_| {
                let v = DVector::from_element(
                    1,
                    rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng),
                );
                std::iter::repeat_n(v, 10)
            })
            .collect();
        let stride = thinning_stride(&states, 100);
        assert!((8..=25).contains(&stride), "stride {stride}");
        // Short chains cap the stride so enough draws remain.
        assert_eq!(thinning_stride(&states[..500], 100), 5);
        assert!(subsample_indices(100, 10, 11, 0).is_err());
    }

    #[test]
    fn lorenz_control_exceedance_and_forcing_response() {
        let model = Lorenz96::new(Lorenz96Config::default(), 5.0).unwrap();
        let spec = PredictionSpec {
            long_window: 200.0,
            ..PredictionSpec::default()
        };
        let theta = [8.0, 1.0];
        let r = exceedance_study(&model, &theta, &spec, 12).unwrap();
        for f in &r.control {
            assert!((f - 0.1).abs() < 0.03, "control frequency {f}");
        }
        let (_, hot) = &r.scenarios[0];
        let up = hot.iter().zip(&r.control).filter(|(h, c)| h > c).count();
        assert!(up as f64 >= 0.8 * hot.len() as f64);
    }
}
