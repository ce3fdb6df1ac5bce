use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_window, Block, DataLayout, DataVector, ForwardModel, Scenario, SiteSamples};
use crate::error::{CesError, Result};
use crate::noise::Boundary;
use crate::params::Bounds;
use crate::seed;

/// States larger than this are treated as numerical blow-up.
const BLOWUP: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lorenz96Config {
    /// Number of cyclic state variables.
    pub n_vars: usize,
    /// Observation bands; each averages `n_vars / n_bands` neighbouring variables.
    pub n_bands: usize,
    /// Fixed RK4 step.
    pub dt: f64,
    /// Upper end of the forcing-amplitude interval.
    pub forcing_max: f64,
    /// Relative amplitude of the cosine modulation of forcing along the ring.
    pub forcing_profile: f64,
    /// Threshold for the exceedance-frequency observable.
    pub exceedance_threshold: f64,
    /// Time between instantaneous samples in `site_samples`.
    pub sample_interval: f64,
}

impl Default for Lorenz96Config {
    fn default() -> Self {
        Lorenz96Config {
            n_vars: 40,
            n_bands: 4,
            dt: 0.01,
            forcing_max: 14.0,
            forcing_profile: 0.25,
            exceedance_threshold: 8.0,
            sample_interval: 0.05,
        }
    }
}

/// Cyclic Lorenz-96 system with two unknown parameters, forcing amplitude F
/// and relaxation timescale tau:
///
/// ```text
/// dx_k/dt = (x_{k+1} - x_{k-2}) x_{k-1} - x_k / tau + s F (1 + a cos(2 pi k / K))
/// ```
///
/// where `s` is the `forcing_scale` scenario knob. Observables per band are the
/// time mean, the time variance and the frequency of exceeding a fixed
/// threshold.
#[derive(Debug, Clone)]
pub struct Lorenz96 {
    config: Lorenz96Config,
    spin_up: f64,
    layout: DataLayout,
}

impl Lorenz96 {
    pub fn new(config: Lorenz96Config, spin_up: f64) -> Result<Self> {
        if config.n_vars < 4 {
            return Err(CesError::Config(
                "lorenz96 needs at least 4 variables".into(),
            ));
        }
        if config.n_bands == 0 || config.n_vars % config.n_bands != 0 {
            return Err(CesError::Config(format!(
                "lorenz96: n_bands = {} must divide n_vars = {}",
                config.n_bands, config.n_vars
            )));
        }
        for (name, v) in [
            ("dt", config.dt),
            ("forcing_max", config.forcing_max),
            ("sample_interval", config.sample_interval),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CesError::Config(format!(
                    "lorenz96: {name} must be positive"
                )));
            }
        }
        if !(config.forcing_profile.abs() < 1.0) {
            return Err(CesError::Config(
                "lorenz96: |forcing_profile| must be < 1".into(),
            ));
        }
        if !(spin_up >= 0.0 && spin_up.is_finite()) {
            return Err(CesError::Config(
                "lorenz96: spin_up must be non-negative".into(),
            ));
        }
        let nb = config.n_bands;
        let width = (config.n_vars / nb) as f64;
        let centres: Vec<f64> = (0..nb).map(|b| (b as f64 + 0.5) * width).collect();
        let blocks = ["mean", "variance", "exceedance"]
            .iter()
            .enumerate()
            .map(|(i, name)| Block {
                name: name.to_string(),
                start: i * nb,
                len: nb,
            })
            .collect();
        let layout = DataLayout {
            blocks,
            coordinates: centres.iter().cycle().take(3 * nb).copied().collect(),
        };
        Ok(Lorenz96 {
            config,
            spin_up,
            layout,
        })
    }

    pub fn config(&self) -> &Lorenz96Config {
        &self.config
    }

    fn steps(&self, duration: f64) -> usize {
        (duration / self.config.dt).round() as usize
    }

    fn band_width(&self) -> usize {
        self.config.n_vars / self.config.n_bands
    }

    /// Integrator positioned at the end of spin-up.
    fn spun_up(&self, theta: &[f64], seed: u64, scenario: &Scenario) -> Result<Integrator> {
        self.check_theta(theta)?;
        self.check_scenario(scenario)?;
        let n = self.config.n_vars;
        let scale = scenario.get("forcing_scale");
        let forcing = (0..n)
            .map(|k| {
                let phase = 2.0 * PI * k as f64 / n as f64;
                scale * theta[0] * (1.0 + self.config.forcing_profile * phase.cos())
            })
            .collect::<Vec<_>>();
        let mut rng = seed::rng(seed);
        let state = forcing
            .iter()
            .map(|f| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.5 * f + z
            })
            .collect();
        let mut integ = Integrator::new(state, forcing, 1.0 / theta[1], self.config.dt);
        let spin = self.steps(self.spin_up);
        for i in 0..spin {
            integ.step();
            if i % 64 == 63 {
                integ.check(theta)?;
            }
        }
        integ.check(theta)?;
        Ok(integ)
    }

    fn window_average(
        &self,
        integ: &mut Integrator,
        theta: &[f64],
        steps: usize,
    ) -> Result<DataVector> {
        let n = self.config.n_vars;
        let nb = self.config.n_bands;
        let bw = self.band_width();
        let thr = self.config.exceedance_threshold;
        let mut sum = vec![0.0; n];
        let mut sumsq = vec![0.0; n];
        let mut exceed = vec![0usize; n];
        for _ in 0..steps {
            integ.step();
            for (k, &x) in integ.state.iter().enumerate() {
                if !(x.abs() <= BLOWUP) {
                    return Err(blowup(theta, x));
                }
                sum[k] += x;
                sumsq[k] += x * x;
                exceed[k] += usize::from(x > thr);
            }
        }
        let steps = steps as f64;
        let mut out = DataVector::zeros(3 * nb);
        for b in 0..nb {
            let (mut m, mut v, mut e) = (0.0, 0.0, 0.0);
            for k in b * bw..(b + 1) * bw {
                let mk = sum[k] / steps;
                m += mk;
                v += (sumsq[k] / steps - mk * mk).max(0.0);
                e += exceed[k] as f64 / steps;
            }
            out[b] = m / bw as f64;
            out[nb + b] = v / bw as f64;
            out[2 * nb + b] = e / bw as f64;
        }
        Ok(out)
    }
}

fn blowup(theta: &[f64], x: f64) -> CesError {
    CesError::EvaluationFailed {
        theta: theta.to_vec(),
        reason: format!("state left the finite range (value {x})"),
    }
}

impl ForwardModel for Lorenz96 {
    fn name(&self) -> &str {
        "lorenz96"
    }

    fn param_bounds(&self) -> Vec<Bounds> {
        vec![
            Bounds::Interval {
                lower: 0.0,
                upper: self.config.forcing_max,
            },
            Bounds::Positive,
        ]
    }

    fn layout(&self) -> &DataLayout {
        &self.layout
    }

    fn output_boundaries(&self) -> Vec<Boundary> {
        let nb = self.config.n_bands;
        let mut out = vec![Boundary::None; nb];
        out.extend(std::iter::repeat_n(Boundary::Lower(0.0), nb));
        out.extend(std::iter::repeat_n(Boundary::Interval(0.0, 1.0), nb));
        out
    }

    fn spin_up(&self) -> f64 {
        self.spin_up
    }

    fn evaluate(
        &self,
        theta: &[f64],
        seed: u64,
        window: f64,
        scenario: &Scenario,
    ) -> Result<DataVector> {
        check_window(window)?;
        let steps = self.steps(window).max(1);
        let mut integ = self.spun_up(theta, seed, scenario)?;
        self.window_average(&mut integ, theta, steps)
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
        check_window(window)?;
        let steps = self.steps(window).max(1);
        let mut integ = self.spun_up(theta, seed, scenario)?;
        (0..n_windows)
            .map(|_| self.window_average(&mut integ, theta, steps))
            .collect()
    }

    fn site_samples(
        &self,
        theta: &[f64],
        seed: u64,
        window: f64,
        scenario: &Scenario,
    ) -> Result<SiteSamples> {
        check_window(window)?;
        let steps = self.steps(window).max(1);
        let stride = self.steps(self.config.sample_interval).max(1);
        let bw = self.band_width();
        let mut integ = self.spun_up(theta, seed, scenario)?;
        let mut sites = vec![Vec::with_capacity(bw * steps / stride); self.config.n_bands];
        for i in 1..=steps {
            integ.step();
            if i % stride == 0 {
                for (k, &x) in integ.state.iter().enumerate() {
                    if !(x.abs() <= BLOWUP) {
                        return Err(blowup(theta, x));
                    }
                    sites[k / bw].push(x);
                }
            }
        }
        Ok(SiteSamples {
            sites,
            coordinates: self.layout.coordinates[..self.config.n_bands].to_vec(),
        })
    }

    fn check_scenario(&self, scenario: &Scenario) -> Result<()> {
        scenario.check_knobs(self.name(), &["forcing_scale"])
    }
}

struct Integrator {
    state: Vec<f64>,
    forcing: Vec<f64>,
    damping: f64,
    dt: f64,
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Integrator {
    fn new(state: Vec<f64>, forcing: Vec<f64>, damping: f64, dt: f64) -> Self {
        let n = state.len();
        Integrator {
            state,
            forcing,
            damping,
            dt,
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    fn check(&self, theta: &[f64]) -> Result<()> {
        match self.state.iter().find(|x| !(x.abs() <= BLOWUP)) {
            Some(&x) => Err(blowup(theta, x)),
            None => Ok(()),
        }
    }

    fn rhs(x: &[f64], forcing: &[f64], damping: f64, out: &mut [f64]) {
        let n = x.len();
        for k in 0..n {
            let kp1 = if k + 1 == n { 0 } else { k + 1 };
            let km1 = if k == 0 { n - 1 } else { k - 1 };
            let km2 = if k >= 2 { k - 2 } else { k + n - 2 };
            out[k] = (x[kp1] - x[km2]) * x[km1] - damping * x[k] + forcing[k];
        }
    }

    fn step(&mut self) {
        let h = self.dt;
        let (f, d) = (&self.forcing, self.damping);
        Self::rhs(&self.state, f, d, &mut self.k1);
        for ((t, x), k) in self.tmp.iter_mut().zip(&self.state).zip(&self.k1) {
            *t = x + 0.5 * h * k;
        }
        Self::rhs(&self.tmp, f, d, &mut self.k2);
        for ((t, x), k) in self.tmp.iter_mut().zip(&self.state).zip(&self.k2) {
            *t = x + 0.5 * h * k;
        }
        Self::rhs(&self.tmp, f, d, &mut self.k3);
        for ((t, x), k) in self.tmp.iter_mut().zip(&self.state).zip(&self.k3) {
            *t = x + h * k;
        }
        Self::rhs(&self.tmp, f, d, &mut self.k4);
        for i in 0..self.state.len() {
            self.state[i] +=
                h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Lorenz96 {
        Lorenz96::new(Lorenz96Config::default(), 5.0).unwrap()
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let m = model();
        let a = m
            .evaluate(&[8.0, 1.0], 17, 5.0, &Scenario::control())
            .unwrap();
        let b = m
            .evaluate(&[8.0, 1.0], 17, 5.0, &Scenario::control())
            .unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        let c = m
            .evaluate(&[8.0, 1.0], 18, 5.0, &Scenario::control())
            .unwrap();
        assert_ne!(a.as_slice(), c.as_slice());
    }

    #[test]
    fn layout_has_three_blocks() {
        let m = model();
        assert_eq!(m.data_dim(), 12);
        assert_eq!(m.layout().block_of(0), "mean");
        assert_eq!(m.layout().block_of(4), "variance");
        assert_eq!(m.layout().block_of(11), "exceedance");
        assert_eq!(m.output_boundaries().len(), 12);
    }

    #[test]
    fn out_of_bounds_theta_is_a_domain_error() {
        let m = model();
        let s = Scenario::control();
        assert!(matches!(
            m.evaluate(&[-1.0, 1.0], 1, 1.0, &s),
            Err(CesError::Domain(_))
        ));
        assert!(matches!(
            m.evaluate(&[15.0, 1.0], 1, 1.0, &s),
            Err(CesError::Domain(_))
        ));
        assert!(matches!(
            m.evaluate(&[8.0, 0.0], 1, 1.0, &s),
            Err(CesError::Domain(_))
        ));
    }

    #[test]
    fn blowup_is_reported_with_theta() {
        // A huge step makes RK4 unstable.
        let cfg = Lorenz96Config {
            dt: 0.5,
            ..Lorenz96Config::default()
        };
        let m = Lorenz96::new(cfg, 5.0).unwrap();
        match m.evaluate(&[11.0, 50.0], 1, 20.0, &Scenario::control()) {
            Err(CesError::EvaluationFailed { theta, .. }) => assert_eq!(theta, vec![11.0, 50.0]),
            other => panic!("expected evaluation failure, got {other:?}"),
        }
    }

    #[test]
    fn outputs_respect_physical_ranges() {
        let m = model();
        let y = m
            .evaluate(&[8.4, 1.0], 3, 10.0, &Scenario::control())
            .unwrap();
        for b in 0..4 {
            assert!(y[4 + b] >= 0.0);
            assert!((0.0..=1.0).contains(&y[8 + b]));
        }
    }

    #[test]
    fn site_samples_have_expected_counts() {
        let m = model();
        let s = m
            .site_samples(&[8.0, 1.0], 2, 2.0, &Scenario::control())
            .unwrap();
        assert_eq!(s.sites.len(), 4);
        // 200 steps, stride 5 -> 40 samples of 10 variables per band.
        assert!(s.sites.iter().all(|v| v.len() == 400));
    }

    #[test]
    fn scenario_changes_output() {
        let m = model();
        let a = m
            .evaluate(&[8.0, 1.0], 2, 5.0, &Scenario::control())
            .unwrap();
        let b = m
            .evaluate(
                &[8.0, 1.0],
                2,
                5.0,
                &Scenario::control().with("forcing_scale", 1.5),
            )
            .unwrap();
        assert_ne!(a, b);
        assert!(m
            .evaluate(
                &[8.0, 1.0],
                2,
                5.0,
                &Scenario::control().with("opacity", 1.5)
            )
            .is_err());
    }
}
