//! Pipeline stages. Each stage reads only persisted upstream artifacts,
//! writes its own, and records checksums of both in the manifest.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use super::run::{Run, StageRecord};
use crate::eki::{
    eki_restore, eki_resume, eki_start, IterationDiagnostics, TrainingPair, TrainingSet,
};
use crate::error::{CesError, Result};
use crate::gp::{benchmark_grid_train, Emulator, GridSpec};
use crate::io::{self, fmt_f64, Table};
use crate::mcmc::{
    posterior_summary, rwm_chains, Chain, CredibleRegions, Posterior, PosteriorSummary, HPD_LEVELS,
};
use crate::model::{add_measurement_noise, surrogate_truth_run, DataLayout, TruthRunConfig};
use crate::noise::{DeltaWarning, NoiseModel};
use crate::params::ParameterSpace;
use crate::predict::{
    bands_table, exceedance_study, predict_ensemble, ExceedanceReport, PredictionBands,
};
use crate::seed::{self, tag};

pub const TRUTH: &str = "truth";
pub const CALIBRATE: &str = "calibrate";
pub const EMULATE: &str = "emulate";
pub const SAMPLE: &str = "sample";
pub const PREDICT: &str = "predict";
pub const BENCHMARK: &str = "benchmark";

/// Two-sided 95% Gaussian quantile used for emulator validation bands.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Column names of a data vector: `<block>_<j>` with `j` counted within the block.
pub fn output_names(layout: &DataLayout) -> Vec<String> {
    let mut names = Vec::with_capacity(layout.len());
    for b in &layout.blocks {
        for j in 0..b.len {
            names.push(format!("{}_{j}", b.name));
        }
    }
    names
}

fn comp_names(space: &ParameterSpace) -> Vec<String> {
    space.names().iter().map(|n| format!("z_{n}")).collect()
}

fn phys_names(space: &ParameterSpace) -> Vec<String> {
    space.names().iter().map(|n| n.to_string()).collect()
}

fn fmt_all(v: &[f64]) -> impl Iterator<Item = String> + '_ {
    v.iter().map(|&x| fmt_f64(x))
}

fn row_vector(t: &Table, row: usize, cols: &[String], path: &Path) -> Result<Vec<f64>> {
    cols.iter()
        .map(|c| {
            let j = t
                .column(c)
                .ok_or_else(|| CesError::artifact(path, format!("missing column {c}")))?;
            io::parse_f64(&t.rows[row][j])
                .ok_or_else(|| CesError::artifact(path, format!("bad number in {c}")))
        })
        .collect()
}

fn stage_seed(run: &Run, stage_tag: u64, k: usize) -> u64 {
    seed::derive_seed(run.config().seed, &[stage_tag, k as u64])
}

fn check_realization(run: &Run, k: usize) -> Result<()> {
    let n = run.config().realizations;
    if k == 0 || k > n {
        return Err(CesError::Config(format!("realization {k} outside 1..={n}")));
    }
    Ok(())
}

/// Run-relative path of an artifact.
fn rel(stage: &str, k: Option<usize>, file: &str) -> String {
    format!("{}/{file}", super::run::stage_key(stage, k))
}

// ---------------------------------------------------------------- truth

/// Metadata written next to the truth artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthInfo {
    pub model: String,
    pub parameters: Vec<String>,
    pub theta_true: Vec<f64>,
    pub theta_true_comp: Vec<f64>,
    pub window: f64,
    pub spin_up: f64,
    pub n_windows: usize,
    pub realizations: usize,
    pub outputs: Vec<String>,
    pub layout: DataLayout,
    pub noise_rank: usize,
    pub noise_floor: f64,
    pub inflation_ratio: f64,
    pub delta_warnings: Vec<DeltaWarning>,
}

/// Everything downstream stages need from `generate-truth`.
pub struct TruthArtifacts {
    pub info: TruthInfo,
    pub noise: NoiseModel,
    pub long_mean: DVector<f64>,
    /// Noisy data, one per realization (index 0 is realization 1).
    pub data: Vec<DVector<f64>>,
    pub inputs: Vec<String>,
}

const TRUTH_FILES: [&str; 11] = [
    "windows.csv",
    "long_mean.csv",
    "clean.csv",
    "data.csv",
    "sigma.csv",
    "delta.csv",
    "gamma.csv",
    "basis.csv",
    "scales.csv",
    "correlation.csv",
    "info.json",
];

pub fn generate_truth(run: &Run) -> Result<StageRecord> {
    let cfg = run.config();
    let _lock = run.lock_realization(None)?;
    let model = cfg.build_model()?;
    let space = cfg.space()?;
    let theta = cfg.model.truth.clone();
    info!(model = model.name(), ?theta, "generating truth");
    let truth = surrogate_truth_run(
        model.as_ref(),
        &TruthRunConfig {
            theta: theta.clone(),
            window: cfg.model.window,
            n_windows: cfg.noise.n_windows,
            n_realizations: cfg.realizations,
            master_seed: cfg.seed,
        },
    )?;
    let (noise, warnings) =
        NoiseModel::from_windows(&truth.windows, &cfg.boundary_spec(model.as_ref()))?;
    for w in &warnings {
        warn!(
            index = w.index,
            mean = w.mean,
            std = w.std,
            "output near its boundary; no measurement noise added"
        );
    }
    let noise_seeds: Vec<u64> = (1..=cfg.realizations as u64)
        .map(|k| seed::derive_seed(cfg.seed, &[tag::TRUTH_NOISE, k]))
        .collect();
    let data: Vec<DVector<f64>> = truth
        .realizations
        .iter()
        .zip(&noise_seeds)
        .map(|(g, &s)| add_measurement_noise(g, noise.delta(), &mut seed::rng(s)))
        .collect();

    let dir = run.stage_dir(TRUTH, None);
    let names = output_names(model.layout());
    let mut t = Table::new(names.iter().cloned());
    for w in &truth.windows {
        t.push(fmt_all(w.as_slice()).collect());
    }
    t.write(&dir.join("windows.csv"))?;
    let mut t = Table::new(names.iter().cloned());
    t.push(fmt_all(truth.long_mean.as_slice()).collect());
    t.write(&dir.join("long_mean.csv"))?;
    for (file, rows, seeds) in [
        ("clean.csv", &truth.realizations, &truth.realization_seeds),
        ("data.csv", &data, &noise_seeds),
    ] {
        let mut t = Table::new(
            ["realization".to_string(), "seed".to_string()]
                .into_iter()
                .chain(names.iter().cloned()),
        );
        for (k, (v, s)) in rows.iter().zip(seeds).enumerate() {
            t.push(
                [(k + 1).to_string(), s.to_string()]
                    .into_iter()
                    .chain(fmt_all(v.as_slice()))
                    .collect(),
            );
        }
        t.write(&dir.join(file))?;
    }
    io::write_matrix(&dir.join("sigma.csv"), &names, noise.sigma())?;
    io::write_matrix(&dir.join("delta.csv"), &names, noise.delta())?;
    io::write_matrix(&dir.join("gamma.csv"), &names, noise.gamma())?;
    let modes: Vec<String> = (0..noise.basis().ncols())
        .map(|j| format!("mode_{j}"))
        .collect();
    io::write_matrix(&dir.join("basis.csv"), &modes, noise.basis())?;
    io::write_matrix(
        &dir.join("scales.csv"),
        &["scale".to_string()],
        &DMatrix::from_column_slice(noise.dim(), 1, noise.scales().as_slice()),
    )?;
    io::write_matrix(&dir.join("correlation.csv"), &names, &noise.correlation())?;
    let info = TruthInfo {
        model: model.name().to_string(),
        parameters: phys_names(&space),
        theta_true_comp: space.to_computational(&theta)?.as_slice().to_vec(),
        theta_true: theta,
        window: cfg.model.window,
        spin_up: model.spin_up(),
        n_windows: cfg.noise.n_windows,
        realizations: cfg.realizations,
        outputs: names,
        layout: model.layout().clone(),
        noise_rank: noise.rank(),
        noise_floor: noise.floor(),
        inflation_ratio: noise.inflation_ratio(),
        delta_warnings: warnings,
    };
    io::write_json(&dir.join("info.json"), &info)?;

    let mut seeds = vec![("truth/windows".to_string(), truth.window_seed)];
    for (k, (&r, &n)) in truth.realization_seeds.iter().zip(&noise_seeds).enumerate() {
        seeds.push((format!("truth/realization/{}", k + 1), r));
        seeds.push((format!("truth/noise/{}", k + 1), n));
    }
    let outputs: Vec<String> = TRUTH_FILES.iter().map(|f| rel(TRUTH, None, f)).collect();
    run.complete(
        TRUTH,
        None,
        &[],
        &outputs,
        cfg.noise.n_windows + cfg.realizations,
        0,
        &seeds,
    )
}

pub fn load_truth(run: &Run) -> Result<TruthArtifacts> {
    run.require(TRUTH, None, "generate-truth")?;
    let dir = run.stage_dir(TRUTH, None);
    let info: TruthInfo = io::read_json(&dir.join("info.json"))?;
    let noise = NoiseModel::new(
        io::read_matrix(&dir.join("sigma.csv"))?,
        io::read_matrix(&dir.join("delta.csv"))?,
    )?;
    let long_mean = io::read_matrix(&dir.join("long_mean.csv"))?;
    if long_mean.nrows() != 1 || long_mean.ncols() != info.outputs.len() {
        return Err(CesError::artifact(
            dir.join("long_mean.csv"),
            "expected one row per output",
        ));
    }
    let path = dir.join("data.csv");
    let t = Table::read(&path)?;
    let data = (0..t.rows.len())
        .map(|r| row_vector(&t, r, &info.outputs, &path).map(DVector::from_vec))
        .collect::<Result<Vec<_>>>()?;
    if data.len() != info.realizations {
        return Err(CesError::artifact(
            path,
            "realization count differs from info.json",
        ));
    }
    Ok(TruthArtifacts {
        long_mean: long_mean.row(0).transpose(),
        noise,
        data,
        inputs: [
            "info.json",
            "sigma.csv",
            "delta.csv",
            "long_mean.csv",
            "data.csv",
        ]
        .iter()
        .map(|f| rel(TRUTH, None, f))
        .collect(),
        info,
    })
}

// ---------------------------------------------------------------- calibrate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EkiCheckpoint {
    stage_seed: u64,
    pairs: usize,
    evaluations: usize,
    diagnostics: Vec<IterationDiagnostics>,
}

/// Headline numbers of one EKI run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EkiSummary {
    pub n_iter: usize,
    pub ensemble_size: usize,
    pub training_pairs: usize,
    pub training_evaluations: usize,
    pub total_evaluations: usize,
    /// Diagnostics at iteration 0, at `n_iter` and at the last iteration.
    pub initial: IterationDiagnostics,
    pub trained: IterationDiagnostics,
    pub last: IterationDiagnostics,
    /// |mean - truth| / |truth| per physical parameter at `n_iter`.
    pub relative_error: Vec<f64>,
}

fn pairs_table(space: &ParameterSpace, outputs: &[String], pairs: &[TrainingPair]) -> Table {
    let header = ["iteration", "member", "seed"]
        .iter()
        .map(|s| s.to_string())
        .chain(comp_names(space))
        .chain(phys_names(space))
        .chain(outputs.iter().cloned());
    let mut t = Table::new(header);
    for p in pairs {
        let phys = space.to_physical(&DVector::from_column_slice(&p.theta));
        t.push(
            [
                p.iteration.to_string(),
                p.member.to_string(),
                p.seed.to_string(),
            ]
            .into_iter()
            .chain(fmt_all(&p.theta))
            .chain(fmt_all(&phys))
            .chain(fmt_all(&p.output))
            .collect(),
        );
    }
    t
}

/// Reads a pairs table (EKI or grid) back into training pairs.
pub fn read_pairs(
    path: &Path,
    space: &ParameterSpace,
    outputs: &[String],
) -> Result<Vec<TrainingPair>> {
    let t = Table::read(path)?;
    let it = t.u64_column("iteration", path)?;
    let mem = t.u64_column("member", path)?;
    let seeds = t.u64_column("seed", path)?;
    let zc = comp_names(space);
    (0..t.rows.len())
        .map(|r| {
            Ok(TrainingPair {
                iteration: it[r] as usize,
                member: mem[r] as usize,
                seed: seeds[r],
                theta: row_vector(&t, r, &zc, path)?,
                output: row_vector(&t, r, outputs, path)?,
            })
        })
        .collect()
}

fn diagnostics_table(space: &ParameterSpace, diags: &[IterationDiagnostics]) -> Table {
    let names = phys_names(space);
    let header = [
        "iteration".to_string(),
        "residual".into(),
        "resampled".into(),
    ]
    .into_iter()
    .chain(names.iter().map(|n| format!("mean_z_{n}")))
    .chain(names.iter().map(|n| format!("mean_{n}")))
    .chain(names.iter().map(|n| format!("spread_z_{n}")))
    .chain(names.iter().map(|n| format!("spread_{n}")));
    let mut t = Table::new(header);
    for d in diags {
        t.push(
            [
                d.iteration.to_string(),
                fmt_f64(d.residual),
                d.resampled.to_string(),
            ]
            .into_iter()
            .chain(fmt_all(&d.mean_comp))
            .chain(fmt_all(&d.mean_phys))
            .chain(fmt_all(&d.spread_comp))
            .chain(fmt_all(&d.spread_phys))
            .collect(),
        );
    }
    t
}

/// EKI for realization `k`. A run interrupted after some iterations resumes
/// from `checkpoint.json` and produces the same artifacts as an
/// uninterrupted one.
pub fn calibrate(run: &Run, k: usize) -> Result<StageRecord> {
    check_realization(run, k)?;
    let cfg = run.config();
    let truth = load_truth(run)?;
    let _lock = run.lock_realization(Some(k))?;
    let model = cfg.build_model()?;
    let space = cfg.space()?;
    let stage_seed = stage_seed(run, tag::STAGE_CALIBRATE, k);
    let ecfg = cfg.eki_config(stage_seed);
    let y = &truth.data[k - 1];
    let gamma = truth.noise.gamma();
    let dir = run.stage_dir(CALIBRATE, Some(k));
    let pairs_path = dir.join("pairs.csv");
    let ckpt_path = dir.join("checkpoint.json");

    let state = match resume_state(
        &ckpt_path,
        &pairs_path,
        stage_seed,
        &space,
        &truth.info.outputs,
    ) {
        Some((pairs, ck)) => {
            info!(
                realization = k,
                iterations = ck.diagnostics.len(),
                "resuming EKI"
            );
            eki_restore(
                &space,
                &ecfg,
                y,
                gamma,
                pairs,
                ck.diagnostics,
                ck.evaluations,
            )?
        }
        None => eki_start(&space, &ecfg)?,
    };
    let outputs = &truth.info.outputs;
    let mut save = |s: &crate::eki::EkiState| -> Result<()> {
        pairs_table(&space, outputs, &s.pairs).write(&pairs_path)?;
        io::write_json(
            &ckpt_path,
            &EkiCheckpoint {
                stage_seed,
                pairs: s.pairs.len(),
                evaluations: s.evaluations,
                diagnostics: s.diagnostics.clone(),
            },
        )
    };
    let result = eki_resume(model.as_ref(), y, gamma, &space, &ecfg, state, &mut save)?;

    diagnostics_table(&space, &result.diagnostics).write(&dir.join("diagnostics.csv"))?;
    let diag = |i: usize| result.diagnostics[i].clone();
    let trained = diag(ecfg.n_iter);
    let summary = EkiSummary {
        n_iter: ecfg.n_iter,
        ensemble_size: ecfg.ensemble_size,
        training_pairs: result.training.len(),
        training_evaluations: result.training_evaluations,
        total_evaluations: result.total_evaluations,
        initial: diag(0),
        relative_error: trained
            .mean_phys
            .iter()
            .zip(&truth.info.theta_true)
            .map(|(m, t)| ((m - t) / t).abs())
            .collect(),
        trained,
        last: diag(result.diagnostics.len() - 1),
    };
    io::write_json(&dir.join("summary.json"), &summary)?;
    let outs: Vec<String> = [
        "pairs.csv",
        "checkpoint.json",
        "diagnostics.csv",
        "summary.json",
    ]
    .iter()
    .map(|f| rel(CALIBRATE, Some(k), f))
    .collect();
    run.complete(
        CALIBRATE,
        Some(k),
        &truth.inputs,
        &outs,
        result.total_evaluations,
        0,
        &[(format!("r{k}/calibrate"), stage_seed)],
    )
}

fn resume_state(
    ckpt: &Path,
    pairs: &Path,
    stage_seed: u64,
    space: &ParameterSpace,
    outputs: &[String],
) -> Option<(Vec<TrainingPair>, EkiCheckpoint)> {
    let ck: EkiCheckpoint = io::read_json(ckpt).ok()?;
    if ck.stage_seed != stage_seed {
        return None;
    }
    let mut p = read_pairs(pairs, space, outputs).ok()?;
    // The pairs file is written before the checkpoint, so it may run ahead.
    if p.len() < ck.pairs {
        return None;
    }
    p.truncate(ck.pairs);
    Some((p, ck))
}

pub fn load_eki_summary(run: &Run, k: usize) -> Result<EkiSummary> {
    io::read_json(&run.stage_dir(CALIBRATE, Some(k)).join("summary.json"))
}

// ---------------------------------------------------------------- emulate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub n_train: usize,
    pub n_outputs: usize,
    pub n_covered: usize,
    /// Fraction of outputs whose 95% band at the true parameters covers the
    /// long-run mean.
    pub coverage: f64,
    pub jitters: Vec<f64>,
    pub log_marginal_likelihoods: Vec<f64>,
}

pub fn emulate(run: &Run, k: usize) -> Result<StageRecord> {
    check_realization(run, k)?;
    let cfg = run.config();
    let truth = load_truth(run)?;
    run.require(CALIBRATE, Some(k), &format!("calibrate --realization {k}"))?;
    let _lock = run.lock_realization(Some(k))?;
    let space = cfg.space()?;
    let stage_seed = stage_seed(run, tag::STAGE_EMULATE, k);
    let pairs_rel = rel(CALIBRATE, Some(k), "pairs.csv");
    let pairs = read_pairs(&run.path(&pairs_rel), &space, &truth.info.outputs)?;
    let training = TrainingSet {
        pairs: pairs
            .into_iter()
            .filter(|p| p.iteration <= cfg.eki.n_iter)
            .collect(),
    };
    let emu = Emulator::train(&training, &truth.noise, &cfg.gp_config(stage_seed))?;
    let dir = run.stage_dir(EMULATE, Some(k));
    emu.save(&dir.join("emulator.json"))?;

    let theta = DVector::from_column_slice(&truth.info.theta_true_comp);
    let (mean, cov) = emu.predict_physical(&theta)?;
    let mut t = Table::new([
        "index",
        "block",
        "coordinate",
        "long_mean",
        "gp_mean",
        "gp_sd",
        "lower",
        "upper",
        "covered",
    ]);
    let mut covered = 0;
    for i in 0..mean.len() {
        let sd = cov[(i, i)].max(0.0).sqrt();
        let (lo, hi) = (mean[i] - Z95 * sd, mean[i] + Z95 * sd);
        let c = lo <= truth.long_mean[i] && truth.long_mean[i] <= hi;
        covered += usize::from(c);
        t.push(vec![
            i.to_string(),
            truth.info.layout.block_of(i).to_string(),
            fmt_f64(truth.info.layout.coordinates[i]),
            fmt_f64(truth.long_mean[i]),
            fmt_f64(mean[i]),
            fmt_f64(sd),
            fmt_f64(lo),
            fmt_f64(hi),
            u8::from(c).to_string(),
        ]);
    }
    t.write(&dir.join("validation.csv"))?;
    let summary = ValidationSummary {
        n_train: emu.n_train(),
        n_outputs: mean.len(),
        n_covered: covered,
        coverage: covered as f64 / mean.len() as f64,
        jitters: emu.jitters(),
        log_marginal_likelihoods: emu
            .reports()
            .iter()
            .map(|r| r.log_marginal_likelihood)
            .collect(),
    };
    info!(
        realization = k,
        coverage = summary.coverage,
        "emulator validated"
    );
    io::write_json(&dir.join("summary.json"), &summary)?;
    let inputs: Vec<String> = truth.inputs.iter().cloned().chain([pairs_rel]).collect();
    let outs: Vec<String> = ["emulator.json", "validation.csv", "summary.json"]
        .iter()
        .map(|f| rel(EMULATE, Some(k), f))
        .collect();
    run.complete(
        EMULATE,
        Some(k),
        &inputs,
        &outs,
        0,
        0,
        &[(format!("r{k}/emulate"), stage_seed)],
    )
}

// ---------------------------------------------------------------- sample

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub posterior: PosteriorSummary,
    pub start_comp: Vec<f64>,
    pub theta_true_comp: Vec<f64>,
    /// Smallest tabulated HPD level whose region contains the truth.
    pub truth_smallest_level: Option<f64>,
    /// (level, truth inside the HPD region of that level).
    pub truth_membership: Vec<(f64, bool)>,
    pub emulator_queries: usize,
    pub stored_states: usize,
}

fn chain_table(space: &ParameterSpace, chains: &[Chain], stride: usize) -> Table {
    let header = ["chain".to_string(), "step".into()]
        .into_iter()
        .chain(comp_names(space))
        .chain(phys_names(space))
        .chain(["log_post".to_string(), "accepted".into()]);
    let mut t = Table::new(header);
    for (c, chain) in chains.iter().enumerate() {
        for i in (0..chain.len()).step_by(stride) {
            let s = &chain.states[i];
            t.push(
                [c.to_string(), i.to_string()]
                    .into_iter()
                    .chain(fmt_all(s.as_slice()))
                    .chain(fmt_all(&space.to_physical(s)))
                    .chain([
                        fmt_f64(chain.log_posts[i]),
                        u8::from(chain.accepted[i]).to_string(),
                    ])
                    .collect(),
            );
        }
    }
    t
}

/// Stored chain states in computational coordinates, chains concatenated.
pub fn read_chain(path: &Path, space: &ParameterSpace) -> Result<Vec<DVector<f64>>> {
    let t = Table::read(path)?;
    let zc = comp_names(space);
    (0..t.rows.len())
        .map(|r| row_vector(&t, r, &zc, path).map(DVector::from_vec))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_chains(
    run: &Run,
    emu: &Emulator,
    truth: &TruthArtifacts,
    space: &ParameterSpace,
    k: usize,
    start: &DVector<f64>,
    seed_: u64,
    support: Option<Vec<(f64, f64)>>,
) -> Result<(Vec<Chain>, SampleSummary)> {
    let cfg = run.config();
    let y_tilde = truth.noise.decorrelate_vec(&truth.data[k - 1])?;
    let mut post = Posterior::new(emu, &truth.noise, space, y_tilde)?;
    if let Some(r) = support {
        post = post.with_support(r)?;
    }
    let chains = rwm_chains(&cfg.chain_config(seed_), &post, start, cfg.mcmc.n_chains)?;
    let posterior = posterior_summary(&chains, space)?;
    let pooled: Vec<DVector<f64>> = chains
        .iter()
        .flat_map(|c| c.states.iter().cloned())
        .collect();
    let regions = CredibleRegions::new(&pooled, cfg.mcmc.hpd_max_points)?;
    let theta = DVector::from_column_slice(&truth.info.theta_true_comp);
    let membership = HPD_LEVELS
        .iter()
        .map(|&l| Ok((l, regions.contains(&theta, l)?)))
        .collect::<Result<Vec<_>>>()?;
    let summary = SampleSummary {
        posterior,
        start_comp: start.as_slice().to_vec(),
        theta_true_comp: truth.info.theta_true_comp.clone(),
        truth_smallest_level: regions.smallest_level(&theta)?,
        truth_membership: membership,
        emulator_queries: chains.iter().map(|c| c.evaluations).sum(),
        stored_states: chains
            .iter()
            .map(|c| c.len().div_ceil(cfg.mcmc.storage_stride))
            .sum(),
    };
    Ok((chains, summary))
}

/// MCMC on the emulator posterior, started at the EKI ensemble mean of the
/// last training iteration.
pub fn sample(run: &Run, k: usize) -> Result<StageRecord> {
    check_realization(run, k)?;
    let cfg = run.config();
    let truth = load_truth(run)?;
    run.require(CALIBRATE, Some(k), &format!("calibrate --realization {k}"))?;
    run.require(EMULATE, Some(k), &format!("emulate --realization {k}"))?;
    let _lock = run.lock_realization(Some(k))?;
    let space = cfg.space()?;
    let stage_seed = stage_seed(run, tag::STAGE_SAMPLE, k);
    let emu_rel = rel(EMULATE, Some(k), "emulator.json");
    let eki_rel = rel(CALIBRATE, Some(k), "summary.json");
    let emu = Emulator::load(&run.path(&emu_rel), &truth.noise)?;
    let eki: EkiSummary = io::read_json(&run.path(&eki_rel))?;
    let start = DVector::from_vec(eki.trained.mean_comp.clone());
    let (chains, summary) = run_chains(run, &emu, &truth, &space, k, &start, stage_seed, None)?;
    info!(
        realization = k,
        acceptance = summary.posterior.acceptance_rate,
        truth_level = ?summary.truth_smallest_level,
        "posterior sampled"
    );
    let dir = run.stage_dir(SAMPLE, Some(k));
    chain_table(&space, &chains, cfg.mcmc.storage_stride).write(&dir.join("chain.csv"))?;
    io::write_json(&dir.join("summary.json"), &summary)?;
    let inputs: Vec<String> = truth
        .inputs
        .iter()
        .cloned()
        .chain([emu_rel, eki_rel])
        .collect();
    let outs: Vec<String> = ["chain.csv", "summary.json"]
        .iter()
        .map(|f| rel(SAMPLE, Some(k), f))
        .collect();
    run.complete(
        SAMPLE,
        Some(k),
        &inputs,
        &outs,
        0,
        summary.emulator_queries,
        &[(format!("r{k}/sample"), stage_seed)],
    )
}

pub fn load_sample_summary(run: &Run, k: usize) -> Result<SampleSummary> {
    io::read_json(&run.stage_dir(SAMPLE, Some(k)).join("summary.json"))
}

// ---------------------------------------------------------------- predict

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioCheck {
    pub name: String,
    pub n_used: usize,
    pub n_dropped: usize,
    pub ref_n_used: usize,
    /// lower <= median <= upper for both bands at every index.
    pub ordered: bool,
    /// Indices where the posterior band is at least as wide as the reference band.
    pub wider: usize,
    pub n_indices: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictSummary {
    pub sample_indices: Vec<usize>,
    pub stride: usize,
    pub scenarios: Vec<ScenarioCheck>,
    /// Absent when the model has no instantaneous samples.
    pub exceedance: Option<ExceedanceReport>,
}

fn scenario_checks(bands: &PredictionBands) -> Vec<ScenarioCheck> {
    bands
        .scenarios
        .iter()
        .map(|s| ScenarioCheck {
            name: s.name.clone(),
            n_used: s.n_used,
            n_dropped: s.n_dropped,
            ref_n_used: s.ref_n_used,
            ordered: s.rows.iter().all(|r| {
                r.lower <= r.median
                    && r.median <= r.upper
                    && r.ref_lower <= r.ref_median
                    && r.ref_median <= r.ref_upper
            }),
            wider: s
                .rows
                .iter()
                .filter(|r| r.upper - r.lower >= r.ref_upper - r.ref_lower)
                .count(),
            n_indices: s.rows.len(),
        })
        .collect()
}

pub fn predict(run: &Run, k: usize) -> Result<StageRecord> {
    check_realization(run, k)?;
    let cfg = run.config();
    let truth = load_truth(run)?;
    run.require(SAMPLE, Some(k), &format!("sample --realization {k}"))?;
    let _lock = run.lock_realization(Some(k))?;
    let model = cfg.build_model()?;
    let space = cfg.space()?;
    let stage_seed = stage_seed(run, tag::STAGE_PREDICT, k);
    let chain_rel = rel(SAMPLE, Some(k), "chain.csv");
    let states = read_chain(&run.path(&chain_rel), &space)?;
    let theta = &truth.info.theta_true;
    let bands = predict_ensemble(
        &states,
        &space,
        model.as_ref(),
        theta,
        &cfg.predict,
        stage_seed,
    )?;
    let exceedance = match exceedance_study(model.as_ref(), theta, &cfg.predict, stage_seed) {
        Ok(r) => Some(r),
        Err(CesError::Unsupported(m)) => {
            info!(reason = %m, "exceedance study skipped");
            None
        }
        Err(e) => return Err(e),
    };
    let dir = run.stage_dir(PREDICT, Some(k));
    let mut outs = vec!["bands.csv", "summary.json"];
    bands_table(&bands, &cfg.predict).write(&dir.join("bands.csv"))?;
    let exc_path = dir.join("exceedance.csv");
    if let Some(r) = &exceedance {
        let header = [
            "coordinate".to_string(),
            "threshold".into(),
            "control".into(),
            "control_se".into(),
        ]
        .into_iter()
        .chain(r.scenarios.iter().map(|(n, _)| n.clone()));
        let mut t = Table::new(header);
        for i in 0..r.coordinates.len() {
            t.push(
                [
                    fmt_f64(r.coordinates[i]),
                    fmt_f64(r.thresholds[i]),
                    fmt_f64(r.control[i]),
                    r.control_se[i].map(fmt_f64).unwrap_or_default(),
                ]
                .into_iter()
                .chain(r.scenarios.iter().map(|(_, f)| fmt_f64(f[i])))
                .collect(),
            );
        }
        t.write(&exc_path)?;
        outs.push("exceedance.csv");
    } else if exc_path.exists() {
        fs::remove_file(&exc_path).map_err(|e| CesError::io(&exc_path, e))?;
    }
    let summary = PredictSummary {
        sample_indices: bands.sample_indices.clone(),
        stride: bands.stride,
        scenarios: scenario_checks(&bands),
        exceedance,
    };
    io::write_json(&dir.join("summary.json"), &summary)?;
    let evals = summary
        .scenarios
        .iter()
        .map(|s| s.n_used + s.n_dropped + s.ref_n_used)
        .sum::<usize>()
        + summary
            .exceedance
            .as_ref()
            .map_or(0, |r| 2 + r.scenarios.len());
    let inputs: Vec<String> = truth.inputs.iter().cloned().chain([chain_rel]).collect();
    let outs: Vec<String> = outs.iter().map(|f| rel(PREDICT, Some(k), f)).collect();
    run.complete(
        PREDICT,
        Some(k),
        &inputs,
        &outs,
        evals,
        0,
        &[(format!("r{k}/predict"), stage_seed)],
    )
}

// ---------------------------------------------------------------- benchmark

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    /// Computational-space grid box.
    pub ranges: Vec<(f64, f64)>,
    pub shape: Vec<usize>,
    pub grid_evaluations: usize,
    pub posterior: PosteriorSummary,
    pub truth_smallest_level: Option<f64>,
    /// Per parameter |std_bgp - std_ekigp| / std_ekigp, computational space.
    pub std_relative_difference: Vec<f64>,
    pub emulator_queries: usize,
}

/// Grid-trained emulator and its posterior, for comparison with the EKI-trained one.
/// The grid spans the EKI-GP posterior mean plus or minus `width` posterior
/// standard deviations unless explicit ranges are configured, and the
/// benchmark chain is confined to the grid box.
pub fn benchmark(run: &Run, k: usize) -> Result<StageRecord> {
    check_realization(run, k)?;
    let cfg = run.config();
    let truth = load_truth(run)?;
    run.require(SAMPLE, Some(k), &format!("sample --realization {k}"))?;
    let _lock = run.lock_realization(Some(k))?;
    let model = cfg.build_model()?;
    let space = cfg.space()?;
    let stage_seed = stage_seed(run, tag::STAGE_BENCHMARK, k);
    let sample_rel = rel(SAMPLE, Some(k), "summary.json");
    let ekigp: SampleSummary = io::read_json(&run.path(&sample_rel))?;
    let ranges = match &cfg.benchmark.ranges {
        Some(r) => r.clone(),
        None => ekigp
            .posterior
            .params
            .iter()
            .map(|p| {
                (
                    p.mean_comp - cfg.benchmark.width * p.std_comp,
                    p.mean_comp + cfg.benchmark.width * p.std_comp,
                )
            })
            .collect(),
    };
    let grid = GridSpec {
        ranges: ranges.clone(),
        shape: cfg.benchmark.shape.clone(),
        budget: cfg.benchmark.budget,
    };
    let gp_seed = seed::derive_seed(stage_seed, &[tag::BENCHMARK_GP]);
    let (emu, training) = benchmark_grid_train(
        &grid,
        model.as_ref(),
        &space,
        &truth.noise,
        cfg.model.window,
        stage_seed,
        &cfg.gp_config(gp_seed),
    )?;
    let start = DVector::from_iterator(
        space.dim(),
        ekigp.posterior.params.iter().map(|p| p.mean_comp),
    );
    let mcmc_seed = seed::derive_seed(stage_seed, &[tag::BENCHMARK_MCMC]);
    // A grid emulator knows nothing outside its box, where it reverts to its
    // prior mean with a variance large enough to flatten the likelihood; its
    // posterior is therefore confined to the box.
    let (chains, s) = run_chains(
        run,
        &emu,
        &truth,
        &space,
        k,
        &start,
        mcmc_seed,
        Some(ranges.clone()),
    )?;
    let dir = run.stage_dir(BENCHMARK, Some(k));
    pairs_table(&space, &truth.info.outputs, &training.pairs).write(&dir.join("grid.csv"))?;
    emu.save(&dir.join("emulator.json"))?;
    chain_table(&space, &chains, cfg.mcmc.storage_stride).write(&dir.join("chain.csv"))?;
    let summary = BenchmarkSummary {
        ranges,
        shape: grid.shape.clone(),
        grid_evaluations: training.len(),
        std_relative_difference: s
            .posterior
            .params
            .iter()
            .zip(&ekigp.posterior.params)
            .map(|(b, e)| (b.std_comp - e.std_comp).abs() / e.std_comp)
            .collect(),
        posterior: s.posterior,
        truth_smallest_level: s.truth_smallest_level,
        emulator_queries: s.emulator_queries,
    };
    info!(realization = k, diff = ?summary.std_relative_difference, "benchmark complete");
    io::write_json(&dir.join("summary.json"), &summary)?;
    let inputs: Vec<String> = truth.inputs.iter().cloned().chain([sample_rel]).collect();
    let outs: Vec<String> = ["grid.csv", "emulator.json", "chain.csv", "summary.json"]
        .iter()
        .map(|f| rel(BENCHMARK, Some(k), f))
        .collect();
    run.complete(
        BENCHMARK,
        Some(k),
        &inputs,
        &outs,
        summary.grid_evaluations,
        summary.emulator_queries,
        &[(format!("r{k}/benchmark"), stage_seed)],
    )
}
