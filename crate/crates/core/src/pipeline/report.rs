//! Consolidated report over a run directory, built from persisted artifacts
//! only. The output carries no timestamps, so regenerating it is idempotent.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::run::{read_manifest, stage_key, RunManifest, MANIFEST};
use super::stages::{
    BenchmarkSummary, EkiSummary, PredictSummary, SampleSummary, TruthInfo, ValidationSummary,
    BENCHMARK, CALIBRATE, EMULATE, PREDICT, SAMPLE, TRUTH,
};
use crate::error::{CesError, Result};
use crate::io::{self, fmt_f64, Table};

/// Cap on exported posterior samples per realization.
const MAX_EXPORTED_SAMPLES: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub sigma_windows: usize,
    pub training_evaluations: usize,
    /// Forward runs of the extra diagnostic EKI iterations; not needed by the emulator.
    pub diagnostic_evaluations: usize,
    /// Sigma windows plus training evaluations.
    pub forward_evaluations: usize,
    /// (n_iter + 1) * M + Sigma windows.
    pub forward_budget: usize,
    pub emulator_queries: usize,
    /// Emulator queries per forward evaluation.
    pub evaluations_avoided_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizationReport {
    pub realization: usize,
    pub eki: Option<EkiSummary>,
    pub emulator: Option<ValidationSummary>,
    pub posterior: Option<SampleSummary>,
    pub benchmark: Option<BenchmarkSummary>,
    pub prediction: Option<PredictSummary>,
    pub cost: Option<CostSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub software_version: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub model: String,
    pub parameters: Vec<String>,
    pub theta_true: Vec<f64>,
    pub completed_stages: Vec<String>,
    pub realizations: Vec<RealizationReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReportOutcome {
    /// No sampling stage has completed; nothing was written.
    NoCompletedStages,
    Written(Box<Report>),
}

/// Stage outputs whose checksums still match; stale stages are left out.
fn intact(dir: &Path, m: &RunManifest, key: &str) -> bool {
    let Some(rec) = m.stages.get(key) else {
        return false;
    };
    let ok = rec
        .outputs
        .iter()
        .all(|(rel, sum)| io::sha256_file(&dir.join(rel)).is_ok_and(|s| &s == sum));
    if !ok {
        warn!(
            stage = key,
            "artifacts changed since the stage completed; left out of the report"
        );
    }
    ok
}

fn stage_json<T: serde::de::DeserializeOwned>(
    dir: &Path,
    m: &RunManifest,
    stage: &str,
    k: usize,
) -> Result<Option<T>> {
    let key = stage_key(stage, Some(k));
    if !intact(dir, m, &key) {
        return Ok(None);
    }
    io::read_json(&dir.join(&key).join("summary.json")).map(Some)
}

/// Appends the rows of `src` to `dst`, prefixed by the realization index.
fn append_rows(dst: &mut Option<Table>, src: &Path, k: usize) -> Result<()> {
    let t = Table::read(src)?;
    let out = dst.get_or_insert_with(|| {
        Table::new(
            ["realization".to_string()]
                .into_iter()
                .chain(t.header.iter().cloned()),
        )
    });
    if out.header.len() != t.header.len() + 1 {
        return Err(CesError::artifact(
            src,
            "column layout differs between realizations",
        ));
    }
    for r in t.rows {
        out.push([k.to_string()].into_iter().chain(r).collect());
    }
    Ok(())
}

pub fn report(dir: &Path) -> Result<ReportOutcome> {
    if !dir.join(MANIFEST).exists() {
        return Ok(ReportOutcome::NoCompletedStages);
    }
    let m = read_manifest(dir)?;
    if !m.stages.keys().any(|k| k.ends_with(&format!("/{SAMPLE}"))) || !intact(dir, &m, TRUTH) {
        return Ok(ReportOutcome::NoCompletedStages);
    }
    let info: TruthInfo = io::read_json(&dir.join(TRUTH).join("info.json"))?;
    let out = dir.join("report");
    let mut realizations = Vec::new();
    let mut diag = None;
    let mut validation = None;
    let mut bands = None;
    let mut exceedance = None;
    let mut samples = Table::new(
        ["realization".to_string()]
            .into_iter()
            .chain(info.parameters.iter().cloned()),
    );
    for k in 1..=info.realizations {
        let eki: Option<EkiSummary> = stage_json(dir, &m, CALIBRATE, k)?;
        let emulator: Option<ValidationSummary> = stage_json(dir, &m, EMULATE, k)?;
        let posterior: Option<SampleSummary> = stage_json(dir, &m, SAMPLE, k)?;
        let benchmark: Option<BenchmarkSummary> = stage_json(dir, &m, BENCHMARK, k)?;
        let prediction: Option<PredictSummary> = stage_json(dir, &m, PREDICT, k)?;
        if eki.is_some() {
            append_rows(
                &mut diag,
                &dir.join(stage_key(CALIBRATE, Some(k)))
                    .join("diagnostics.csv"),
                k,
            )?;
        }
        if emulator.is_some() {
            append_rows(
                &mut validation,
                &dir.join(stage_key(EMULATE, Some(k))).join("validation.csv"),
                k,
            )?;
        }
        if prediction.is_some() {
            let pdir = dir.join(stage_key(PREDICT, Some(k)));
            append_rows(&mut bands, &pdir.join("bands.csv"), k)?;
            if pdir.join("exceedance.csv").exists() {
                append_rows(&mut exceedance, &pdir.join("exceedance.csv"), k)?;
            }
        }
        if posterior.is_some() {
            let path = dir.join(stage_key(SAMPLE, Some(k))).join("chain.csv");
            let t = Table::read(&path)?;
            let cols = info
                .parameters
                .iter()
                .map(|p| {
                    t.column(p)
                        .ok_or_else(|| CesError::artifact(&path, format!("missing column {p}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let stride = t.rows.len().div_ceil(MAX_EXPORTED_SAMPLES).max(1);
            for r in t.rows.iter().step_by(stride) {
                samples.push(
                    [k.to_string()]
                        .into_iter()
                        .chain(cols.iter().map(|&c| r[c].clone()))
                        .collect(),
                );
            }
        }
        let cost = match (&eki, &posterior) {
            (Some(e), Some(p)) => {
                let forward = info.n_windows + e.training_evaluations;
                Some(CostSummary {
                    sigma_windows: info.n_windows,
                    training_evaluations: e.training_evaluations,
                    diagnostic_evaluations: e.total_evaluations - e.training_evaluations,
                    forward_evaluations: forward,
                    forward_budget: (e.n_iter + 1) * e.ensemble_size + info.n_windows,
                    emulator_queries: p.emulator_queries,
                    evaluations_avoided_ratio: p.emulator_queries as f64 / forward as f64,
                })
            }
            _ => None,
        };
        realizations.push(RealizationReport {
            realization: k,
            eki,
            emulator,
            posterior,
            benchmark,
            prediction,
            cost,
        });
    }

    let report = Report {
        software_version: m.software_version.clone(),
        config_hash: m.config_hash.clone(),
        master_seed: m.master_seed,
        model: info.model.clone(),
        parameters: info.parameters.clone(),
        theta_true: info.theta_true.clone(),
        completed_stages: m.stages.keys().cloned().collect(),
        realizations,
    };
    io::write_json(&out.join("report.json"), &report)?;
    table1(&report).write(&out.join("table1.csv"))?;
    membership_table(&report).write(&out.join("membership.csv"))?;
    cost_table(&report).write(&out.join("cost.csv"))?;
    samples.write(&out.join("posterior_samples.csv"))?;
    for (name, t) in [
        ("eki_diagnostics.csv", diag),
        ("validation.csv", validation),
        ("bands.csv", bands),
        ("exceedance.csv", exceedance),
    ] {
        let path = out.join(name);
        match t {
            Some(t) => t.write(&path)?,
            None if path.exists() => {
                std::fs::remove_file(&path).map_err(|e| CesError::io(&path, e))?
            }
            None => {}
        }
    }
    std::fs::copy(
        dir.join(TRUTH).join("correlation.csv"),
        out.join("correlation.csv"),
    )
    .map_err(|e| CesError::io(out.join("correlation.csv"), e))?;
    Ok(ReportOutcome::Written(Box::new(report)))
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// Final-iteration EKI spread against posterior standard deviation per
/// parameter and realization, with the grid-emulator column when available.
fn table1(r: &Report) -> Table {
    let mut t = Table::new([
        "realization",
        "parameter",
        "truth",
        "eki_mean",
        "eki_spread",
        "eki_spread_z",
        "mcmc_mean",
        "mcmc_std",
        "mcmc_std_z",
        "bgp_mean",
        "bgp_std",
        "bgp_std_z",
    ]);
    for rr in &r.realizations {
        for (j, name) in r.parameters.iter().enumerate() {
            let e = rr.eki.as_ref().map(|e| &e.last);
            let p = rr.posterior.as_ref().map(|p| &p.posterior.params[j]);
            let b = rr.benchmark.as_ref().map(|b| &b.posterior.params[j]);
            t.push(vec![
                rr.realization.to_string(),
                name.clone(),
                fmt_f64(r.theta_true[j]),
                opt(e.map(|e| e.mean_phys[j])),
                opt(e.map(|e| e.spread_phys[j])),
                opt(e.map(|e| e.spread_comp[j])),
                opt(p.map(|p| p.mean_phys)),
                opt(p.map(|p| p.std_phys)),
                opt(p.map(|p| p.std_comp)),
                opt(b.map(|b| b.mean_phys)),
                opt(b.map(|b| b.std_phys)),
                opt(b.map(|b| b.std_comp)),
            ]);
        }
    }
    t
}

fn membership_table(r: &Report) -> Table {
    let mut t = Table::new(["realization", "emulator", "level", "truth_inside"]);
    for rr in &r.realizations {
        if let Some(p) = &rr.posterior {
            for &(l, inside) in &p.truth_membership {
                t.push(vec![
                    rr.realization.to_string(),
                    "eki_gp".into(),
                    fmt_f64(l),
                    u8::from(inside).to_string(),
                ]);
            }
        }
    }
    t
}

fn cost_table(r: &Report) -> Table {
    let mut t = Table::new([
        "realization",
        "sigma_windows",
        "training_evaluations",
        "diagnostic_evaluations",
        "forward_evaluations",
        "forward_budget",
        "emulator_queries",
        "evaluations_avoided_ratio",
    ]);
    for rr in &r.realizations {
        if let Some(c) = &rr.cost {
            t.push(vec![
                rr.realization.to_string(),
                c.sigma_windows.to_string(),
                c.training_evaluations.to_string(),
                c.diagnostic_evaluations.to_string(),
                c.forward_evaluations.to_string(),
                c.forward_budget.to_string(),
                c.emulator_queries.to_string(),
                fmt_f64(c.evaluations_avoided_ratio),
            ]);
        }
    }
    t
}
