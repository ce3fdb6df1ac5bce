//! The CES workflow over a persistent run directory.
//!
//! Stages run in the order generate-truth, calibrate, emulate, sample,
//! predict, with benchmark and report alongside. Every stage reads only
//! persisted upstream artifacts and records input and output checksums in
//! the manifest, so a stage refuses to run on missing or modified inputs and
//! any stage can be rerun alone with bit-identical results.

mod config;
mod report;
mod run;
mod stages;

pub use config::{
    BenchmarkConfig, EkiBlock, GpBlock, LinearConfig, McmcBlock, ModelConfig, ModelKind,
    NoiseConfig, PipelineConfig,
};
pub use report::{report, CostSummary, RealizationReport, Report, ReportOutcome};
pub use run::{
    read_manifest, software_version, stage_key, LockFile, Run, RunManifest, StageRecord, MANIFEST,
};
pub use stages::{
    benchmark, calibrate, emulate, generate_truth, load_eki_summary, load_sample_summary,
    load_truth, output_names, predict, read_chain, read_pairs, sample, BenchmarkSummary,
    EkiSummary, PredictSummary, SampleSummary, ScenarioCheck, TruthArtifacts, TruthInfo,
    ValidationSummary, BENCHMARK, CALIBRATE, EMULATE, PREDICT, SAMPLE, TRUTH,
};
