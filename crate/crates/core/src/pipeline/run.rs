//! Run directory, manifest and lock files.
//!
//! ```text
//! <run>/manifest.json        config hash, seed ledger, stage records
//! <run>/config.toml          resolved configuration
//! <run>/truth/               generate-truth artifacts
//! <run>/r<k>/<stage>/        per-realization stage artifacts (k = 1..)
//! <run>/report/, <run>/plot/ derived exports
//! ```

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use super::config::PipelineConfig;
use crate::error::{CesError, Result};
use crate::io;

pub const MANIFEST: &str = "manifest.json";
const MANIFEST_LOCK: &str = "manifest.lock";
const LOCK_WAIT: Duration = Duration::from_secs(60);

/// Completion record of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub realization: Option<usize>,
    /// Seconds since the Unix epoch.
    pub completed_at: u64,
    /// Run-relative path to SHA-256 of every artifact read.
    pub inputs: BTreeMap<String, String>,
    /// Run-relative path to SHA-256 of every artifact written.
    pub outputs: BTreeMap<String, String>,
    pub forward_evaluations: usize,
    pub emulator_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub software_version: String,
    pub config_hash: String,
    pub master_seed: u64,
    /// Seed of every random stream used so far, keyed by stage path.
    pub seeds: BTreeMap<String, u64>,
    /// Keyed by `truth` or `r<k>/<stage>`.
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn stage_key(stage: &str, realization: Option<usize>) -> String {
    match realization {
        Some(k) => format!("r{k}/{stage}"),
        None => stage.to_string(),
    }
}

/// Exclusive lock held by creating a file; removed on drop.
#[derive(Debug)]
pub struct LockFile {
    path: PathBuf,
}

impl LockFile {
    pub fn acquire(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CesError::io(dir, e))?;
        }
        match OpenOptions::new().write(true).create_new(true).open(path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(LockFile {
                    path: path.to_path_buf(),
                })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CesError::Upstream(format!(
                    "{} is held by another process; delete it if no other ces process is running",
                    path.display()
                )))
            }
            Err(e) => Err(CesError::io(path, e)),
        }
    }

    /// Retries until `wait` has elapsed.
    fn acquire_waiting(path: &Path, wait: Duration) -> Result<Self> {
        let start = Instant::now();
        loop {
            match Self::acquire(path) {
                Err(CesError::Upstream(m)) if start.elapsed() < wait => {
                    let _ = m;
                    std::thread::sleep(Duration::from_millis(20));
                }
                r => return r,
            }
        }
    }
}

impl Drop for LockFile {
    fn drop(&mut self) {
        if let Err(e) = fs::remove_file(&self.path) {
            warn!(path = %self.path.display(), %e, "could not remove lock file");
        }
    }
}

/// An opened run directory bound to one configuration.
#[derive(Debug)]
pub struct Run {
    dir: PathBuf,
    config: PipelineConfig,
    hash: String,
}

impl Run {
    /// Opens `dir`, creating it and its manifest on first use. A manifest
    /// written under a different configuration is refused.
    pub fn open(dir: &Path, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        fs::create_dir_all(dir).map_err(|e| CesError::io(dir, e))?;
        let hash = config.hash();
        let run = Run {
            dir: dir.to_path_buf(),
            config,
            hash,
        };
        let _lock = LockFile::acquire_waiting(&run.dir.join(MANIFEST_LOCK), LOCK_WAIT)?;
        let path = run.dir.join(MANIFEST);
        if path.exists() {
            let m: RunManifest = io::read_json(&path)?;
            if m.config_hash != run.hash {
                return Err(CesError::Config(format!(
                    "run directory {} was created with configuration {} but this configuration hashes to {}; \
                     use a fresh run directory",
                    dir.display(),
                    m.config_hash,
                    run.hash
                )));
            }
        } else {
            let m = RunManifest {
                software_version: software_version(),
                config_hash: run.hash.clone(),
                master_seed: run.config.seed,
                seeds: BTreeMap::new(),
                stages: BTreeMap::new(),
            };
            io::write_atomic(
                &run.dir.join("config.toml"),
                run.config.to_toml()?.as_bytes(),
            )?;
            io::write_json(&path, &m)?;
        }
        Ok(run)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        read_manifest(&self.dir)
    }

    pub fn stage_dir(&self, stage: &str, realization: Option<usize>) -> PathBuf {
        self.dir.join(stage_key(stage, realization))
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn lock_realization(&self, realization: Option<usize>) -> Result<LockFile> {
        let name = match realization {
            Some(k) => format!("r{k}/.lock"),
            None => "truth/.lock".to_string(),
        };
        LockFile::acquire(&self.dir.join(name))
    }

    /// Checks that `stage` completed and its outputs are unchanged on disk.
    pub fn require(
        &self,
        stage: &str,
        realization: Option<usize>,
        hint: &str,
    ) -> Result<StageRecord> {
        let key = stage_key(stage, realization);
        let m = self.manifest()?;
        let rec = m.stages.get(&key).cloned().ok_or_else(|| {
            CesError::Upstream(format!(
                "stage {key} has not completed; run `ces {hint}` first"
            ))
        })?;
        for (rel, sum) in &rec.outputs {
            let p = self.dir.join(rel);
            if !p.exists() {
                return Err(CesError::Upstream(format!(
                    "artifact {rel} of stage {key} is missing; rerun `ces {hint}`"
                )));
            }
            if &io::sha256_file(&p)? != sum {
                return Err(CesError::Upstream(format!(
                    "artifact {rel} of stage {key} changed since the stage completed; rerun `ces {hint}`"
                )));
            }
        }
        Ok(rec)
    }

    /// Records a completed stage; `inputs` and `outputs` are run-relative
    /// paths whose checksums are taken now.
    #[allow(clippy::too_many_arguments)]
    pub fn complete(
        &self,
        stage: &str,
        realization: Option<usize>,
        inputs: &[String],
        outputs: &[String],
        forward_evaluations: usize,
        emulator_queries: usize,
        seeds: &[(String, u64)],
    ) -> Result<StageRecord> {
        let sums = |paths: &[String]| -> Result<BTreeMap<String, String>> {
            paths
                .iter()
                .map(|rel| Ok((rel.clone(), io::sha256_file(&self.dir.join(rel))?)))
                .collect()
        };
        let rec = StageRecord {
            stage: stage.to_string(),
            realization,
            completed_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            inputs: sums(inputs)?,
            outputs: sums(outputs)?,
            forward_evaluations,
            emulator_queries,
        };
        let _lock = LockFile::acquire_waiting(&self.dir.join(MANIFEST_LOCK), LOCK_WAIT)?;
        let mut m = self.manifest()?;
        if m.config_hash != self.hash {
            return Err(CesError::Config(
                "manifest configuration changed during the stage".into(),
            ));
        }
        for (k, s) in seeds {
            m.seeds.insert(k.clone(), *s);
        }
        let key = stage_key(stage, realization);
        info!(stage = %key, "stage complete");
        m.stages.insert(key, rec.clone());
        io::write_json(&self.dir.join(MANIFEST), &m)?;
        Ok(rec)
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    io::read_json(&dir.join(MANIFEST))
}

pub fn software_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}
