//! C ABI over `ces-core`.
//!
//! Conventions:
//! - Every fallible function returns a [`CesStatus`]; results come back
//!   through out-pointers, which are written only on success.
//! - Status codes 0 to 4 coincide with the exit codes of the `ces` binary.
//! - After a failure, [`ces_last_error`] returns a message for the calling
//!   thread.
//! - Handles are opaque and released with their `*_free` function.
//!   Strings returned by the library are released with [`ces_string_free`].
//! - Matrices are dense and row-major.
//! - Panics never cross the boundary; they surface as `CES_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ces_core::eki::{eki_update, Ensemble, EvaluatedEnsemble};
use ces_core::error::CesError;
use ces_core::gp::Emulator;
use ces_core::pipeline::{self, PipelineConfig, ReportOutcome, Run};
use nalgebra::{DMatrix, DVector};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CesStatus {
    Ok = 0,
    /// Failure without a more specific code.
    Other = 1,
    Config = 2,
    /// An upstream stage is missing or its artifacts changed.
    Upstream = 3,
    /// Numerical failure: factorization, GP training, stalled sampler or
    /// failed model evaluation.
    Numerical = 4,
    Domain = 5,
    Dimension = 6,
    InvalidInput = 7,
    Unsupported = 8,
    Io = 9,
    Artifact = 10,
    NullPointer = 11,
    Utf8 = 12,
    Panic = 13,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CesStage {
    GenerateTruth = 0,
    Calibrate = 1,
    Emulate = 2,
    Sample = 3,
    Predict = 4,
    Benchmark = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CesPreset {
    Lorenz96 = 0,
    Linear = 1,
}

/// Opaque pipeline configuration.
pub struct CesConfig(PipelineConfig);

/// Opaque run directory bound to a configuration.
pub struct CesRun(Run);

/// Opaque trained emulator.
pub struct CesEmulator(Emulator);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(CesStatus, String);

impl From<CesError> for Failure {
    fn from(e: CesError) -> Self {
        let status = match &e {
            CesError::Config(_) => CesStatus::Config,
            CesError::Upstream(_) => CesStatus::Upstream,
            CesError::Numerical(_)
            | CesError::Training { .. }
            | CesError::SamplerStalled(_)
            | CesError::EvaluationFailed { .. } => CesStatus::Numerical,
            CesError::Domain(_) => CesStatus::Domain,
            CesError::Dimension { .. } => CesStatus::Dimension,
            CesError::InvalidInput(_) => CesStatus::InvalidInput,
            CesError::Unsupported(_) => CesStatus::Unsupported,
            CesError::Io { .. } => CesStatus::Io,
            CesError::Artifact { .. } => CesStatus::Artifact,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CesStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CesStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            CesStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CesStatus::NullPointer, format!("{what} is NULL"))
}

/// # Safety
/// `p` is NULL or a NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CesStatus::Utf8, format!("{what} is not valid UTF-8")))
}

/// # Safety
/// `p` is NULL or points to `len` readable doubles.
unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn out_string(s: String, out: *mut *mut c_char) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure(CesStatus::Other, "string contains NUL".into()))?;
    // SAFETY: checked non-null by callers.
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ces_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn ces_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` is NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ces_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Default configuration for a preset model.
///
/// # Safety
/// `out` is a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn ces_config_default(
    preset: CesPreset,
    out: *mut *mut CesConfig,
) -> CesStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = match preset {
            CesPreset::Lorenz96 => PipelineConfig::default(),
            CesPreset::Linear => PipelineConfig::linear_default(),
        };
        *out = Box::into_raw(Box::new(CesConfig(cfg)));
        Ok(())
    })
}

/// Parses and validates a TOML configuration.
///
/// # Safety
/// `toml` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ces_config_from_toml(
    toml: *const c_char,
    out: *mut *mut CesConfig,
) -> CesStatus {
    guard(|| {
        let text = str_arg(toml, "toml")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = PipelineConfig::from_toml_str(text)?;
        *out = Box::into_raw(Box::new(CesConfig(cfg)));
        Ok(())
    })
}

/// Reads and validates a TOML configuration file.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ces_config_load(
    path: *const c_char,
    out: *mut *mut CesConfig,
) -> CesStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = PipelineConfig::load(&path)?;
        *out = Box::into_raw(Box::new(CesConfig(cfg)));
        Ok(())
    })
}

/// TOML text of a configuration; free with [`ces_string_free`].
///
/// # Safety
/// `config` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ces_config_to_toml(
    config: *const CesConfig,
    out: *mut *mut c_char,
) -> CesStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        out_string(cfg.0.to_toml()?, out)
    })
}

/// Hex SHA-256 identifying the configuration; free with [`ces_string_free`].
///
/// # Safety
/// `config` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ces_config_hash(
    config: *const CesConfig,
    out: *mut *mut c_char,
) -> CesStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        out_string(cfg.0.hash(), out)
    })
}

/// # Safety
/// `config` is NULL or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ces_config_free(config: *mut CesConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Opens (creating if needed) a run directory for `config`. A directory
/// created under a different configuration is refused with `CES_STATUS_CONFIG`.
///
/// # Safety
/// `dir` is a NUL-terminated string; `config` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ces_run_open(
    dir: *const c_char,
    config: *const CesConfig,
    out: *mut *mut CesRun,
) -> CesStatus {
    guard(|| {
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let run = Run::open(&dir, cfg.0.clone())?;
        *out = Box::into_raw(Box::new(CesRun(run)));
        Ok(())
    })
}

/// Runs one stage. `realization` is 1-based and ignored by
/// `CES_STAGE_GENERATE_TRUTH`.
///
/// # Safety
/// `run` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn ces_run_stage(
    run: *const CesRun,
    stage: CesStage,
    realization: usize,
) -> CesStatus {
    guard(|| {
        let run = &run.as_ref().ok_or_else(|| null("run"))?.0;
        match stage {
            CesStage::GenerateTruth => pipeline::generate_truth(run),
            CesStage::Calibrate => pipeline::calibrate(run, realization),
            CesStage::Emulate => pipeline::emulate(run, realization),
            CesStage::Sample => pipeline::sample(run, realization),
            CesStage::Predict => pipeline::predict(run, realization),
            CesStage::Benchmark => pipeline::benchmark(run, realization),
        }?;
        Ok(())
    })
}

/// # Safety
/// `run` is NULL or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ces_run_free(run: *mut CesRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Writes `<dir>/report/`. `*written` is false when no sampling stage has
/// completed, in which case nothing is written.
///
/// # Safety
/// `dir` is a NUL-terminated string; `written` is writable.
#[no_mangle]
pub unsafe extern "C" fn ces_report(dir: *const c_char, written: *mut bool) -> CesStatus {
    guard(|| {
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        if written.is_null() {
            return Err(null("written"));
        }
        *written = matches!(pipeline::report(&dir)?, ReportOutcome::Written(_));
        Ok(())
    })
}

/// Loads the emulator trained for `realization` (1-based) of an open run.
///
/// # Safety
/// `run` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ces_emulator_load(
    run: *const CesRun,
    realization: usize,
    out: *mut *mut CesEmulator,
) -> CesStatus {
    guard(|| {
        let run = &run.as_ref().ok_or_else(|| null("run"))?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        run.require(
            pipeline::EMULATE,
            Some(realization),
            &format!("emulate --realization {realization}"),
        )?;
        let truth = pipeline::load_truth(run)?;
        let path = run
            .stage_dir(pipeline::EMULATE, Some(realization))
            .join("emulator.json");
        let emu = Emulator::load(&path, &truth.noise)?;
        *out = Box::into_raw(Box::new(CesEmulator(emu)));
        Ok(())
    })
}

/// Number of parameters and of data outputs.
///
/// # Safety
/// `emulator` is a live handle; both out-pointers are writable.
#[no_mangle]
pub unsafe extern "C" fn ces_emulator_dims(
    emulator: *const CesEmulator,
    n_params: *mut usize,
    n_outputs: *mut usize,
) -> CesStatus {
    use ces_core::gp::Surrogate;
    guard(|| {
        let emu = &emulator.as_ref().ok_or_else(|| null("emulator"))?.0;
        if n_params.is_null() || n_outputs.is_null() {
            return Err(null("out"));
        }
        *n_params = emu.input_dim();
        *n_outputs = emu.output_dim();
        Ok(())
    })
}

/// Predictive mean (`n_outputs`) and covariance (`n_outputs` x `n_outputs`,
/// row-major) in data coordinates at computational-space parameters `theta`.
///
/// # Safety
/// `emulator` is a live handle; `theta` holds `n_params` doubles; `mean` and
/// `cov` have room for `n_outputs` and `n_outputs * n_outputs` doubles.
#[no_mangle]
pub unsafe extern "C" fn ces_emulator_predict(
    emulator: *const CesEmulator,
    theta: *const f64,
    n_params: usize,
    mean: *mut f64,
    cov: *mut f64,
    n_outputs: usize,
) -> CesStatus {
    use ces_core::gp::Surrogate;
    guard(|| {
        let emu = &emulator.as_ref().ok_or_else(|| null("emulator"))?.0;
        if n_params != emu.input_dim() || n_outputs != emu.output_dim() {
            return Err(Failure(
                CesStatus::Dimension,
                format!(
                    "emulator maps {} parameters to {} outputs, called with {n_params} and {n_outputs}",
                    emu.input_dim(),
                    emu.output_dim()
                ),
            ));
        }
        let theta = DVector::from_column_slice(slice_arg(theta, n_params, "theta")?);
        if mean.is_null() || cov.is_null() {
            return Err(null("output buffer"));
        }
        let (m, c) = emu.predict_physical(&theta)?;
        std::slice::from_raw_parts_mut(mean, n_outputs).copy_from_slice(m.as_slice());
        let out = std::slice::from_raw_parts_mut(cov, n_outputs * n_outputs);
        for i in 0..n_outputs {
            for j in 0..n_outputs {
                out[i * n_outputs + j] = c[(i, j)];
            }
        }
        Ok(())
    })
}

/// # Safety
/// `emulator` is NULL or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ces_emulator_free(emulator: *mut CesEmulator) {
    if !emulator.is_null() {
        drop(Box::from_raw(emulator));
    }
}

/// One ensemble Kalman inversion update,
/// `theta_m += C_thetaG (gamma + C_GG)^-1 (y - G_m)`, with ensemble
/// covariances normalized by `1 / (m - 1)`.
///
/// # Safety
/// `members` and `updated` hold `m * p` doubles, `outputs` holds `m * d`,
/// `y` holds `d` and `gamma` holds `d * d`, all row-major. `updated` may
/// alias `members`.
#[no_mangle]
pub unsafe extern "C" fn ces_eki_update(
    m: usize,
    p: usize,
    d: usize,
    members: *const f64,
    outputs: *const f64,
    y: *const f64,
    gamma: *const f64,
    updated: *mut f64,
) -> CesStatus {
    guard(|| {
        let theta = DMatrix::from_row_slice(m, p, slice_arg(members, m * p, "members")?);
        let g = DMatrix::from_row_slice(m, d, slice_arg(outputs, m * d, "outputs")?);
        let y = DVector::from_column_slice(slice_arg(y, d, "y")?);
        let gamma = DMatrix::from_row_slice(d, d, slice_arg(gamma, d * d, "gamma")?);
        if updated.is_null() {
            return Err(null("updated"));
        }
        let ensemble = Ensemble {
            members: (0..m).map(|i| theta.row(i).transpose()).collect(),
            iteration: 0,
            seeds: vec![0; m],
        };
        let outs = (0..m).map(|i| g.row(i).transpose()).collect();
        let next = eki_update(&EvaluatedEnsemble::new(ensemble, outs)?, &y, &gamma)?;
        let out = std::slice::from_raw_parts_mut(updated, m * p);
        for (i, t) in next.members.iter().enumerate() {
            out[i * p..(i + 1) * p].copy_from_slice(t.as_slice());
        }
        Ok(())
    })
}
