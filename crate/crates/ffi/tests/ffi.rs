use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use ces_core::pipeline::PipelineConfig;
use ces_ffi::*;

fn last_error() -> String {
    let p = ces_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

/// Linear model with short chains, fast enough for a unit test.
fn small_linear() -> PipelineConfig {
    let mut c = PipelineConfig::linear_default();
    c.realizations = 1;
    c.noise.n_windows = 100;
    c.eki.ensemble_size = 20;
    c.mcmc.n_burn = 1000;
    c.mcmc.n_samples = 4000;
    c.predict.n_posterior_samples = 20;
    c.benchmark.shape = vec![6, 6];
    c
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(ces_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn config_round_trips_through_toml() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(
            ces_config_default(CesPreset::Lorenz96, &mut cfg),
            CesStatus::Ok
        );
        let mut text = ptr::null_mut();
        assert_eq!(ces_config_to_toml(cfg, &mut text), CesStatus::Ok);
        let mut again = ptr::null_mut();
        assert_eq!(ces_config_from_toml(text, &mut again), CesStatus::Ok);
        let (mut h1, mut h2) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(ces_config_hash(cfg, &mut h1), CesStatus::Ok);
        assert_eq!(ces_config_hash(again, &mut h2), CesStatus::Ok);
        assert_eq!(CStr::from_ptr(h1), CStr::from_ptr(h2));
        assert_eq!(CStr::from_ptr(h1).to_bytes().len(), 64);
        for s in [text, h1, h2] {
            ces_string_free(s);
        }
        ces_config_free(cfg);
        ces_config_free(again);
    }
}

#[test]
fn config_errors_carry_status_and_message() {
    unsafe {
        let mut cfg = ptr::null_mut();
        let bad = cstr("seed = 1\nbogus = 2\n");
        assert_eq!(
            ces_config_from_toml(bad.as_ptr(), &mut cfg),
            CesStatus::Config
        );
        assert!(cfg.is_null(), "out-pointer untouched on failure");
        assert!(!last_error().is_empty());

        let missing = cstr("/nonexistent/ces.toml");
        assert_eq!(
            ces_config_load(missing.as_ptr(), &mut cfg),
            CesStatus::Config
        );
        assert!(last_error().contains("/nonexistent/ces.toml"));

        let mut written = false;
        assert_eq!(
            ces_config_from_toml(ptr::null(), &mut cfg),
            CesStatus::NullPointer
        );
        assert_eq!(
            ces_report(ptr::null(), &mut written),
            CesStatus::NullPointer
        );
        assert_eq!(
            ces_config_default(CesPreset::Linear, ptr::null_mut()),
            CesStatus::NullPointer
        );

        let invalid = [0xffu8, 0];
        assert_eq!(
            ces_config_from_toml(invalid.as_ptr().cast(), &mut cfg),
            CesStatus::Utf8
        );
    }
}

#[test]
fn free_functions_accept_null() {
    unsafe {
        ces_string_free(ptr::null_mut());
        ces_config_free(ptr::null_mut());
        ces_run_free(ptr::null_mut());
        ces_emulator_free(ptr::null_mut());
    }
}

#[test]
fn eki_update_scalar_example() {
    // G(theta) = theta, y = 2, gamma = 1/4: C = 1, gain 1/(1/4 + 1) = 4/5,
    // so theta' = theta + 0.8 (2 - theta) = 1.6 + 0.2 theta.
    let members = [0.0, 1.0, 2.0];
    let mut out = [0.0; 3];
    let status = unsafe {
        ces_eki_update(
            3,
            1,
            1,
            members.as_ptr(),
            members.as_ptr(),
            &2.0,
            &0.25,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(status, CesStatus::Ok);
    for (o, t) in out.iter().zip(members) {
        assert!((o - (1.6 + 0.2 * t)).abs() < 1e-12, "{out:?}");
    }
}

#[test]
fn eki_update_in_place_and_failures() {
    let mut members = [0.0, 1.0, 2.0];
    let outputs = members;
    let status = unsafe {
        ces_eki_update(
            3,
            1,
            1,
            members.as_ptr(),
            outputs.as_ptr(),
            &2.0,
            &0.25,
            members.as_mut_ptr(),
        )
    };
    assert_eq!(status, CesStatus::Ok);
    assert!((members[2] - 2.0).abs() < 1e-12);

    let mut out = [0.0; 3];
    // An ensemble of one member has no covariance.
    let status = unsafe {
        ces_eki_update(
            1,
            1,
            1,
            members.as_ptr(),
            outputs.as_ptr(),
            &2.0,
            &0.25,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(status, CesStatus::InvalidInput);
    // gamma + C_GG not positive definite.
    let flat = [1.0, 1.0, 1.0];
    let status = unsafe {
        ces_eki_update(
            3,
            1,
            1,
            members.as_ptr(),
            flat.as_ptr(),
            &2.0,
            &-1.0,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(status, CesStatus::Numerical);
    assert!(last_error().contains("positive definite"));
}

#[test]
fn pipeline_through_the_c_api() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = cstr(dir.path().join("run").to_str().unwrap());
    let toml = cstr(&small_linear().to_toml().unwrap());
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(ces_config_from_toml(toml.as_ptr(), &mut cfg), CesStatus::Ok);
        let mut run = ptr::null_mut();
        assert_eq!(ces_run_open(run_dir.as_ptr(), cfg, &mut run), CesStatus::Ok);

        let mut written = true;
        assert_eq!(ces_report(run_dir.as_ptr(), &mut written), CesStatus::Ok);
        assert!(!written);

        assert_eq!(
            ces_run_stage(run, CesStage::Emulate, 1),
            CesStatus::Upstream
        );
        assert!(last_error().contains("generate-truth"));
        assert_eq!(
            ces_run_stage(run, CesStage::GenerateTruth, 0),
            CesStatus::Ok
        );
        assert_eq!(
            ces_run_stage(run, CesStage::Emulate, 1),
            CesStatus::Upstream
        );
        assert!(last_error().contains("calibrate"));
        assert_eq!(
            ces_run_stage(run, CesStage::Calibrate, 2),
            CesStatus::Config
        );
        for stage in [
            CesStage::Calibrate,
            CesStage::Emulate,
            CesStage::Sample,
            CesStage::Predict,
            CesStage::Benchmark,
        ] {
            assert_eq!(
                ces_run_stage(run, stage, 1),
                CesStatus::Ok,
                "{stage:?}: {}",
                last_error()
            );
        }
        assert_eq!(ces_report(run_dir.as_ptr(), &mut written), CesStatus::Ok);
        assert!(written);
        assert!(dir.path().join("run/report/report.json").exists());

        let mut emu = ptr::null_mut();
        assert_eq!(ces_emulator_load(run, 1, &mut emu), CesStatus::Ok);
        let (mut p, mut d) = (0, 0);
        assert_eq!(ces_emulator_dims(emu, &mut p, &mut d), CesStatus::Ok);
        assert_eq!((p, d), (2, 3));
        let theta = [1.0, -0.5];
        let mut mean = [0.0; 3];
        let mut cov = [0.0; 9];
        assert_eq!(
            ces_emulator_predict(
                emu,
                theta.as_ptr(),
                2,
                mean.as_mut_ptr(),
                cov.as_mut_ptr(),
                3
            ),
            CesStatus::Ok
        );
        // A = [[1, .5], [-.3, 1], [.8, .8]] at (1, -.5) gives (.75, -.8, .4).
        for (m, e) in mean.iter().zip([0.75, -0.8, 0.4]) {
            assert!((m - e).abs() < 0.1, "{mean:?}");
        }
        for i in 0..3 {
            assert!(cov[i * 3 + i] > 0.0);
            for j in 0..3 {
                assert_eq!(cov[i * 3 + j], cov[j * 3 + i]);
            }
        }
        assert_eq!(
            ces_emulator_predict(
                emu,
                theta.as_ptr(),
                3,
                mean.as_mut_ptr(),
                cov.as_mut_ptr(),
                3
            ),
            CesStatus::Dimension
        );
        ces_emulator_free(emu);
        ces_run_free(run);

        // Same directory, different configuration.
        let mut other = small_linear();
        other.seed += 1;
        let other = cstr(&other.to_toml().unwrap());
        let mut cfg2 = ptr::null_mut();
        assert_eq!(
            ces_config_from_toml(other.as_ptr(), &mut cfg2),
            CesStatus::Ok
        );
        let mut run2 = ptr::null_mut();
        assert_eq!(
            ces_run_open(run_dir.as_ptr(), cfg2, &mut run2),
            CesStatus::Config
        );
        assert!(run2.is_null());
        ces_config_free(cfg2);
        ces_config_free(cfg);
    }
}

/// The generated header must compile as C and as C++.
#[test]
fn header_compiles() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"ces.h\"\n\
         int main(void) {\n\
           CesConfig *cfg = NULL;\n\
           CesStatus s = ces_config_default(CES_PRESET_LINEAR, &cfg);\n\
           ces_config_free(cfg);\n\
           return s == CES_STATUS_OK ? 0 : (int)s;\n\
         }\n",
    )
    .unwrap();
    for (compiler, extra) in [
        ("cc", ["-std=c99", "-xc"]),
        ("c++", ["-std=c++11", "-xc++"]),
    ] {
        let out = match Command::new(compiler)
            .args(extra)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
            .arg(&include)
            .arg(&src)
            .output()
        {
            Ok(o) => o,
            Err(_) => {
                eprintln!("{compiler} not available; header check skipped");
                continue;
            }
        };
        assert!(
            out.status.success(),
            "{compiler}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}
