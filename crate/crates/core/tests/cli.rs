use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ces_core::pipeline::PipelineConfig;

fn ces(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ces"))
        .args(args)
        .current_dir(dir)
        .env_remove("CES_RUN_DIR")
        .env_remove("CES_THREADS")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("terminated by signal")
}

fn write_config(dir: &Path, name: &str, cfg: &PipelineConfig) {
    fs::write(dir.join(name), cfg.to_toml().unwrap()).unwrap();
}

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
fn default_config_is_loadable() {
    let dir = tempfile::tempdir().unwrap();
    for (model, expected) in [
        ("lorenz96", PipelineConfig::default()),
        ("linear", PipelineConfig::linear_default()),
    ] {
        let o = ces(&["default-config", "--model", model], dir.path());
        assert_eq!(code(&o), 0);
        let cfg = PipelineConfig::from_toml_str(std::str::from_utf8(&o.stdout).unwrap()).unwrap();
        assert_eq!(cfg, expected);
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, "ces.toml", &small_linear());
    fs::write(d.join("broken.toml"), "seed = \"x\"\n").unwrap();

    // Usage errors come from the argument parser.
    assert_eq!(code(&ces(&["calibrate"], d)), 2);

    let o = ces(
        &["generate-truth", "--config", "broken.toml", "--run", "run"],
        d,
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("broken.toml"));

    let o = ces(
        &[
            "emulate",
            "--config",
            "ces.toml",
            "--run",
            "run",
            "--realization",
            "1",
        ],
        d,
    );
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("generate-truth"));

    let o = ces(&["report", "--run", "empty"], d);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("no completed stages"));

    let mut other = small_linear();
    other.seed += 7;
    write_config(d, "other.toml", &other);
    assert_eq!(
        code(&ces(
            &["generate-truth", "--config", "other.toml", "--run", "run"],
            d
        )),
        2
    );
    assert_eq!(
        code(&ces(
            &["report", "--config", "other.toml", "--run", "run"],
            d
        )),
        2
    );
}

#[test]
fn all_then_report_again() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, "ces.toml", &small_linear());
    let o = ces(&["-q", "all", "--config", "ces.toml", "--run", "run"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(
        o.stderr.is_empty(),
        "quiet run logged: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    let report = d.join("run/report/report.json");
    let first = fs::read(&report).unwrap();
    let o = ces(&["report", "--run", "run", "--config", "ces.toml"], d);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("realization 1:"));
    assert_eq!(fs::read(&report).unwrap(), first);

    // A single stage rerun through the environment variable.
    let o = Command::new(env!("CARGO_BIN_EXE_ces"))
        .args([
            "--threads",
            "1",
            "sample",
            "--config",
            "ces.toml",
            "--realization",
            "1",
        ])
        .current_dir(d)
        .env("CES_RUN_DIR", "run")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    ces(&["report", "--run", "run"], d);
    assert_eq!(fs::read(&report).unwrap(), first);
}
