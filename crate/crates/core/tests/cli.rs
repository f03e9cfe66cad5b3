//! The `ensemble` binary: commands, tables and exit codes.

mod support;

use std::path::Path;
use std::process::{Command, Output};

use ensemble_core::cli::{ENV_OUTPUT_DIR, EXIT_CONFIG, EXIT_IO, EXIT_OK};

fn ensemble(args: &[&str]) -> Output {
    Command::new(support::exe()).args(args).env_remove(ENV_OUTPUT_DIR).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn validate_tables() {
    let o = ensemble(&["validate", "--dist", "gaussian", "--alpha", "0.95", "--n", "1000", "--repeats", "20"]);
    assert_eq!(code(&o), EXIT_OK);
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1 + 5);
    assert!(text.lines().any(|l| l.starts_with("gaussian,rm-linear,")));

    let o = ensemble(&["validate", "--repeats", "1", "--n", "100"]);
    assert_eq!(code(&o), EXIT_OK);
    assert!(stdout(&o).starts_with("distribution,estimator,estimate,exact,error"));

    let o = ensemble(&["validate", "--all-dists", "--repeats", "10", "--n", "200", "--with-gamma-06"]);
    assert_eq!(code(&o), EXIT_OK);
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.contains(",rm-")).count(), 4 * 5);
    assert!(text.contains("linear profile uniquely robust:"));

    assert_eq!(code(&ensemble(&["validate", "--dist", "cauchy"])), EXIT_CONFIG);
    assert_eq!(code(&ensemble(&["validate", "--alpha", "1.5", "--repeats", "2"])), EXIT_CONFIG);
}

#[test]
fn config_errors_have_their_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.toml");
    std::fs::write(&cfg, "study_id = \"x\"\nn_sims = 3\n").unwrap();
    let o = ensemble(&["run-study", "--config", cfg.to_str().unwrap(), "--sims", "0"]);
    assert_eq!(code(&o), EXIT_CONFIG);
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_sims"));

    std::fs::write(&cfg, "study_id = \"x\"\nn_sims = 3\nbogus = 1\n").unwrap();
    assert_eq!(code(&ensemble(&["run-study", "--config", cfg.to_str().unwrap()])), EXIT_CONFIG);
    assert_eq!(code(&ensemble(&["run-study", "--config", "/nonexistent.toml"])), EXIT_IO);
    assert_eq!(code(&ensemble(&["no-such-command"])), EXIT_CONFIG);
}

fn small_study(dir: &Path, store_raw: bool) -> std::path::PathBuf {
    let out = dir.join("out");
    let mut cfg = support::fast_config("cli", 6, &dir.join("ignored"));
    cfg.n_timesteps = 30;
    cfg.statistics.quantiles = None;
    cfg.store_raw = store_raw;
    let path = dir.join("study.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    // output directory from the environment overrides the config
    let o = Command::new(support::exe())
        .args(["run-study", "--config", path.to_str().unwrap()])
        .env(ENV_OUTPUT_DIR, &out)
        .output()
        .unwrap();
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("complete"));
    out
}

#[test]
fn study_exports_and_queries() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_study(dir.path(), true);
    let export = out.join("server/export");
    let e = export.to_str().unwrap();

    // every one of the 99 percentiles at every timestep
    let o = ensemble(&["probe", "--export", e, "--cell", "1000"]);
    assert_eq!(code(&o), EXIT_OK);
    let rows: Vec<(u32, f64, f64)> = stdout(&o)
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 30 * 99);
    // dye needs time to reach the middle of the channel
    assert!(rows.iter().filter(|r| r.0 == 0).all(|r| r.2 == 0.0));

    let o = ensemble(&["export-range", "--export", e, "--lower", "0.5", "--upper", "0.5", "--timestep", "20"]);
    assert_eq!(code(&o), EXIT_OK);
    assert!(stdout(&o).lines().skip(1).all(|l| l.ends_with(",0")));
    let o = ensemble(&["export-range", "--export", e, "--lower", "0.25", "--upper", "0.75", "--timestep", "20"]);
    let values: Vec<f64> = stdout(&o).lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(values.len(), 2048);
    assert!(values.iter().all(|&v| v >= 0.0) && values.iter().any(|&v| v > 0.0));

    let csv = dir.path().join("all.csv");
    let o = ensemble(&["export-csv", "--export", e, "--out", csv.to_str().unwrap()]);
    assert_eq!(code(&o), EXIT_OK);
    let n_stats = 7 + 99;
    let lines = std::fs::read_to_string(&csv).unwrap().lines().count();
    assert_eq!(lines, 1 + 2048 * 30 * n_stats);

    let o = ensemble(&["oracle-check", "--study", out.to_str().unwrap(), "--alphas", "0.25,0.5,0.75"]);
    assert!(stdout(&o).contains("pooled,"), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("counts all equal 6: true"));

    assert_eq!(code(&ensemble(&["probe", "--export", e, "--cell", "2048"])), EXIT_CONFIG);
    assert_eq!(code(&ensemble(&["probe", "--export", "/nonexistent", "--cell", "0"])), EXIT_IO);
    assert_eq!(
        code(&ensemble(&["export-range", "--export", e, "--lower", "0.333", "--upper", "0.5", "--timestep", "1"])),
        EXIT_IO
    );
}
