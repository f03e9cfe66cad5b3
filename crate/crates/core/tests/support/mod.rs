//! Scenario builders shared by the integration tests and the acceptance
//! harness. Each test target uses a different subset.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use ensemble_core::cli::{oracle_check_study, OracleCheck};
use ensemble_core::export::read_statistic;
use ensemble_core::field_stats::Statistic;
use ensemble_core::launcher::{launch_study, CapChange, LauncherState, StudyConfig, StudyPaths, StudyReport};
use ensemble_core::protocol::{Body, DataChunk, Message};
use ensemble_core::server::{
    completed_in_checkpoint, read_message_log, replay_log_canonical, ApplyOutcome, RankState, ServerExit,
};
use ensemble_core::stats::StatisticsConfig;
use ensemble_core::server::StudyLayout;

pub const ALPHAS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

pub fn exe() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_ensemble"))
}

/// Short timeouts and the five acceptance percentiles.
pub fn fast_config(id: &str, n_sims: u64, out: &Path) -> StudyConfig {
    let mut c = StudyConfig::new(id, n_sims);
    c.seed = 7;
    c.output_dir = out.to_owned();
    c.statistics.quantiles = Some(ALPHAS.to_vec());
    c.server.checkpoint_period_secs = 0.5;
    c.server.idle_timeout_secs = 20.0;
    c.server.heartbeat_period_secs = 0.2;
    c.launcher.max_concurrent = 4;
    c.launcher.heartbeat_timeout_secs = 5.0;
    c.launcher.heartbeat_suspect_secs = 2.0;
    c.launcher.poll_interval_ms = 10;
    c.launcher.executable = Some(exe());
    c
}

pub fn run_study(cfg: &StudyConfig) -> StudyReport {
    launch_study(cfg.clone(), &exe()).expect("launcher I/O")
}

pub fn counts(root: &Path) -> Vec<f64> {
    read_statistic(&StudyPaths::new(root).export_dir(), "dye", Statistic::Count)
        .expect("count export")
        .values
}

pub fn counts_exact(root: &Path, n: u64) -> bool {
    let c = counts(root);
    !c.is_empty() && c.iter().all(|&v| v == n as f64)
}

pub fn exit_marker(root: &Path) -> Option<ServerExit> {
    let p = StudyPaths::new(root).server_dir().join("server_exit.json");
    serde_json::from_slice(&std::fs::read(p).ok()?).ok()
}

pub struct FaultOutcome {
    pub report: StudyReport,
    pub counts_exact: bool,
    pub exit: Option<ServerExit>,
}

/// `kills` random simulations are killed while the study runs.
pub fn kill_sims_scenario(n: u64, kills: u32, root: &Path) -> FaultOutcome {
    let mut cfg = fast_config("kill-sims", n, root);
    cfg.launcher.step_delay_ms = 10;
    cfg.faults.kill_sims = kills;
    cfg.faults.kill_sims_after_secs = 0.5;
    let report = run_study(&cfg);
    FaultOutcome { counts_exact: report.success && counts_exact(root, n), exit: exit_marker(root), report }
}

/// The server is killed once `after_done` simulations have finished.
pub fn kill_server_scenario(n: u64, after_done: u64, root: &Path) -> FaultOutcome {
    let mut cfg = fast_config("kill-server", n, root);
    cfg.launcher.step_delay_ms = 10;
    cfg.server.checkpoint_period_secs = 0.3;
    cfg.faults.kill_server_after_done = Some(after_done);
    let report = run_study(&cfg);
    FaultOutcome { counts_exact: report.success && counts_exact(root, n), exit: exit_marker(root), report }
}

pub struct LauncherKillOutcome {
    pub running_at_kill: Vec<u64>,
    pub done_at_kill: usize,
    /// Simulations complete in the server's final checkpoint.
    pub completed: Vec<u64>,
    pub sims_finished: bool,
    pub exit: Option<ServerExit>,
    pub server_stopped_after: Duration,
}

/// True while `pid` exists and is not a zombie.
pub fn alive(pid: u32) -> bool {
    match std::fs::read_to_string(format!("/proc/{pid}/stat")) {
        Err(_) => false,
        Ok(s) => s.rsplit(')').next().and_then(|rest| rest.split_whitespace().next()) != Some("Z"),
    }
}

fn wait_until(limit: Duration, mut f: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + limit;
    while Instant::now() < deadline {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    f()
}

/// Runs the launcher as its own process and kills it mid-study.
pub fn kill_launcher_scenario(n: u64, idle_secs: f64, root: &Path) -> LauncherKillOutcome {
    let out = root.join("out");
    let mut cfg = fast_config("kill-launcher", n, &out);
    cfg.launcher.step_delay_ms = 15;
    cfg.server.idle_timeout_secs = idle_secs;
    let input = root.join("input.toml");
    std::fs::create_dir_all(root).unwrap();
    std::fs::write(&input, cfg.to_toml()).unwrap();
    let mut launcher = Command::new(exe())
        .args(["run-study", "--config"])
        .arg(&input)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let paths = StudyPaths::new(&out);
    let read_state = || -> Option<LauncherState> { serde_json::from_slice(&std::fs::read(paths.state()).ok()?).ok() };
    let started = wait_until(Duration::from_secs(120), || {
        read_state().is_some_and(|s| s.done >= 4 && !s.running.is_empty())
    });
    assert!(started, "study never reached four finished simulations");
    launcher.kill().unwrap();
    launcher.wait().unwrap();
    let state = read_state().unwrap();
    let pids: Vec<u32> = state.running.iter().filter_map(|(_, p)| *p).collect();
    let sims_finished = wait_until(Duration::from_secs(60), || pids.iter().all(|&p| !alive(p)));
    let killed_at = Instant::now();
    let server_pid = state.server_pid.unwrap();
    let stopped = wait_until(Duration::from_secs_f64(idle_secs + 60.0), || !alive(server_pid));
    assert!(stopped, "server never stopped");
    let server_stopped_after = killed_at.elapsed();
    let completed = completed_in_checkpoint(&cfg.server_config(paths.server_dir()).checkpoint_dir(), &cfg.layout())
        .unwrap_or_default();
    LauncherKillOutcome {
        running_at_kill: state.running.iter().map(|(s, _)| *s).collect(),
        done_at_kill: state.done,
        completed,
        sims_finished,
        exit: exit_marker(&out),
        server_stopped_after,
    }
}

pub struct ElasticityOutcome {
    pub full: StudyReport,
    pub halved: StudyReport,
    pub cap_respected: bool,
    /// Canonical replays of the two message logs agree bit for bit on every
    /// order-independent statistic.
    pub replay_identical: bool,
    /// Largest relative difference between the two live exports of count,
    /// mean, min, max and exceedance. Higher moments are left out: at
    /// near-constant cells their rounding depends on arrival order.
    pub live_max_rel: f64,
    pub oracle_full: OracleCheck,
    pub oracle_halved: OracleCheck,
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b || (a.is_nan() && b.is_nan()) {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn order_independent(layout: &StudyLayout) -> Vec<Statistic> {
    RankState::new(layout, 0)
        .unwrap()
        .field("dye")
        .unwrap()
        .statistics()
        .into_iter()
        .filter(Statistic::is_order_independent)
        .collect()
}

/// The same study twice, once with a constant cap and once with the cap
/// halved at `halve_after_secs`.
pub fn elasticity_scenario(n: u64, halve_after_secs: f64, root: &Path) -> ElasticityOutcome {
    let config = |name: &str, halve: bool| {
        let mut c = fast_config("elastic", n, &root.join(name));
        c.launcher.step_delay_ms = 10;
        c.server.record_log = true;
        c.store_raw = true;
        c.statistics.thresholds = vec![0.05, 0.5];
        if halve {
            c.launcher.cap_schedule = vec![CapChange { after_secs: halve_after_secs, cap: 2 }];
        }
        c
    };
    let (cfg_full, cfg_halved) = (config("full", false), config("halved", true));
    let full = run_study(&cfg_full);
    let halved = run_study(&cfg_halved);
    let cap_respected = [&full, &halved].iter().all(|r| r.timeline.iter().all(|p| p.running <= p.cap));

    let layout = cfg_full.layout();
    let stats = order_independent(&layout);
    let mut replay_identical = full.success && halved.success;
    for rank in 0..layout.n_ranks {
        let replay = |cfg: &StudyConfig| {
            let sc = cfg.server_config(StudyPaths::new(&cfg.output_dir).server_dir());
            let log = read_message_log(&sc.log_path(rank)).unwrap();
            replay_log_canonical(&layout, rank, &log).unwrap()
        };
        let (a, b) = (replay(&cfg_full), replay(&cfg_halved));
        let (fa, fb) = (a.field("dye").unwrap(), b.field("dye").unwrap());
        for &s in &stats {
            for t in 0..layout.n_timesteps {
                let (x, y) = (fa.snapshot_statistic(s, t).unwrap(), fb.snapshot_statistic(s, t).unwrap());
                replay_identical &= x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits());
            }
        }
    }
    let mut live_max_rel: f64 = 0.0;
    let well_conditioned = stats
        .iter()
        .filter(|s| !matches!(s, Statistic::Variance | Statistic::Skewness | Statistic::Kurtosis));
    for &s in well_conditioned {
        let read = |cfg: &StudyConfig| read_statistic(&StudyPaths::new(&cfg.output_dir).export_dir(), "dye", s).unwrap();
        let (x, y) = (read(&cfg_full), read(&cfg_halved));
        for (p, q) in x.values.iter().zip(&y.values) {
            live_max_rel = live_max_rel.max(rel(*p, *q));
        }
    }
    ElasticityOutcome {
        cap_respected,
        replay_identical,
        live_max_rel,
        oracle_full: oracle_check_study(&cfg_full.output_dir, &ALPHAS).unwrap(),
        oracle_halved: oracle_check_study(&cfg_halved.output_dir, &ALPHAS).unwrap(),
        full,
        halved,
    }
}

/// Random message of any kind, including NaN and infinite payload values.
pub fn random_message(rng: &mut impl Rng) -> Message {
    let ident = |rng: &mut dyn RngCore| -> String {
        let len = rng.random_range(0..12);
        (0..len).map(|_| char::from(rng.random_range(b'a'..=b'z'))).collect()
    };
    let study = ident(rng);
    let sim = rng.random();
    let body = match rng.random_range(0..6) {
        0 => Body::Hello {
            cells: {
                let a = rng.random_range(0..1000u64);
                a..a + rng.random_range(0..1000)
            },
            fields: (0..rng.random_range(0..4)).map(|_| ident(rng)).collect(),
        },
        1 => Body::Welcome {
            rank: rng.random(),
            cells: {
                let a = rng.random::<u64>() / 2;
                a..a + rng.random_range(0..1 << 20)
            },
            n_timesteps: rng.random(),
            fields: (0..rng.random_range(0..4)).map(|_| ident(rng)).collect(),
        },
        2 => Body::Data(DataChunk {
            field: ident(rng),
            timestep: rng.random(),
            offset: rng.random(),
            values: (0..rng.random_range(0..64))
                .map(|_| match rng.random_range(0..10) {
                    0 => f64::from_bits(rng.random()),
                    1 => f64::NAN,
                    2 => f64::NEG_INFINITY,
                    _ => rng.random_range(-1e9..1e9),
                })
                .collect(),
        }),
        3 => Body::Goodbye,
        4 => Body::Heartbeat { sequence: rng.random() },
        _ => Body::Ack,
    };
    Message::new(study, sim, body)
}

/// Corrupts a valid frame: bit flips, truncation, header length rewrites,
/// byte splices or pure noise.
pub fn mutate_frame(rng: &mut impl Rng, frame: &[u8]) -> Vec<u8> {
    let mut f = frame.to_vec();
    match rng.random_range(0..6) {
        0 => {
            for _ in 0..rng.random_range(1..8) {
                let i = rng.random_range(0..f.len());
                f[i] ^= 1 << rng.random_range(0..8);
            }
        }
        1 => f.truncate(rng.random_range(0..f.len())),
        2 if f.len() >= 12 => {
            let len: u32 = rng.random();
            f[8..12].copy_from_slice(&len.to_le_bytes());
        }
        3 => {
            let i = rng.random_range(0..=f.len());
            let extra: Vec<u8> = (0..rng.random_range(1..32)).map(|_| rng.random()).collect();
            f.splice(i..i, extra);
        }
        4 if f.len() > 13 => {
            // keep the header, randomize the body
            for b in &mut f[12..] {
                *b = rng.random();
            }
        }
        _ => f = (0..rng.random_range(0..256)).map(|_| rng.random()).collect(),
    }
    f
}

/// Small layout for in-memory ledger tests.
pub fn toy_layout(n_sims: u64, n_timesteps: u32, n_cells: u64, n_ranks: u32) -> StudyLayout {
    let mut stats = StatisticsConfig::new(vec![0.1, 0.5, 0.9], n_sims);
    stats.thresholds = vec![0.5, 1.5];
    StudyLayout {
        study_id: "toy".into(),
        n_cells,
        n_timesteps,
        fields: vec!["dye".into()],
        n_sims,
        n_ranks,
        stats,
    }
}

/// One message per (sim, timestep), covering rank 0's whole block.
pub fn messages(layout: &StudyLayout, seed: u64) -> Vec<(u64, DataChunk)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exp = Exp::new(1.0).unwrap();
    let mut out = Vec::new();
    for sim in 0..layout.n_sims {
        for t in 0..layout.n_timesteps {
            out.push((
                sim,
                DataChunk {
                    field: "dye".into(),
                    timestep: t,
                    offset: 0,
                    values: (0..layout.n_cells).map(|_| exp.sample(&mut rng)).collect(),
                },
            ));
        }
    }
    out
}

/// Largest relative difference over every order-independent statistic.
pub fn max_rel_diff(a: &RankState, b: &RankState, n_timesteps: u32) -> f64 {
    let (fa, fb) = (a.field("dye").unwrap(), b.field("dye").unwrap());
    let mut worst: f64 = 0.0;
    for s in fa.statistics().into_iter().filter(Statistic::is_order_independent) {
        for t in 0..n_timesteps {
            let (x, y) = (fa.snapshot_statistic(s, t).unwrap(), fb.snapshot_statistic(s, t).unwrap());
            worst = x.iter().zip(&y).map(|(p, q)| rel(*p, *q)).fold(worst, f64::max);
        }
    }
    worst
}

/// Delivers every message at least once, some up to four times, shuffled.
/// Returns the state and the number of extra copies.
pub fn deliver_noisy(layout: &StudyLayout, msgs: &[(u64, DataChunk)], seed: u64) -> (RankState, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..msgs.len()).collect();
    let mut extra = 0;
    for i in 0..msgs.len() {
        if rng.random_bool(0.3) {
            let copies = rng.random_range(1..=3);
            order.extend(std::iter::repeat_n(i, copies));
            extra += copies as u64;
        }
    }
    order.shuffle(&mut rng);
    let mut st = RankState::new(layout, 0).unwrap();
    let mut seen = vec![false; msgs.len()];
    for i in order {
        let (sim, chunk) = &msgs[i];
        let outcome = st.apply(*sim, chunk).unwrap();
        assert_eq!(outcome == ApplyOutcome::Applied, !seen[i]);
        seen[i] = true;
    }
    (st, extra)
}
