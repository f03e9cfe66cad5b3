use std::io::BufReader;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::client::{ENV_ENDPOINTS, ENV_SIMULATION_ID, ENV_STUDY_ID};
use crate::protocol::{read_message, Body};
use crate::server::{completed_in_checkpoint, read_endpoints, ExitReason, ServerConfig, ServerExit};

use super::config::StudyConfig;
use super::params::parameter_set;
use super::scheduler::{
    Clock, HeartbeatMonitor, JobId, JobRole, JobSpec, JobStatus, LocalProcessScheduler, Scheduler,
    ServerHealth, SystemClock,
};

/// Exit status of a simulation that crashed on purpose.
pub const INJECTED_CRASH_EXIT: i32 = 17;

#[derive(Debug, thiserror::Error)]
pub enum LaunchError {
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Setup(String),
}

/// Files and directories of one study run.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyPaths {
    pub root: PathBuf,
}

impl StudyPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        StudyPaths { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("study.toml")
    }
    pub fn server_dir(&self) -> PathBuf {
        self.root.join("server")
    }
    pub fn export_dir(&self) -> PathBuf {
        self.server_dir().join("export")
    }
    pub fn raw_dir(&self) -> PathBuf {
        self.root.join("raw")
    }
    pub fn logs_dir(&self) -> PathBuf {
        self.root.join("logs")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn state(&self) -> PathBuf {
        self.root.join("launcher_state.json")
    }
    pub fn server_config(&self, cfg: &StudyConfig) -> ServerConfig {
        cfg.server_config(self.server_dir())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimStatus {
    Pending,
    Running,
    Done,
    /// Retry budget exhausted.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub id: u64,
    pub status: SimStatus,
    pub attempts: u32,
    /// Failed attempts (nonzero exit, kill, wall limit); preemptions and
    /// server restarts do not count.
    pub failures: u32,
    #[serde(skip)]
    job: Option<JobId>,
    #[serde(skip)]
    started: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelinePoint {
    pub t_secs: f64,
    pub running: usize,
    pub cap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub t_secs: f64,
    pub what: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study_id: String,
    pub success: bool,
    pub failure: Option<String>,
    pub wall_time_secs: f64,
    pub timeline: Vec<TimelinePoint>,
    pub max_running: usize,
    pub sims: Vec<SimRecord>,
    pub total_failures: u32,
    pub server_restarts: u32,
    pub export_dir: PathBuf,
    pub events: Vec<EventRecord>,
}

/// Process ids for external observers (and for killing the launcher in
/// fault tests without orphaning knowledge of its children).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LauncherState {
    pub launcher_pid: u32,
    pub server_pid: Option<u32>,
    pub running: Vec<(u64, Option<u32>)>,
    pub done: usize,
}

/// Latest heartbeat time, written by the receiving thread.
pub type HeartbeatInbox = Arc<Mutex<Option<Duration>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ServerPhase {
    Down,
    Starting,
    Ready,
}

/// Single-owner study control loop. Call [`tick`](Self::tick) until it
/// returns a report.
pub struct Launcher<S: Scheduler, C: Clock> {
    cfg: StudyConfig,
    paths: StudyPaths,
    exe: PathBuf,
    sched: S,
    clock: C,
    heartbeat_addr: Option<SocketAddr>,
    inbox: HeartbeatInbox,
    sims: Vec<SimRecord>,
    server_job: Option<JobId>,
    server_phase: ServerPhase,
    endpoints: String,
    restarts: u32,
    monitor: HeartbeatMonitor,
    suspect_reported: bool,
    timeline: Vec<TimelinePoint>,
    events: Vec<EventRecord>,
    rng: ChaCha8Rng,
    sims_killed: u32,
    last_kill: Option<Duration>,
    server_kill_done: bool,
    finished: Option<Result<(), String>>,
    state_dirty: bool,
}

impl<S: Scheduler, C: Clock> Launcher<S, C> {
    pub fn new(cfg: StudyConfig, paths: StudyPaths, exe: PathBuf, sched: S, clock: C) -> Result<Self, LaunchError> {
        cfg.validate().map_err(|e| LaunchError::Setup(e.to_string()))?;
        std::fs::create_dir_all(&paths.root)?;
        std::fs::write(paths.config(), cfg.to_toml())?;
        let now = clock.now();
        let monitor = HeartbeatMonitor::new(
            Duration::from_secs_f64(cfg.launcher.heartbeat_suspect_secs),
            Duration::from_secs_f64(cfg.launcher.heartbeat_timeout_secs),
            now,
        );
        Ok(Launcher {
            sims: (0..cfg.n_sims)
                .map(|id| SimRecord { id, status: SimStatus::Pending, attempts: 0, failures: 0, job: None, started: now })
                .collect(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6b69_6c6c),
            cfg,
            paths,
            exe,
            sched,
            clock,
            heartbeat_addr: None,
            inbox: Arc::new(Mutex::new(None)),
            server_job: None,
            server_phase: ServerPhase::Down,
            endpoints: String::new(),
            restarts: 0,
            monitor,
            suspect_reported: false,
            timeline: Vec::new(),
            events: Vec::new(),
            sims_killed: 0,
            last_kill: None,
            server_kill_done: false,
            finished: None,
            state_dirty: true,
        })
    }

    /// Enables heartbeat monitoring: the server is told to report to `addr`
    /// and receipts are expected in the returned inbox.
    pub fn monitor_heartbeats(&mut self, addr: SocketAddr) -> HeartbeatInbox {
        self.heartbeat_addr = Some(addr);
        Arc::clone(&self.inbox)
    }

    pub fn sims(&self) -> &[SimRecord] {
        &self.sims
    }

    pub fn timeline(&self) -> &[TimelinePoint] {
        &self.timeline
    }

    pub fn scheduler(&self) -> &S {
        &self.sched
    }

    pub fn scheduler_mut(&mut self) -> &mut S {
        &mut self.sched
    }

    pub fn server_job(&self) -> Option<JobId> {
        self.server_job
    }

    pub fn running(&self) -> usize {
        self.sims.iter().filter(|s| s.status == SimStatus::Running).count()
    }

    fn event(&mut self, what: String) {
        log::info!("{what}");
        self.events.push(EventRecord { t_secs: self.clock.now().as_secs_f64(), what });
    }

    fn record_timeline(&mut self) {
        let point = TimelinePoint {
            t_secs: self.clock.now().as_secs_f64(),
            running: self.running(),
            cap: self.cfg.cap_at(self.clock.now()),
        };
        match self.timeline.last() {
            Some(l) if l.running == point.running && l.cap == point.cap => {}
            _ => self.timeline.push(point),
        }
    }

    fn server_job_spec(&self, restore: bool) -> JobSpec {
        let mut args = vec![
            "server".into(),
            "--config".into(),
            self.paths.config().display().to_string(),
            "--work-dir".into(),
            self.paths.server_dir().display().to_string(),
        ];
        if restore {
            args.push("--restore".into());
        }
        if let Some(a) = self.heartbeat_addr {
            args.push("--heartbeat".into());
            args.push(a.to_string());
        }
        JobSpec {
            role: JobRole::Server,
            program: self.exe.clone(),
            args,
            env: Vec::new(),
            log: Some(self.paths.logs_dir().join(format!("server-{}.log", self.restarts))),
        }
    }

    fn sim_job_spec(&self, sim: &SimRecord) -> JobSpec {
        let mut args = vec![
            "simulate".into(),
            "--config".into(),
            self.paths.config().display().to_string(),
            "--params".into(),
            parameter_set(self.cfg.seed, sim.id).to_arg(),
        ];
        if let Some(c) = self.cfg.faults.crash_sims.iter().find(|c| c.sim == sim.id && sim.attempts < c.times) {
            args.push("--crash-at-step".into());
            args.push(c.at_step.to_string());
        }
        if self.cfg.store_raw {
            args.push("--raw-dir".into());
            args.push(self.paths.raw_dir().display().to_string());
        }
        JobSpec {
            role: JobRole::Simulation(sim.id),
            program: self.exe.clone(),
            args,
            env: vec![
                (ENV_ENDPOINTS.into(), self.endpoints.clone()),
                (ENV_STUDY_ID.into(), self.cfg.study_id.clone()),
                (ENV_SIMULATION_ID.into(), sim.id.to_string()),
            ],
            log: Some(self.paths.logs_dir().join(format!("sim-{}-attempt-{}.log", sim.id, sim.attempts + 1))),
        }
    }

    fn start_server(&mut self, restore: bool) -> Result<(), LaunchError> {
        let sc = self.paths.server_config(&self.cfg);
        let _ = std::fs::remove_file(sc.endpoints_path());
        let spec = self.server_job_spec(restore);
        self.server_job = Some(self.sched.submit(&spec)?);
        self.server_phase = ServerPhase::Starting;
        self.monitor = HeartbeatMonitor::new(
            Duration::from_secs_f64(self.cfg.launcher.heartbeat_suspect_secs),
            Duration::from_secs_f64(self.cfg.launcher.heartbeat_timeout_secs),
            self.clock.now(),
        );
        self.suspect_reported = false;
        self.event(format!("server started (restore: {restore})"));
        self.state_dirty = true;
        Ok(())
    }

    fn stop_sim(&mut self, i: usize, failed: bool, why: &str) -> Result<(), LaunchError> {
        if let Some(job) = self.sims[i].job.take() {
            self.sched.kill(job)?;
        }
        self.sims[i].status = SimStatus::Pending;
        if failed {
            self.count_failure(i, why);
        } else {
            let id = self.sims[i].id;
            self.event(format!("simulation {id} stopped: {why}"));
        }
        self.state_dirty = true;
        Ok(())
    }

    fn count_failure(&mut self, i: usize, why: &str) {
        let s = &mut self.sims[i];
        s.failures += 1;
        s.status = SimStatus::Pending;
        let (id, failures) = (s.id, s.failures);
        if failures > self.cfg.launcher.retry_budget {
            self.sims[i].status = SimStatus::Failed;
            self.event(format!("simulation {id} failed permanently: {why}"));
            self.finished = Some(Err(format!("simulation {id} exhausted its retry budget ({why})")));
        } else {
            self.event(format!("simulation {id} failed ({why}), retry {failures}"));
        }
    }

    fn server_failed(&mut self, why: String) -> Result<(), LaunchError> {
        self.event(format!("server failed: {why}"));
        if let Some(job) = self.server_job.take() {
            self.sched.kill(job)?;
        }
        self.server_phase = ServerPhase::Down;
        for i in 0..self.sims.len() {
            if self.sims[i].status == SimStatus::Running {
                self.stop_sim(i, false, "server restart")?;
            }
        }
        self.restarts += 1;
        if self.restarts > self.cfg.launcher.server_restart_budget {
            self.finished = Some(Err(format!("server unrecoverable after {} restarts: {why}", self.restarts - 1)));
            return Ok(());
        }
        let sc = self.paths.server_config(&self.cfg);
        let completed = match completed_in_checkpoint(&sc.checkpoint_dir(), &sc.layout) {
            Ok(c) => c,
            Err(e) => {
                self.finished = Some(Err(format!("cannot read server checkpoint: {e}")));
                return Ok(());
            }
        };
        let mut requeued = 0;
        for s in &mut self.sims {
            if s.status == SimStatus::Failed {
                continue;
            }
            let done = completed.binary_search(&s.id).is_ok();
            if s.status == SimStatus::Done && !done {
                requeued += 1;
            }
            s.status = if done { SimStatus::Done } else { SimStatus::Pending };
        }
        self.event(format!(
            "restarting server from checkpoint: {} simulations complete, {requeued} done simulations requeued",
            completed.len()
        ));
        self.start_server(true)
    }

    /// One pass of the control loop. Returns the final report once the study
    /// has succeeded or failed.
    pub fn tick(&mut self) -> Result<Option<StudyReport>, LaunchError> {
        let now = self.clock.now();
        if self.finished.is_none() && self.server_job.is_none() && self.server_phase == ServerPhase::Down {
            self.start_server(false)?;
        }

        // server first, so simulations failing because the server died are
        // not charged against their retry budget
        if let Some(job) = self.server_job {
            if self.server_phase == ServerPhase::Starting {
                let path = self.paths.server_config(&self.cfg).endpoints_path();
                if let Ok(eps) = read_endpoints(&path) {
                    if eps.len() == self.cfg.server.ranks as usize {
                        self.endpoints = eps.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(",");
                        self.server_phase = ServerPhase::Ready;
                        self.event(format!("server ready at {}", self.endpoints));
                    }
                }
            }
            if let Some(t) = *self.inbox.lock().unwrap() {
                self.monitor.observe(t);
            }
            match self.sched.poll(job)? {
                JobStatus::Exited(code) => {
                    let marker: Option<ServerExit> = std::fs::read(self.paths.server_config(&self.cfg).exit_marker_path())
                        .ok()
                        .and_then(|b| serde_json::from_slice(&b).ok());
                    match marker {
                        Some(m) if m.reason == ExitReason::Complete && code == Some(0) => {
                            self.server_job = None;
                            self.event("server finished: all statistics complete".into());
                            for i in 0..self.sims.len() {
                                if self.sims[i].status == SimStatus::Running {
                                    self.stop_sim(i, false, "study complete")?;
                                }
                                self.sims[i].status = SimStatus::Done;
                            }
                            self.finished = Some(Ok(()));
                        }
                        m => {
                            let reason = m.map_or("no exit marker".to_string(), |m| format!("{:?}", m.reason));
                            self.server_failed(format!("exited with {code:?} ({reason})"))?;
                        }
                    }
                }
                JobStatus::Running if self.heartbeat_addr.is_some() => match self.monitor.status(now) {
                    ServerHealth::Failed => self.server_failed("heartbeat timeout".into())?,
                    ServerHealth::Suspect if !self.suspect_reported => {
                        self.suspect_reported = true;
                        self.event("server suspect: heartbeats late".into());
                    }
                    ServerHealth::Healthy => self.suspect_reported = false,
                    _ => {}
                },
                JobStatus::Running => {}
            }
        }

        if self.finished.is_none() {
            self.poll_sims(now)?;
        }
        if self.finished.is_none() {
            self.inject_faults(now)?;
        }
        if self.finished.is_none() && self.server_phase == ServerPhase::Ready {
            self.schedule(now)?;
        }
        self.record_timeline();
        if self.state_dirty {
            self.write_state()?;
        }

        match self.finished.clone() {
            None => Ok(None),
            Some(result) => {
                if result.is_err() {
                    for i in 0..self.sims.len() {
                        if let Some(job) = self.sims[i].job.take() {
                            self.sched.kill(job)?;
                        }
                    }
                    if let Some(job) = self.server_job.take() {
                        self.sched.kill(job)?;
                    }
                }
                let report = self.report(result.err());
                std::fs::write(self.paths.report(), serde_json::to_vec_pretty(&report).unwrap())?;
                Ok(Some(report))
            }
        }
    }

    fn poll_sims(&mut self, now: Duration) -> Result<(), LaunchError> {
        let wall = Duration::from_secs_f64(self.cfg.launcher.sim_wall_limit_secs);
        for i in 0..self.sims.len() {
            let Some(job) = self.sims[i].job else { continue };
            match self.sched.poll(job)? {
                JobStatus::Exited(Some(0)) => {
                    self.sims[i].job = None;
                    self.sims[i].status = SimStatus::Done;
                    self.state_dirty = true;
                }
                JobStatus::Exited(code) => {
                    self.sims[i].job = None;
                    self.state_dirty = true;
                    self.count_failure(i, &format!("exit status {code:?}"));
                }
                JobStatus::Running if now.saturating_sub(self.sims[i].started) > wall => {
                    self.stop_sim(i, true, "wall limit exceeded")?;
                }
                JobStatus::Running => {}
            }
            if self.finished.is_some() {
                break;
            }
        }
        Ok(())
    }

    fn inject_faults(&mut self, now: Duration) -> Result<(), LaunchError> {
        let f = self.cfg.faults.clone();
        if self.sims_killed < f.kill_sims
            && now.as_secs_f64() >= f.kill_sims_after_secs
            && self.last_kill.is_none_or(|t| now.saturating_sub(t) >= Duration::from_millis(250))
        {
            let running: Vec<usize> = (0..self.sims.len()).filter(|&i| self.sims[i].status == SimStatus::Running).collect();
            if let Some(&i) = running.choose(&mut self.rng) {
                self.sims_killed += 1;
                self.last_kill = Some(now);
                self.stop_sim(i, true, "killed by fault injection")?;
            }
        }
        if let Some(k) = f.kill_server_after_done {
            let done = self.sims.iter().filter(|s| s.status == SimStatus::Done).count() as u64;
            if !self.server_kill_done && done >= k && self.server_phase == ServerPhase::Ready {
                if let Some(job) = self.server_job {
                    self.server_kill_done = true;
                    self.event(format!("fault injection: killing server after {done} simulations"));
                    self.sched.kill(job)?;
                }
            }
        }
        Ok(())
    }

    fn schedule(&mut self, now: Duration) -> Result<(), LaunchError> {
        let cap = self.cfg.cap_at(now);
        // shrink first: preempt the most recently started simulations
        while self.running() > cap {
            let i = (0..self.sims.len())
                .filter(|&i| self.sims[i].status == SimStatus::Running)
                .max_by_key(|&i| (self.sims[i].started, self.sims[i].id))
                .unwrap();
            self.stop_sim(i, false, &format!("preempted, cap now {cap}"))?;
        }
        while self.running() < cap {
            let Some(i) = self.sims.iter().position(|s| s.status == SimStatus::Pending) else { break };
            let spec = self.sim_job_spec(&self.sims[i]);
            let job = self.sched.submit(&spec)?;
            let s = &mut self.sims[i];
            s.job = Some(job);
            s.status = SimStatus::Running;
            s.attempts += 1;
            s.started = now;
            self.state_dirty = true;
        }
        Ok(())
    }

    fn write_state(&mut self) -> Result<(), LaunchError> {
        let st = LauncherState {
            launcher_pid: std::process::id(),
            server_pid: self.server_job.and_then(|j| self.sched.pid(j)),
            running: self
                .sims
                .iter()
                .filter(|s| s.status == SimStatus::Running)
                .map(|s| (s.id, s.job.and_then(|j| self.sched.pid(j))))
                .collect(),
            done: self.sims.iter().filter(|s| s.status == SimStatus::Done).count(),
        };
        let path = self.paths.state();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&st).unwrap())?;
        std::fs::rename(tmp, path)?;
        self.state_dirty = false;
        Ok(())
    }

    fn report(&self, failure: Option<String>) -> StudyReport {
        StudyReport {
            study_id: self.cfg.study_id.clone(),
            success: failure.is_none(),
            failure,
            wall_time_secs: self.clock.now().as_secs_f64(),
            max_running: self.timeline.iter().map(|p| p.running).max().unwrap_or(0),
            timeline: self.timeline.clone(),
            sims: self.sims.clone(),
            total_failures: self.sims.iter().map(|s| s.failures).sum(),
            server_restarts: self.restarts,
            export_dir: self.paths.export_dir(),
            events: self.events.clone(),
        }
    }

    /// Ticks until the study ends, sleeping the poll interval between passes.
    pub fn run(&mut self) -> Result<StudyReport, LaunchError> {
        let poll = Duration::from_millis(self.cfg.launcher.poll_interval_ms.max(1));
        loop {
            if let Some(r) = self.tick()? {
                return Ok(r);
            }
            self.clock.sleep(poll);
        }
    }
}

/// Receives server heartbeats on a local socket and stamps them with
/// `clock` time.
pub fn spawn_heartbeat_listener<C: Clock>(clock: C, inbox: HeartbeatInbox) -> Result<SocketAddr, LaunchError> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    std::thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let clock = clock.clone();
            let inbox = Arc::clone(&inbox);
            std::thread::spawn(move || {
                let mut r = BufReader::new(stream);
                while let Ok(Some(m)) = read_message(&mut r) {
                    if let Body::Heartbeat { .. } = m.body {
                        *inbox.lock().unwrap() = Some(clock.now());
                    }
                }
            });
        }
    });
    Ok(addr)
}

/// Runs a whole study with local processes, writing everything under
/// `cfg.output_dir`. `exe` must provide the `server` and `simulate`
/// subcommands.
pub fn launch_study(cfg: StudyConfig, exe: &Path) -> Result<StudyReport, LaunchError> {
    let paths = StudyPaths::new(cfg.output_dir.clone());
    let clock = SystemClock::new();
    let mut launcher = Launcher::new(cfg, paths, exe.to_owned(), LocalProcessScheduler::new(), clock)?;
    let inbox = Arc::new(Mutex::new(None));
    let addr = spawn_heartbeat_listener(clock, Arc::clone(&inbox))?;
    launcher.inbox = inbox;
    launcher.heartbeat_addr = Some(addr);
    launcher.run()
}
