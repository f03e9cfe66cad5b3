use std::collections::HashMap;
use std::fs::File;
use std::io;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

/// What a job is for; schedulers may ignore it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JobRole {
    Server,
    Simulation(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobSpec {
    pub role: JobRole,
    pub program: PathBuf,
    pub args: Vec<String>,
    pub env: Vec<(String, String)>,
    /// Receives stdout and stderr.
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct JobId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobStatus {
    Running,
    /// Exit code, or `None` when terminated by a signal.
    Exited(Option<i32>),
}

impl JobStatus {
    pub fn succeeded(&self) -> bool {
        matches!(self, JobStatus::Exited(Some(0)))
    }
}

/// Batch-scheduler interface used by the launcher.
pub trait Scheduler {
    fn submit(&mut self, job: &JobSpec) -> io::Result<JobId>;
    fn poll(&mut self, id: JobId) -> io::Result<JobStatus>;
    /// Forcibly terminates a job; killing a finished job is not an error.
    fn kill(&mut self, id: JobId) -> io::Result<()>;
    /// Operating-system process id, when there is one.
    fn pid(&self, id: JobId) -> Option<u32>;
}

/// Runs each job as a local child process.
#[derive(Default)]
pub struct LocalProcessScheduler {
    next: u64,
    children: HashMap<JobId, Child>,
    finished: HashMap<JobId, JobStatus>,
}

impl LocalProcessScheduler {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Scheduler for LocalProcessScheduler {
    fn submit(&mut self, job: &JobSpec) -> io::Result<JobId> {
        let mut cmd = Command::new(&job.program);
        cmd.args(&job.args).stdin(Stdio::null());
        for (k, v) in &job.env {
            cmd.env(k, v);
        }
        match &job.log {
            Some(path) => {
                if let Some(dir) = path.parent() {
                    std::fs::create_dir_all(dir)?;
                }
                let f = File::create(path)?;
                cmd.stdout(f.try_clone()?).stderr(f);
            }
            None => {
                cmd.stdout(Stdio::null()).stderr(Stdio::null());
            }
        }
        let child = cmd.spawn()?;
        self.next += 1;
        let id = JobId(self.next);
        self.children.insert(id, child);
        Ok(id)
    }

    fn poll(&mut self, id: JobId) -> io::Result<JobStatus> {
        if let Some(s) = self.finished.get(&id) {
            return Ok(*s);
        }
        let child = self
            .children
            .get_mut(&id)
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("unknown job {id:?}")))?;
        match child.try_wait()? {
            None => Ok(JobStatus::Running),
            Some(st) => {
                let s = JobStatus::Exited(st.code());
                self.children.remove(&id);
                self.finished.insert(id, s);
                Ok(s)
            }
        }
    }

    fn kill(&mut self, id: JobId) -> io::Result<()> {
        if let Some(child) = self.children.get_mut(&id) {
            match child.kill() {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::InvalidInput => {}
                Err(e) => return Err(e),
            }
            child.wait()?;
        }
        Ok(())
    }

    fn pid(&self, id: JobId) -> Option<u32> {
        self.children.get(&id).map(|c| c.id())
    }
}

/// Study time source. Cloned handles observe the same clock.
pub trait Clock: Clone + Send + Sync + 'static {
    /// Time elapsed since the clock was created.
    fn now(&self) -> Duration;
    /// Waits `d` of clock time (no-op for manual clocks).
    fn sleep(&self, d: Duration);
}

#[derive(Debug, Clone, Copy)]
pub struct SystemClock {
    start: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock { start: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.start.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }
}

/// Clock advanced explicitly by tests.
#[derive(Debug, Clone, Default)]
pub struct ManualClock {
    now: Arc<Mutex<Duration>>,
}

impl ManualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, d: Duration) {
        *self.now.lock().unwrap() += d;
    }

    pub fn set(&self, t: Duration) {
        *self.now.lock().unwrap() = t;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        *self.now.lock().unwrap()
    }

    fn sleep(&self, _d: Duration) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerHealth {
    Healthy,
    Suspect,
    Failed,
}

/// Classifies heartbeat silence: `Suspect` after `suspect_after`, `Failed`
/// after `timeout`.
#[derive(Debug, Clone, Copy)]
pub struct HeartbeatMonitor {
    suspect_after: Duration,
    timeout: Duration,
    last: Duration,
}

impl HeartbeatMonitor {
    /// Starts counting silence from `now`.
    pub fn new(suspect_after: Duration, timeout: Duration, now: Duration) -> Self {
        HeartbeatMonitor { suspect_after, timeout, last: now }
    }

    pub fn observe(&mut self, at: Duration) {
        self.last = self.last.max(at);
    }

    pub fn status(&self, now: Duration) -> ServerHealth {
        let silence = now.saturating_sub(self.last);
        if silence > self.timeout {
            ServerHealth::Failed
        } else if silence > self.suspect_after {
            ServerHealth::Suspect
        } else {
            ServerHealth::Healthy
        }
    }
}
