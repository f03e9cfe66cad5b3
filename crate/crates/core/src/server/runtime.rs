//! TCP runtime: one listener and one worker thread per rank, a reader
//! thread per client connection, and a control thread deciding when to stop.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::net::{IpAddr, Ipv4Addr, SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, RecvTimeoutError, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::export::{export_statistics, ExportManifest};
use crate::protocol::{encode_message, read_message, write_message, Body, DataChunk, Message};

use super::checkpoint::{checkpoint_path, epochs, restore_ranks, write_checkpoint};
use super::state::{ApplyOutcome, RankState, StudyLayout};
use super::ServerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeartbeatTarget {
    pub addr: SocketAddr,
    pub period: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub layout: StudyLayout,
    /// Holds `checkpoints/`, `log/`, `export/`, the endpoints file and the
    /// exit marker.
    pub work_dir: PathBuf,
    pub bind_host: IpAddr,
    /// One port per rank; empty binds ephemeral ports.
    pub bind_ports: Vec<u16>,
    pub checkpoint_period: Option<Duration>,
    /// Stop (after a checkpoint) when no message arrived for this long.
    pub idle_timeout: Duration,
    pub heartbeat: Option<HeartbeatTarget>,
    pub record_log: bool,
    /// Resume from the latest checkpoint of each rank.
    pub restore: bool,
    pub export: bool,
    /// Events buffered per rank before readers block.
    pub queue_depth: usize,
}

impl ServerConfig {
    pub fn new(layout: StudyLayout, work_dir: impl Into<PathBuf>) -> Self {
        ServerConfig {
            layout,
            work_dir: work_dir.into(),
            bind_host: IpAddr::V4(Ipv4Addr::LOCALHOST),
            bind_ports: Vec::new(),
            checkpoint_period: Some(Duration::from_secs(5)),
            idle_timeout: Duration::from_secs(60),
            heartbeat: None,
            record_log: false,
            restore: false,
            export: true,
            queue_depth: 64,
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.work_dir.join("checkpoints")
    }

    pub fn export_dir(&self) -> PathBuf {
        self.work_dir.join("export")
    }

    pub fn log_path(&self, rank: u32) -> PathBuf {
        self.work_dir.join("log").join(format!("rank-{rank}.log"))
    }

    pub fn endpoints_path(&self) -> PathBuf {
        self.work_dir.join("endpoints")
    }

    pub fn exit_marker_path(&self) -> PathBuf {
        self.work_dir.join("server_exit.json")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitReason {
    /// Every rank's ledger is full.
    Complete,
    /// No message for `idle_timeout`.
    Idle,
    /// Stop requested by the owner of the handle.
    Stopped,
}

/// Contents of the exit marker file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerExit {
    pub reason: ExitReason,
    pub epochs: Vec<u64>,
    pub completed_sims: Vec<u64>,
    pub duplicates_discarded: u64,
}

#[derive(Debug)]
pub struct ServerOutcome {
    pub reason: ExitReason,
    pub ranks: Vec<RankState>,
    pub export: Option<ExportManifest>,
}

pub struct ServerHandle {
    endpoints: Vec<SocketAddr>,
    shared: Arc<Shared>,
    control: JoinHandle<Result<ServerOutcome, ServerError>>,
}

impl ServerHandle {
    pub fn endpoints(&self) -> &[SocketAddr] {
        &self.endpoints
    }

    pub fn stop(&self) {
        self.shared.stop_requested.store(true, Ordering::SeqCst);
    }

    pub fn join(self) -> Result<ServerOutcome, ServerError> {
        self.control.join().unwrap_or_else(|_| Err(ServerError::Config("server control thread panicked".into())))
    }
}

struct Shared {
    layout: StudyLayout,
    start: Instant,
    last_activity_ms: AtomicU64,
    stop_requested: AtomicBool,
    shutting_down: AtomicBool,
    complete: Vec<AtomicBool>,
    connections: AtomicUsize,
    streams: Mutex<Vec<TcpStream>>,
}

impl Shared {
    fn touch(&self) {
        self.last_activity_ms.store(self.start.elapsed().as_millis() as u64, Ordering::Relaxed);
    }

    fn idle_for(&self) -> Duration {
        let last = self.last_activity_ms.load(Ordering::Relaxed);
        self.start.elapsed().saturating_sub(Duration::from_millis(last))
    }
}

enum Event {
    Data(u64, DataChunk),
    Goodbye(u64, Arc<Mutex<TcpStream>>),
}

/// Parses an endpoints file: one `host:port` per rank, in rank order.
pub fn read_endpoints(path: &Path) -> Result<Vec<SocketAddr>, ServerError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|e| ServerError::Config(format!("endpoint {l:?}: {e}")))
        })
        .collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ServerError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Binds every rank, writes the endpoints file and starts serving.
pub fn start_server(config: ServerConfig) -> Result<ServerHandle, ServerError> {
    config.layout.validate()?;
    if config.queue_depth == 0 {
        return Err(ServerError::Config("queue depth must be positive".into()));
    }
    if !config.bind_ports.is_empty() && config.bind_ports.len() != config.layout.n_ranks as usize {
        return Err(ServerError::Config("need one bind port per rank".into()));
    }
    fs::create_dir_all(&config.work_dir)?;
    let ckpt_dir = config.checkpoint_dir();
    let ranks = if config.restore {
        restore_ranks(&ckpt_dir, &config.layout)?
    } else {
        for rank in 0..config.layout.n_ranks {
            for e in epochs(&ckpt_dir, rank)? {
                fs::remove_file(checkpoint_path(&ckpt_dir, rank, e))?;
            }
        }
        (0..config.layout.n_ranks)
            .map(|r| RankState::new(&config.layout, r))
            .collect::<Result<Vec<_>, _>>()?
    };
    let _ = fs::remove_file(config.exit_marker_path());

    let listeners = (0..config.layout.n_ranks as usize)
        .map(|r| {
            let port = config.bind_ports.get(r).copied().unwrap_or(0);
            let l = TcpListener::bind(SocketAddr::new(config.bind_host, port))?;
            l.set_nonblocking(true)?;
            Ok(l)
        })
        .collect::<Result<Vec<_>, ServerError>>()?;
    let endpoints = listeners
        .iter()
        .map(|l| l.local_addr())
        .collect::<Result<Vec<_>, _>>()?;

    let shared = Arc::new(Shared {
        layout: config.layout.clone(),
        start: Instant::now(),
        last_activity_ms: AtomicU64::new(0),
        stop_requested: AtomicBool::new(false),
        shutting_down: AtomicBool::new(false),
        complete: ranks.iter().map(|r| AtomicBool::new(r.is_complete())).collect(),
        connections: AtomicUsize::new(0),
        streams: Mutex::new(Vec::new()),
    });

    let mut acceptors = Vec::new();
    let mut workers = Vec::new();
    for (listener, state) in listeners.into_iter().zip(ranks) {
        let (tx, rx) = sync_channel(config.queue_depth);
        let rank = state.rank();
        let log = if config.record_log {
            let path = config.log_path(rank);
            fs::create_dir_all(path.parent().unwrap())?;
            // a restored rank continues its log; a fresh one starts over
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .append(config.restore)
                .truncate(!config.restore)
                .open(path)?;
            Some(BufWriter::new(file))
        } else {
            None
        };
        let sh = Arc::clone(&shared);
        acceptors.push(thread::spawn(move || accept_loop(listener, rank, tx, sh)));
        let sh = Arc::clone(&shared);
        let dir = ckpt_dir.clone();
        let period = config.checkpoint_period;
        workers.push(thread::spawn(move || worker_loop(state, rx, log, sh, dir, period)));
    }

    let heartbeat = config.heartbeat.map(|target| {
        let sh = Arc::clone(&shared);
        thread::spawn(move || heartbeat_loop(target, sh))
    });

    let text: String = endpoints.iter().map(|e| format!("{e}\n")).collect();
    write_atomic(&config.endpoints_path(), text.as_bytes())?;
    log::info!("server listening on {endpoints:?}");

    let sh = Arc::clone(&shared);
    let control = thread::spawn(move || control_loop(config, sh, acceptors, workers, heartbeat));
    Ok(ServerHandle { endpoints, shared, control })
}

/// Runs a server to completion in the calling thread.
pub fn run_server(config: ServerConfig) -> Result<ServerOutcome, ServerError> {
    start_server(config)?.join()
}

fn control_loop(
    config: ServerConfig,
    shared: Arc<Shared>,
    acceptors: Vec<JoinHandle<()>>,
    workers: Vec<JoinHandle<Result<RankState, ServerError>>>,
    heartbeat: Option<JoinHandle<()>>,
) -> Result<ServerOutcome, ServerError> {
    let reason = loop {
        thread::sleep(Duration::from_millis(10));
        if shared.stop_requested.load(Ordering::SeqCst) {
            break ExitReason::Stopped;
        }
        if shared.complete.iter().all(|c| c.load(Ordering::SeqCst)) {
            break ExitReason::Complete;
        }
        if shared.idle_for() > config.idle_timeout {
            break ExitReason::Idle;
        }
    };
    log::info!("server stopping: {reason:?}");
    if reason == ExitReason::Complete {
        // let finishing clients collect their Goodbye acknowledgements
        let grace = Instant::now();
        while shared.connections.load(Ordering::SeqCst) > 0 && grace.elapsed() < Duration::from_secs(3) {
            thread::sleep(Duration::from_millis(10));
        }
    }
    shared.shutting_down.store(true, Ordering::SeqCst);
    for s in shared.streams.lock().unwrap().drain(..) {
        let _ = s.shutdown(std::net::Shutdown::Both);
    }
    for a in acceptors {
        let _ = a.join();
    }
    let mut ranks = Vec::new();
    let mut first_err = None;
    for w in workers {
        match w.join() {
            Ok(Ok(st)) => ranks.push(st),
            Ok(Err(e)) => {
                first_err.get_or_insert(e);
            }
            Err(_) => {
                first_err.get_or_insert(ServerError::Config("rank worker panicked".into()));
            }
        }
    }
    if let Some(h) = heartbeat {
        let _ = h.join();
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    let export = if reason == ExitReason::Complete && config.export {
        Some(
            export_statistics(&config.export_dir(), &config.layout, &ranks)
                .map_err(|e| ServerError::Export(e.to_string()))?,
        )
    } else {
        None
    };
    let marker = ServerExit {
        reason,
        epochs: ranks.iter().map(|r| r.epoch()).collect(),
        completed_sims: (0..config.layout.n_sims)
            .filter(|&s| ranks.iter().all(|r| r.ledger().sim_complete(s)))
            .collect(),
        duplicates_discarded: ranks.iter().map(|r| r.duplicates_discarded()).sum(),
    };
    write_atomic(
        &config.exit_marker_path(),
        &serde_json::to_vec_pretty(&marker).expect("marker serializes"),
    )?;
    Ok(ServerOutcome { reason, ranks, export })
}

fn accept_loop(listener: TcpListener, rank: u32, tx: SyncSender<Event>, shared: Arc<Shared>) {
    while !shared.shutting_down.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                if stream.set_nonblocking(false).is_err() {
                    continue;
                }
                let _ = stream.set_nodelay(true);
                if let Ok(clone) = stream.try_clone() {
                    shared.streams.lock().unwrap().push(clone);
                }
                shared.connections.fetch_add(1, Ordering::SeqCst);
                let tx = tx.clone();
                let sh = Arc::clone(&shared);
                thread::spawn(move || {
                    if let Err(e) = reader_loop(stream, rank, &tx, &sh) {
                        if !sh.shutting_down.load(Ordering::SeqCst) {
                            log::warn!("rank {rank}: dropping connection from {peer}: {e}");
                        }
                    }
                    sh.connections.fetch_sub(1, Ordering::SeqCst);
                });
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(5))
            }
            Err(e) => {
                log::warn!("rank {rank}: accept failed: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn reader_loop(
    stream: TcpStream,
    rank: u32,
    tx: &SyncSender<Event>,
    shared: &Shared,
) -> Result<(), ServerError> {
    let layout = &shared.layout;
    let writer = Arc::new(Mutex::new(stream.try_clone()?));
    let mut reader = BufReader::with_capacity(1 << 16, stream);
    let mut session: Option<u64> = None;
    while let Some(msg) = read_message(&mut reader)? {
        shared.touch();
        let Message { study_id, simulation_id, body } = msg;
        match body {
            Body::Hello { fields, .. } => {
                let cells = layout.partition()?.range_of(rank);
                let welcome = Message::new(
                    layout.study_id.clone(),
                    simulation_id,
                    Body::Welcome {
                        rank,
                        cells,
                        n_timesteps: layout.n_timesteps,
                        fields: layout.fields.clone(),
                    },
                );
                write_message(&mut *writer.lock().unwrap(), &welcome)?;
                if study_id != layout.study_id {
                    return Err(ServerError::Protocol(format!("study {study_id:?} is not served here")));
                }
                if simulation_id >= layout.n_sims {
                    return Err(ServerError::Protocol(format!("simulation id {simulation_id} out of range")));
                }
                if let Some(f) = fields.iter().find(|f| layout.field_index(f).is_none()) {
                    return Err(ServerError::Protocol(format!("unknown field {f:?}")));
                }
                session = Some(simulation_id);
            }
            Body::Data(chunk) => {
                check_session(session, &study_id, simulation_id, layout)?;
                send_event(tx, Event::Data(simulation_id, chunk), shared)?;
            }
            Body::Goodbye => {
                check_session(session, &study_id, simulation_id, layout)?;
                send_event(tx, Event::Goodbye(simulation_id, Arc::clone(&writer)), shared)?;
            }
            Body::Heartbeat { .. } => {}
            Body::Welcome { .. } | Body::Ack => {
                return Err(ServerError::Protocol("server-bound message of server kind".into()));
            }
        }
    }
    Ok(())
}

fn check_session(session: Option<u64>, study: &str, sim: u64, layout: &StudyLayout) -> Result<(), ServerError> {
    match session {
        Some(s) if s == sim && study == layout.study_id => Ok(()),
        Some(_) => Err(ServerError::Protocol("study or simulation id changed mid-connection".into())),
        None => Err(ServerError::Protocol("message before Hello".into())),
    }
}

/// Blocks while the rank queue is full, giving up only at shutdown.
fn send_event(tx: &SyncSender<Event>, mut ev: Event, shared: &Shared) -> Result<(), ServerError> {
    loop {
        match tx.try_send(ev) {
            Ok(()) => return Ok(()),
            Err(TrySendError::Full(back)) => {
                if shared.shutting_down.load(Ordering::SeqCst) {
                    return Err(ServerError::Protocol("server shutting down".into()));
                }
                ev = back;
                thread::sleep(Duration::from_micros(200));
            }
            Err(TrySendError::Disconnected(_)) => {
                return Err(ServerError::Protocol("rank worker stopped".into()))
            }
        }
    }
}

struct Worker {
    state: RankState,
    log: Option<BufWriter<File>>,
    shared: Arc<Shared>,
    dirty: bool,
}

impl Worker {
    fn process(&mut self, ev: Event) -> Result<(), ServerError> {
        match ev {
            Event::Data(sim, chunk) => {
                let m = Message::new(self.shared.layout.study_id.clone(), sim, Body::Data(chunk));
                if let Some(log) = self.log.as_mut() {
                    log.write_all(&encode_message(&m)?)?;
                }
                if let Body::Data(chunk) = &m.body {
                    match self.state.apply(sim, chunk) {
                        Ok(ApplyOutcome::Applied) => self.dirty = true,
                        Ok(ApplyOutcome::Duplicate) => {}
                        Err(e) => log::warn!(
                            "rank {}: rejected message from simulation {sim}: {e}",
                            self.state.rank()
                        ),
                    }
                }
            }
            Event::Goodbye(sim, writer) => {
                self.flush_log()?;
                let ack = Message::new(self.shared.layout.study_id.clone(), sim, Body::Ack);
                if let Err(e) = write_message(&mut *writer.lock().unwrap(), &ack) {
                    log::debug!("ack to simulation {sim} failed: {e}");
                }
            }
        }
        Ok(())
    }

    fn flush_log(&mut self) -> Result<(), ServerError> {
        if let Some(log) = self.log.as_mut() {
            log.flush()?;
        }
        Ok(())
    }

    fn checkpoint(&mut self, dir: &Path) -> Result<(), ServerError> {
        self.flush_log()?;
        self.state.set_epoch(self.state.epoch() + 1);
        write_checkpoint(dir, &self.state)?;
        self.dirty = false;
        Ok(())
    }
}

fn worker_loop(
    state: RankState,
    rx: Receiver<Event>,
    log: Option<BufWriter<File>>,
    shared: Arc<Shared>,
    ckpt_dir: PathBuf,
    period: Option<Duration>,
) -> Result<RankState, ServerError> {
    let rank = state.rank() as usize;
    let mut w = Worker { state, log, shared, dirty: false };
    let mut last_ckpt = Instant::now();
    loop {
        match rx.recv_timeout(Duration::from_millis(20)) {
            Ok(ev) => w.process(ev)?,
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
        if w.state.is_complete() {
            w.shared.complete[rank].store(true, Ordering::SeqCst);
        }
        if w.shared.shutting_down.load(Ordering::SeqCst) {
            while let Ok(ev) = rx.try_recv() {
                w.process(ev)?;
            }
            break;
        }
        if period.is_some_and(|p| w.dirty && last_ckpt.elapsed() >= p) {
            w.checkpoint(&ckpt_dir)?;
            last_ckpt = Instant::now();
        }
    }
    w.checkpoint(&ckpt_dir)?;
    Ok(w.state)
}

fn heartbeat_loop(target: HeartbeatTarget, shared: Arc<Shared>) {
    let mut conn: Option<TcpStream> = None;
    let mut sequence = 0u64;
    while !shared.shutting_down.load(Ordering::SeqCst) {
        if conn.is_none() {
            conn = TcpStream::connect_timeout(&target.addr, Duration::from_millis(200)).ok();
        }
        if let Some(s) = conn.as_mut() {
            let m = Message::new(shared.layout.study_id.clone(), 0, Body::Heartbeat { sequence });
            if write_message(s, &m).is_err() {
                conn = None;
            }
            sequence += 1;
        }
        // sleep in small slices so shutdown is prompt
        let until = Instant::now() + target.period;
        while Instant::now() < until && !shared.shutting_down.load(Ordering::SeqCst) {
            thread::sleep(Duration::from_millis(10).min(target.period));
        }
    }
}
