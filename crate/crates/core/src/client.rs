//! Simulation-side API: [`ClientSession::initialize`], [`ClientSession::send`]
//! and [`ClientSession::finalize`].
//!
//! Data messages are fire-and-forget; the only acknowledgement is the one
//! answering Goodbye, which the server sends after every earlier message on
//! that connection was consumed.

use std::io::{BufWriter, Write};
use std::net::{SocketAddr, TcpStream};
use std::ops::Range;
use std::time::Duration;

use crate::protocol::{
    read_message, write_message, Body, CodecError, DataChunk, Message, PartitionError, PartitionMap,
};
use crate::sim_dye::FieldSink;

pub const ENV_ENDPOINTS: &str = "ENSEMBLE_SERVER_ENDPOINTS";
pub const ENV_STUDY_ID: &str = "ENSEMBLE_STUDY_ID";
pub const ENV_SIMULATION_ID: &str = "ENSEMBLE_SIMULATION_ID";

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("could not connect to {endpoint} after {attempts} attempts: {source}")]
    Connect {
        endpoint: SocketAddr,
        attempts: u32,
        source: std::io::Error,
    },
    #[error("server serves study {found:?}, expected {expected:?}")]
    StudyMismatch { expected: String, found: String },
    #[error("handshake with rank {rank}: {reason}")]
    Handshake { rank: u32, reason: String },
    #[error("session is closed")]
    Closed,
    #[error("field {field:?}: {got} values for {expected} local cells")]
    LengthMismatch { field: String, expected: usize, got: usize },
    #[error("field {0:?} has no local cells")]
    EmptyField(String),
    #[error("field {0:?} was not declared at initialize")]
    UnknownField(String),
    #[error(transparent)]
    Routing(#[from] PartitionError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("environment: {0}")]
    Env(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    pub study_id: String,
    pub simulation_id: u64,
    /// One endpoint per server rank, in rank order.
    pub endpoints: Vec<SocketAddr>,
    /// Global mesh size, needed to rebuild the server partition.
    pub n_cells: u64,
    pub connect_attempts: u32,
    pub initial_backoff: Duration,
    pub ack_timeout: Duration,
}

impl ClientConfig {
    pub fn new(study_id: impl Into<String>, simulation_id: u64, endpoints: Vec<SocketAddr>, n_cells: u64) -> Self {
        ClientConfig {
            study_id: study_id.into(),
            simulation_id,
            endpoints,
            n_cells,
            connect_attempts: 20,
            initial_backoff: Duration::from_millis(25),
            ack_timeout: Duration::from_secs(60),
        }
    }

    /// Reads endpoints (comma separated), study id and simulation id from the
    /// environment variables set by the launcher.
    pub fn from_env(n_cells: u64) -> Result<Self, ClientError> {
        let var = |k: &str| std::env::var(k).map_err(|_| ClientError::Env(format!("{k} is not set")));
        let endpoints = parse_endpoints(&var(ENV_ENDPOINTS)?)?;
        let sim = var(ENV_SIMULATION_ID)?
            .parse()
            .map_err(|e| ClientError::Env(format!("{ENV_SIMULATION_ID}: {e}")))?;
        Ok(ClientConfig::new(var(ENV_STUDY_ID)?, sim, endpoints, n_cells))
    }
}

pub fn parse_endpoints(s: &str) -> Result<Vec<SocketAddr>, ClientError> {
    s.split(',')
        .map(str::trim)
        .filter(|e| !e.is_empty())
        .map(|e| e.parse().map_err(|err| ClientError::Env(format!("endpoint {e:?}: {err}"))))
        .collect()
}

/// A field this simulation sends, with the global cells it owns locally.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: String,
    pub cells: Range<u64>,
}

struct Connection {
    rank: u32,
    writer: BufWriter<TcpStream>,
    stream: TcpStream,
}

pub struct ClientSession {
    config: ClientConfig,
    fields: Vec<FieldSpec>,
    /// Per field: (index into `conns`, owned sub-range).
    routes: Vec<Vec<(usize, Range<u64>)>>,
    conns: Vec<Connection>,
    closed: bool,
}

impl std::fmt::Debug for ClientSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientSession")
            .field("simulation_id", &self.config.simulation_id)
            .field("ranks", &self.conns.iter().map(|c| c.rank).collect::<Vec<_>>())
            .field("closed", &self.closed)
            .finish()
    }
}

fn connect_with_retry(cfg: &ClientConfig, rank: u32) -> Result<TcpStream, ClientError> {
    let endpoint = cfg.endpoints[rank as usize];
    let mut backoff = cfg.initial_backoff;
    let mut attempt = 0;
    loop {
        attempt += 1;
        match TcpStream::connect_timeout(&endpoint, Duration::from_secs(2)) {
            Ok(s) => return Ok(s),
            Err(source) if attempt >= cfg.connect_attempts.max(1) => {
                return Err(ClientError::Connect { endpoint, attempts: attempt, source })
            }
            Err(e) => {
                log::debug!("connect to {endpoint} failed ({e}), retrying in {backoff:?}");
                std::thread::sleep(backoff);
                backoff = (backoff * 2).min(Duration::from_secs(1));
            }
        }
    }
}

impl ClientSession {
    /// Connects to every rank owning a local cell of any field and performs
    /// the Hello/Welcome handshake.
    pub fn initialize(config: ClientConfig, fields: Vec<FieldSpec>) -> Result<Self, ClientError> {
        let map = PartitionMap::build(config.n_cells, config.endpoints.len() as u32)?;
        for f in &fields {
            if f.cells.is_empty() {
                return Err(ClientError::EmptyField(f.name.clone()));
            }
        }
        let mut rank_routes = Vec::new();
        for f in &fields {
            rank_routes.push(map.route(f.cells.clone())?);
        }
        let mut ranks: Vec<u32> = rank_routes.iter().flatten().map(|(r, _)| *r).collect();
        ranks.sort_unstable();
        ranks.dedup();

        let mut conns = Vec::with_capacity(ranks.len());
        for &rank in &ranks {
            let stream = connect_with_retry(&config, rank)?;
            stream.set_nodelay(true)?;
            let mut writer = BufWriter::with_capacity(1 << 16, stream.try_clone()?);
            let local: Vec<String> = fields.iter().map(|f| f.name.clone()).collect();
            let hello_cells = fields.iter().map(|f| f.cells.start).min().unwrap_or(0)
                ..fields.iter().map(|f| f.cells.end).max().unwrap_or(0);
            write_message(
                &mut writer,
                &Message::new(config.study_id.clone(), config.simulation_id, Body::Hello { cells: hello_cells, fields: local }),
            )?;
            writer.flush()?;
            let mut reader = stream.try_clone()?;
            reader.set_read_timeout(Some(config.ack_timeout))?;
            let welcome = read_message(&mut reader)?.ok_or_else(|| ClientError::Handshake {
                rank,
                reason: "connection closed before Welcome".into(),
            })?;
            if welcome.study_id != config.study_id {
                return Err(ClientError::StudyMismatch {
                    expected: config.study_id.clone(),
                    found: welcome.study_id,
                });
            }
            match welcome.body {
                Body::Welcome { rank: r, cells, .. } if r == rank && cells == map.range_of(rank) => {}
                Body::Welcome { rank: r, cells, .. } => {
                    return Err(ClientError::Handshake {
                        rank,
                        reason: format!("server rank {r} owns {cells:?}, partition expects {:?}", map.range_of(rank)),
                    })
                }
                other => {
                    return Err(ClientError::Handshake { rank, reason: format!("expected Welcome, got {other:?}") })
                }
            }
            conns.push(Connection { rank, writer, stream });
        }
        let routes = rank_routes
            .into_iter()
            .map(|rr| {
                rr.into_iter()
                    .map(|(rank, range)| (ranks.binary_search(&rank).unwrap(), range))
                    .collect()
            })
            .collect();
        Ok(ClientSession { config, fields, routes, conns, closed: false })
    }

    pub fn simulation_id(&self) -> u64 {
        self.config.simulation_id
    }

    /// Ranks this session is connected to.
    pub fn ranks(&self) -> Vec<u32> {
        self.conns.iter().map(|c| c.rank).collect()
    }

    /// Sends one timestep of `field` over its local cells, one Data message
    /// per owning rank.
    pub fn send(&mut self, timestep: u32, field: &str, values: &[f64]) -> Result<(), ClientError> {
        if self.closed {
            return Err(ClientError::Closed);
        }
        let fi = self
            .fields
            .iter()
            .position(|f| f.name == field)
            .ok_or_else(|| ClientError::UnknownField(field.into()))?;
        let cells = &self.fields[fi].cells;
        let expected = (cells.end - cells.start) as usize;
        if values.len() != expected {
            return Err(ClientError::LengthMismatch { field: field.into(), expected, got: values.len() });
        }
        for (ci, range) in &self.routes[fi] {
            let lo = (range.start - cells.start) as usize;
            let hi = (range.end - cells.start) as usize;
            let m = Message::new(
                self.config.study_id.clone(),
                self.config.simulation_id,
                Body::Data(DataChunk {
                    field: field.into(),
                    timestep,
                    offset: range.start,
                    values: values[lo..hi].to_vec(),
                }),
            );
            let w = &mut self.conns[*ci].writer;
            write_message(w, &m)?;
            w.flush()?;
        }
        Ok(())
    }

    /// Sends Goodbye to every rank and waits for each acknowledgement. A
    /// second call does nothing.
    pub fn finalize(&mut self) -> Result<(), ClientError> {
        if self.closed {
            return Ok(());
        }
        self.closed = true;
        let bye = Message::new(self.config.study_id.clone(), self.config.simulation_id, Body::Goodbye);
        for c in &mut self.conns {
            write_message(&mut c.writer, &bye)?;
            c.writer.flush()?;
        }
        for c in &mut self.conns {
            c.stream.set_read_timeout(Some(self.config.ack_timeout))?;
            loop {
                match read_message(&mut c.stream)? {
                    Some(Message { body: Body::Ack, .. }) => break,
                    Some(_) => continue,
                    None => {
                        return Err(ClientError::Handshake {
                            rank: c.rank,
                            reason: "connection closed before Goodbye was acknowledged".into(),
                        })
                    }
                }
            }
            let _ = c.stream.shutdown(std::net::Shutdown::Both);
        }
        Ok(())
    }
}

impl FieldSink for ClientSession {
    type Error = ClientError;

    fn send_field(&mut self, timestep: u32, field: &str, values: &[f64]) -> Result<(), ClientError> {
        self.send(timestep, field, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_list_parsing() {
        let v = parse_endpoints("127.0.0.1:4000, 127.0.0.1:4001,").unwrap();
        assert_eq!(v.len(), 2);
        assert!(parse_endpoints("nonsense").is_err());
    }

    #[test]
    fn empty_field_rejected_before_connecting() {
        let cfg = ClientConfig::new("s", 0, vec!["127.0.0.1:1".parse().unwrap()], 8);
        let err = ClientSession::initialize(cfg, vec![FieldSpec { name: "dye".into(), cells: 3..3 }]).unwrap_err();
        assert!(matches!(err, ClientError::EmptyField(_)));
    }

    #[test]
    fn unreachable_server_fails_after_budget() {
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
        let mut cfg = ClientConfig::new("s", 0, vec![port], 8);
        cfg.connect_attempts = 3;
        cfg.initial_backoff = Duration::from_millis(1);
        let err = ClientSession::initialize(cfg, vec![FieldSpec { name: "dye".into(), cells: 0..8 }]).unwrap_err();
        assert!(matches!(err, ClientError::Connect { attempts: 3, .. }), "{err}");
    }
}
