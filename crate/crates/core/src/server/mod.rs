//! Partitioned statistics server.
//!
//! Each rank owns one contiguous cell block, consumes Data messages from a
//! bounded queue in arrival order, and never talks to other ranks. A ledger
//! of (simulation, field, timestep) keys makes replays after restarts
//! harmless.

mod checkpoint;
mod replay;
mod runtime;
mod state;

use std::io;

pub use checkpoint::{
    checkpoint_path, completed_in_checkpoint, decode_checkpoint, encode_checkpoint, epochs,
    restore_ranks, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use replay::{read_message_log, replay_log, replay_log_canonical};
pub use runtime::{
    read_endpoints, run_server, start_server, ExitReason, HeartbeatTarget, ServerConfig,
    ServerExit, ServerHandle, ServerOutcome,
};
pub use state::{ApplyOutcome, Ledger, RankState, StudyLayout};

use crate::field_stats::FieldError;
use crate::protocol::CodecError;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("invalid server configuration: {0}")]
    Config(String),
    #[error("I/O: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("export: {0}")]
    Export(String),
}
