//! Per-rank checkpoint files.
//!
//! Layout (little-endian): magic `ENSC`, version byte, three zero bytes,
//! u64 body length, body, then a CRC-32 of everything before it. The body is
//! rank, epoch, layout hash, duplicate counter, ledger (key count + bit
//! words) and one section per field. Files are written to a temporary name,
//! synced, then renamed, so an epoch is either fully present or absent.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::wire::{ByteReader, ByteWriter};

use super::state::{RankState, StudyLayout};
use super::ServerError;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ENSC";
pub const CHECKPOINT_VERSION: u8 = 1;
const HEADER_LEN: usize = 16;

pub fn checkpoint_path(dir: &Path, rank: u32, epoch: u64) -> PathBuf {
    dir.join(format!("rank-{rank}-epoch-{epoch}.ckpt"))
}

pub fn encode_checkpoint(state: &RankState) -> Vec<u8> {
    let mut body = ByteWriter::new();
    state.encode_body(&mut body);
    let body = body.into_inner();
    let mut w = ByteWriter::with_capacity(body.len() + HEADER_LEN + 4);
    w.bytes(&CHECKPOINT_MAGIC);
    w.u8(CHECKPOINT_VERSION);
    w.bytes(&[0; 3]);
    w.u64(body.len() as u64);
    w.bytes(&body);
    let mut out = w.into_inner();
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Decodes a checkpoint for the rank described by `fresh`. No state is
/// produced unless the whole file verifies.
pub fn decode_checkpoint(bytes: &[u8], fresh: &RankState) -> Result<RankState, ServerError> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(ServerError::Checkpoint(format!("truncated: {} bytes", bytes.len())));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(ServerError::Checkpoint("bad magic".into()));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(ServerError::Checkpoint(format!(
            "version {}, expected {CHECKPOINT_VERSION}",
            bytes[4]
        )));
    }
    let body_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    if body_len != (bytes.len() - HEADER_LEN - 4) as u64 {
        return Err(ServerError::Checkpoint(format!(
            "truncated: header declares {body_len} body bytes, file holds {}",
            bytes.len() - HEADER_LEN - 4
        )));
    }
    let (content, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(content) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(ServerError::Checkpoint("checksum mismatch".into()));
    }
    let mut r = ByteReader::new(&content[HEADER_LEN..]);
    let state = fresh.decode_body(&mut r)?;
    if r.remaining() != 0 {
        return Err(ServerError::Checkpoint(format!("{} unread body bytes", r.remaining())));
    }
    Ok(state)
}

/// Writes `state` as epoch `state.epoch()` and removes epochs older than the
/// previous one.
pub fn write_checkpoint(dir: &Path, state: &RankState) -> Result<PathBuf, ServerError> {
    fs::create_dir_all(dir)?;
    let path = checkpoint_path(dir, state.rank(), state.epoch());
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode_checkpoint(state))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, &path)?;
    for old in epochs(dir, state.rank())? {
        if old + 1 < state.epoch() {
            let _ = fs::remove_file(checkpoint_path(dir, state.rank(), old));
        }
    }
    Ok(path)
}

/// Epochs present on disk for `rank`, ascending.
pub fn epochs(dir: &Path, rank: u32) -> Result<Vec<u64>, ServerError> {
    let prefix = format!("rank-{rank}-epoch-");
    let mut out = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e.into()),
    };
    for entry in entries {
        let name = entry?.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(epoch) = name
            .strip_prefix(&prefix)
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<u64>().ok())
        {
            out.push(epoch);
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Latest checkpoint of every rank, or fresh states for ranks with none.
pub fn restore_ranks(dir: &Path, layout: &StudyLayout) -> Result<Vec<RankState>, ServerError> {
    (0..layout.n_ranks)
        .map(|rank| {
            let fresh = RankState::new(layout, rank)?;
            match epochs(dir, rank)?.last() {
                None => Ok(fresh),
                Some(&epoch) => {
                    let path = checkpoint_path(dir, rank, epoch);
                    let bytes = fs::read(&path)?;
                    decode_checkpoint(&bytes, &fresh).map_err(|e| match e {
                        ServerError::Checkpoint(m) => {
                            ServerError::Checkpoint(format!("{}: {m}", path.display()))
                        }
                        other => other,
                    })
                }
            }
        })
        .collect()
}

/// Simulations fully recorded in the latest checkpoints of all ranks.
pub fn completed_in_checkpoint(dir: &Path, layout: &StudyLayout) -> Result<Vec<u64>, ServerError> {
    let ranks = restore_ranks(dir, layout)?;
    Ok((0..layout.n_sims)
        .filter(|&s| ranks.iter().all(|r| r.ledger().sim_complete(s)))
        .collect())
}
