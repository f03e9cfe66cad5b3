//! Message logs: every Data message a rank worker consumed, in consumption
//! order, stored as concatenated protocol frames.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use crate::protocol::{read_message, Body, DataChunk};

use super::state::{RankState, StudyLayout};
use super::ServerError;

pub fn read_message_log(path: &Path) -> Result<Vec<(u64, DataChunk)>, ServerError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    while let Some(m) = read_message(&mut r)? {
        if let Body::Data(chunk) = m.body {
            out.push((m.simulation_id, chunk));
        }
    }
    Ok(out)
}

/// Applies the logged messages in their recorded order to a fresh rank.
pub fn replay_log(
    layout: &StudyLayout,
    rank: u32,
    log: &[(u64, DataChunk)],
) -> Result<RankState, ServerError> {
    let mut st = RankState::new(layout, rank)?;
    for (sim, chunk) in log {
        st.apply(*sim, chunk)?;
    }
    Ok(st)
}

/// Applies the logged messages sorted by (simulation, field, timestep). Any
/// two logs holding the same set of messages give bit-identical states.
pub fn replay_log_canonical(
    layout: &StudyLayout,
    rank: u32,
    log: &[(u64, DataChunk)],
) -> Result<RankState, ServerError> {
    let mut order: Vec<&(u64, DataChunk)> = log.iter().collect();
    order.sort_by(|a, b| {
        let key = |(s, c): &(u64, DataChunk)| (*s, layout.field_index(&c.field), c.timestep);
        key(a).cmp(&key(b))
    });
    let mut st = RankState::new(layout, rank)?;
    for (sim, chunk) in order {
        st.apply(*sim, chunk)?;
    }
    Ok(st)
}
