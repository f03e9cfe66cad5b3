use std::ops::Range;

use crate::field_stats::{FieldError, FieldStatistics};
use crate::protocol::{DataChunk, PartitionMap};
use crate::stats::StatisticsConfig;
use crate::wire::{ByteReader, ByteWriter};

use super::ServerError;

/// Study shape shared by every rank. Everything that determines the layout
/// of per-rank state lives here and feeds the checkpoint config hash.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StudyLayout {
    pub study_id: String,
    pub n_cells: u64,
    pub n_timesteps: u32,
    pub fields: Vec<String>,
    /// Simulation ids are `0..n_sims`.
    pub n_sims: u64,
    pub n_ranks: u32,
    pub stats: StatisticsConfig,
}

impl StudyLayout {
    pub fn validate(&self) -> Result<(), ServerError> {
        let bad = |m: String| Err(ServerError::Config(m));
        if self.study_id.is_empty() || self.study_id.len() > 256 {
            return bad("study id must be 1..=256 bytes".into());
        }
        if self.n_timesteps == 0 || self.n_sims == 0 {
            return bad("timesteps and simulations must be positive".into());
        }
        if self.fields.is_empty() {
            return bad("at least one field is required".into());
        }
        let mut names = self.fields.clone();
        names.sort();
        names.dedup();
        if names.len() != self.fields.len() || self.fields.iter().any(|f| f.is_empty() || f.len() > 256) {
            return bad("field names must be unique and 1..=256 bytes".into());
        }
        self.partition()?;
        let mut stats = self.stats.clone();
        stats.declared_n = self.n_sims.max(2);
        stats.validate().map_err(|e| ServerError::Config(e.to_string()))?;
        self.ledger_len()?;
        Ok(())
    }

    pub fn partition(&self) -> Result<PartitionMap, ServerError> {
        PartitionMap::build(self.n_cells, self.n_ranks).map_err(|e| ServerError::Config(e.to_string()))
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f == name)
    }

    fn ledger_len(&self) -> Result<u64, ServerError> {
        self.n_sims
            .checked_mul(self.fields.len() as u64)
            .and_then(|v| v.checked_mul(self.n_timesteps as u64))
            .filter(|&v| v <= 1 << 40)
            .ok_or_else(|| ServerError::Config("ledger would exceed 2^40 keys".into()))
    }

    /// Messages each rank expects over a complete study.
    pub fn keys_per_rank(&self) -> u64 {
        self.n_sims * self.fields.len() as u64 * self.n_timesteps as u64
    }

    pub fn config_hash(&self) -> u32 {
        crc32fast::hash(&serde_json::to_vec(self).expect("layout serializes"))
    }
}

/// Processed-message marks keyed by (simulation, field, timestep).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ledger {
    n_fields: u64,
    n_timesteps: u64,
    n_keys: u64,
    marked: u64,
    words: Vec<u64>,
}

impl Ledger {
    pub fn new(n_sims: u64, n_fields: usize, n_timesteps: u32) -> Self {
        let n_keys = n_sims * n_fields as u64 * n_timesteps as u64;
        Ledger {
            n_fields: n_fields as u64,
            n_timesteps: n_timesteps as u64,
            n_keys,
            marked: 0,
            words: vec![0; n_keys.div_ceil(64) as usize],
        }
    }

    fn key(&self, sim: u64, field: usize, timestep: u32) -> u64 {
        (sim * self.n_fields + field as u64) * self.n_timesteps + timestep as u64
    }

    pub fn contains(&self, sim: u64, field: usize, timestep: u32) -> bool {
        let k = self.key(sim, field, timestep);
        self.words[(k / 64) as usize] >> (k % 64) & 1 == 1
    }

    /// Returns false when the key was already present.
    pub fn mark(&mut self, sim: u64, field: usize, timestep: u32) -> bool {
        let k = self.key(sim, field, timestep);
        let (w, b) = ((k / 64) as usize, k % 64);
        if self.words[w] >> b & 1 == 1 {
            return false;
        }
        self.words[w] |= 1 << b;
        self.marked += 1;
        true
    }

    pub fn len(&self) -> u64 {
        self.marked
    }

    pub fn is_empty(&self) -> bool {
        self.marked == 0
    }

    pub fn is_full(&self) -> bool {
        self.marked == self.n_keys
    }

    pub fn sim_complete(&self, sim: u64) -> bool {
        let per_sim = self.n_fields * self.n_timesteps;
        (sim * per_sim..(sim + 1) * per_sim).all(|k| self.words[(k / 64) as usize] >> (k % 64) & 1 == 1)
    }

    pub(crate) fn encode(&self, w: &mut ByteWriter) {
        w.u64(self.n_keys);
        w.u64s(&self.words);
    }

    pub(crate) fn decode(r: &mut ByteReader<'_>, like: &Ledger) -> Result<Ledger, ServerError> {
        let n_keys = r.u64().map_err(|_| ServerError::Checkpoint("truncated ledger".into()))?;
        if n_keys != like.n_keys {
            return Err(ServerError::Checkpoint(format!(
                "ledger holds {n_keys} keys, layout expects {}",
                like.n_keys
            )));
        }
        let words = r
            .u64s(like.words.len())
            .map_err(|_| ServerError::Checkpoint("truncated ledger".into()))?;
        if n_keys % 64 != 0 && words.last().is_some_and(|w| w >> (n_keys % 64) != 0) {
            return Err(ServerError::Checkpoint("ledger marks beyond key space".into()));
        }
        let marked = words.iter().map(|w| w.count_ones() as u64).sum();
        Ok(Ledger { words, marked, ..like.clone() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyOutcome {
    Applied,
    Duplicate,
}

/// State owned by one server rank: accumulators for its cell block and the
/// ledger of messages already folded in.
#[derive(Debug, Clone, PartialEq)]
pub struct RankState {
    rank: u32,
    cells: Range<u64>,
    layout_hash: u32,
    n_sims: u64,
    fields: Vec<FieldStatistics>,
    field_names: Vec<String>,
    ledger: Ledger,
    duplicates: u64,
    epoch: u64,
}

impl RankState {
    pub fn new(layout: &StudyLayout, rank: u32) -> Result<Self, ServerError> {
        layout.validate()?;
        let map = layout.partition()?;
        if rank >= layout.n_ranks {
            return Err(ServerError::Config(format!("rank {rank} >= {}", layout.n_ranks)));
        }
        let cells = map.range_of(rank);
        // each position sees one sample per simulation; a one-simulation
        // study never takes a step, so N = 2 is as good as any
        let mut stats = layout.stats.clone();
        stats.declared_n = layout.n_sims.max(2);
        Ok(RankState {
            rank,
            layout_hash: layout.config_hash(),
            n_sims: layout.n_sims,
            fields: layout
                .fields
                .iter()
                .map(|f| FieldStatistics::new(f.clone(), cells.clone(), layout.n_timesteps, stats.clone()))
                .collect(),
            field_names: layout.fields.clone(),
            ledger: Ledger::new(layout.n_sims, layout.fields.len(), layout.n_timesteps),
            cells,
            duplicates: 0,
            epoch: 0,
        })
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn cells(&self) -> Range<u64> {
        self.cells.clone()
    }

    pub fn fields(&self) -> &[FieldStatistics] {
        &self.fields
    }

    pub fn field(&self, name: &str) -> Option<&FieldStatistics> {
        self.fields.iter().find(|f| f.name() == name)
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn duplicates_discarded(&self) -> u64 {
        self.duplicates
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn is_complete(&self) -> bool {
        self.ledger.is_full()
    }

    /// Simulations whose every (field, timestep) message reached this rank.
    pub fn completed_sims(&self) -> Vec<u64> {
        (0..self.n_sims).filter(|&s| self.ledger.sim_complete(s)).collect()
    }

    /// Folds one Data message into the rank's statistics unless its ledger
    /// key is already marked. A chunk must cover this rank's whole block.
    pub fn apply(&mut self, sim: u64, chunk: &DataChunk) -> Result<ApplyOutcome, ServerError> {
        if sim >= self.n_sims {
            return Err(ServerError::Protocol(format!("simulation id {sim} >= {}", self.n_sims)));
        }
        let f = self
            .field_names
            .iter()
            .position(|n| *n == chunk.field)
            .ok_or_else(|| ServerError::Protocol(format!("unknown field {:?}", chunk.field)))?;
        if chunk.offset != self.cells.start || chunk.values.len() as u64 != self.cells.end - self.cells.start {
            return Err(ServerError::Protocol(format!(
                "chunk [{}, +{}) does not cover rank block [{}, {})",
                chunk.offset,
                chunk.values.len(),
                self.cells.start,
                self.cells.end
            )));
        }
        if chunk.timestep >= self.fields[f].n_timesteps() {
            return Err(FieldError::TimestepOutOfRange {
                timestep: chunk.timestep,
                n_timesteps: self.fields[f].n_timesteps(),
            }
            .into());
        }
        if self.ledger.contains(sim, f, chunk.timestep) {
            self.duplicates += 1;
            return Ok(ApplyOutcome::Duplicate);
        }
        // ingest validates the whole chunk before mutating, so a rejected
        // chunk leaves no mark and no partial update
        self.fields[f].ingest_chunk(chunk.timestep, chunk.offset, &chunk.values)?;
        self.ledger.mark(sim, f, chunk.timestep);
        Ok(ApplyOutcome::Applied)
    }

    pub(crate) fn encode_body(&self, w: &mut ByteWriter) {
        w.u32(self.rank);
        w.u64(self.epoch);
        w.u32(self.layout_hash);
        w.u64(self.duplicates);
        self.ledger.encode(w);
        w.u32(self.fields.len() as u32);
        for f in &self.fields {
            f.encode(w);
        }
    }

    /// Replaces this (fresh) state with the decoded body, which must have
    /// been produced for the same layout and rank.
    pub(crate) fn decode_body(&self, r: &mut ByteReader<'_>) -> Result<RankState, ServerError> {
        let trunc = |_| ServerError::Checkpoint("truncated rank state".into());
        let rank = r.u32().map_err(trunc)?;
        let epoch = r.u64().map_err(trunc)?;
        let hash = r.u32().map_err(trunc)?;
        let duplicates = r.u64().map_err(trunc)?;
        if rank != self.rank {
            return Err(ServerError::Checkpoint(format!("file is for rank {rank}, expected {}", self.rank)));
        }
        if hash != self.layout_hash {
            return Err(ServerError::Checkpoint("study layout differs from checkpoint".into()));
        }
        let ledger = Ledger::decode(r, &self.ledger)?;
        let n = r.u32().map_err(trunc)? as usize;
        if n != self.fields.len() {
            return Err(ServerError::Checkpoint(format!("{n} fields in file, {} expected", self.fields.len())));
        }
        let mut fields = Vec::with_capacity(n);
        for like in &self.fields {
            let f = FieldStatistics::decode(r, like.config())
                .map_err(|e| ServerError::Checkpoint(e.to_string()))?;
            if f.name() != like.name() || f.cell_range() != like.cell_range() || f.n_timesteps() != like.n_timesteps() {
                return Err(ServerError::Checkpoint(format!("field {:?} shape mismatch", f.name())));
            }
            fields.push(f);
        }
        Ok(RankState {
            fields,
            ledger,
            duplicates,
            epoch,
            ..self.clone_shape()
        })
    }

    fn clone_shape(&self) -> RankState {
        RankState {
            rank: self.rank,
            cells: self.cells.clone(),
            layout_hash: self.layout_hash,
            n_sims: self.n_sims,
            fields: Vec::new(),
            field_names: self.field_names.clone(),
            ledger: self.ledger.clone(),
            duplicates: 0,
            epoch: 0,
        }
    }

    pub(crate) fn set_epoch(&mut self, epoch: u64) {
        self.epoch = epoch;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn layout(n_cells: u64, ranks: u32, sims: u64, t: u32) -> StudyLayout {
        StudyLayout {
            study_id: "s".into(),
            n_cells,
            n_timesteps: t,
            fields: vec!["dye".into()],
            n_sims: sims,
            n_ranks: ranks,
            stats: StatisticsConfig::new(vec![0.25, 0.5, 0.75], sims),
        }
    }

    fn chunk(state: &RankState, t: u32, v: f64) -> DataChunk {
        let r = state.cells();
        DataChunk {
            field: "dye".into(),
            timestep: t,
            offset: r.start,
            values: vec![v; (r.end - r.start) as usize],
        }
    }

    #[test]
    fn ledger_marks_once() {
        let mut l = Ledger::new(3, 2, 5);
        assert!(l.mark(2, 1, 4));
        assert!(!l.mark(2, 1, 4));
        assert!(l.contains(2, 1, 4) && !l.contains(2, 0, 4));
        assert_eq!(l.len(), 1);
        for f in 0..2 {
            for t in 0..5 {
                l.mark(1, f, t);
            }
        }
        assert!(l.sim_complete(1) && !l.sim_complete(2));
    }

    #[test]
    fn two_sims_three_steps_counts() {
        let lay = layout(8, 2, 2, 3);
        let mut ranks: Vec<RankState> = (0..2).map(|r| RankState::new(&lay, r).unwrap()).collect();
        for sim in 0..2 {
            for t in 0..3 {
                for st in &mut ranks {
                    let c = chunk(st, t, sim as f64);
                    assert_eq!(st.apply(sim, &c).unwrap(), ApplyOutcome::Applied);
                }
            }
        }
        for st in &ranks {
            assert!(st.is_complete());
            assert_eq!(st.completed_sims(), vec![0, 1]);
            for cell in st.cells() {
                for t in 0..3 {
                    assert_eq!(st.fields()[0].count(cell, t), 2);
                }
            }
        }
    }

    #[test]
    fn duplicate_is_discarded() {
        let lay = layout(8, 2, 2, 3);
        let mut st = RankState::new(&lay, 1).unwrap();
        let c = chunk(&st, 1, 0.5);
        st.apply(0, &c).unwrap();
        let before = st.clone();
        assert_eq!(st.apply(0, &c).unwrap(), ApplyOutcome::Duplicate);
        assert_eq!(st.fields(), before.fields());
        assert_eq!(st.duplicates_discarded(), 1);
    }

    #[test]
    fn rejects_bad_messages_without_marking() {
        let lay = layout(8, 2, 2, 3);
        let mut st = RankState::new(&lay, 0).unwrap();
        let mut c = chunk(&st, 0, 1.0);
        c.values[2] = f64::NAN;
        assert!(st.apply(0, &c).is_err());
        assert!(st.ledger().is_empty());
        let mut c = chunk(&st, 0, 1.0);
        c.offset = 1;
        assert!(st.apply(0, &c).is_err());
        let c = chunk(&st, 3, 1.0);
        assert!(st.apply(0, &c).is_err());
        let c = chunk(&st, 0, 1.0);
        assert!(st.apply(2, &c).is_err());
        let mut c = chunk(&st, 0, 1.0);
        c.field = "other".into();
        assert!(st.apply(0, &c).is_err());
        assert!(st.ledger().is_empty());
    }

    #[test]
    fn body_round_trip() {
        let lay = layout(9, 2, 3, 2);
        let mut st = RankState::new(&lay, 1).unwrap();
        st.apply(2, &chunk(&st, 1, 0.3)).unwrap();
        st.apply(0, &chunk(&st, 1, 0.7)).unwrap();
        st.apply(0, &chunk(&st, 1, 0.7)).unwrap();
        st.set_epoch(4);
        let mut w = ByteWriter::new();
        st.encode_body(&mut w);
        let bytes = w.into_inner();
        let fresh = RankState::new(&lay, 1).unwrap();
        let back = fresh.decode_body(&mut ByteReader::new(&bytes)).unwrap();
        assert_eq!(back, st);
        let other = RankState::new(&lay, 0).unwrap();
        assert!(other.decode_body(&mut ByteReader::new(&bytes)).is_err());
        let mut lay2 = lay.clone();
        lay2.study_id = "t".into();
        let fresh2 = RankState::new(&lay2, 1).unwrap();
        assert!(fresh2.decode_body(&mut ByteReader::new(&bytes)).is_err());
    }
}
