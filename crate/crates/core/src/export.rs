//! On-disk statistic exports and the queries run against them.
//!
//! Layout: `manifest.json` at the root and one `{field}/{statistic}.bin` per
//! exported statistic. A statistic file is magic `ENSF`, a version byte,
//! three zero bytes, u64 cell count, u32 timestep count, u16-prefixed UTF-8
//! statistic name, then `n_timesteps * n_cells` little-endian f64 values in
//! timestep-major, global-cell order.

use std::fs;
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::field_stats::Statistic;
use crate::server::{RankState, StudyLayout};
use crate::wire::{ByteReader, ByteWriter};

pub const EXPORT_MAGIC: [u8; 4] = *b"ENSF";
pub const EXPORT_VERSION: u8 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("I/O on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed export file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("statistic {0} was not exported")]
    Missing(String),
    #[error("unknown field {0:?}")]
    UnknownField(String),
    #[error("cell {cell} outside mesh of {n_cells} cells")]
    UnknownCell { cell: u64, n_cells: u64 },
    #[error("timestep {timestep} outside 0..{n_timesteps}")]
    UnknownTimestep { timestep: u32, n_timesteps: u32 },
    #[error("export is incomplete: some positions have fewer than {expected} samples")]
    Incomplete { expected: u64 },
    #[error("statistics: {0}")]
    Statistics(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExportError + '_ {
    move |source| ExportError::Io { path: path.to_owned(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    /// Adjacent (alpha_i, alpha_i+1) pairs compared.
    pub checked: u64,
    /// Pairs where the higher-order estimate is below the lower one.
    pub violations: u64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldManifest {
    pub name: String,
    pub statistics: Vec<String>,
    pub quantile_monotonicity: MonotonicityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub study_id: String,
    pub n_cells: u64,
    pub n_timesteps: u32,
    pub expected_count: u64,
    /// Every position of every field holds exactly `expected_count` samples.
    pub complete: bool,
    pub fields: Vec<FieldManifest>,
}

impl ExportManifest {
    pub fn field(&self, name: &str) -> Result<&FieldManifest, ExportError> {
        self.fields
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| ExportError::UnknownField(name.into()))
    }
}

/// One decoded statistic file.
#[derive(Debug, Clone, PartialEq)]
pub struct StatField {
    pub name: String,
    pub n_cells: u64,
    pub n_timesteps: u32,
    /// `values[t * n_cells + cell]`
    pub values: Vec<f64>,
}

impl StatField {
    pub fn at(&self, timestep: u32) -> &[f64] {
        let n = self.n_cells as usize;
        &self.values[timestep as usize * n..(timestep as usize + 1) * n]
    }
}

pub fn encode_stat_field(f: &StatField) -> Vec<u8> {
    let mut w = ByteWriter::with_capacity(f.values.len() * 8 + 32 + f.name.len());
    w.bytes(&EXPORT_MAGIC);
    w.u8(EXPORT_VERSION);
    w.bytes(&[0; 3]);
    w.u64(f.n_cells);
    w.u32(f.n_timesteps);
    w.str(&f.name);
    w.f64s(&f.values);
    w.into_inner()
}

pub fn decode_stat_field(bytes: &[u8]) -> Result<StatField, String> {
    let mut r = ByteReader::new(bytes);
    let short = |s: crate::wire::Short| format!("truncated: needed {} bytes, {} left", s.needed, s.available);
    if r.take(4).map_err(short)? != EXPORT_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u8().map_err(short)?;
    if version != EXPORT_VERSION {
        return Err(format!("version {version}, expected {EXPORT_VERSION}"));
    }
    r.take(3).map_err(short)?;
    let n_cells = r.u64().map_err(short)?;
    let n_timesteps = r.u32().map_err(short)?;
    let name = r.str().map_err(short)?.ok_or("name is not UTF-8")?;
    let n = n_cells
        .checked_mul(n_timesteps as u64)
        .and_then(|n| usize::try_from(n).ok())
        .ok_or("dimensions overflow")?;
    let values = r.f64s(n).map_err(short)?;
    if r.remaining() != 0 {
        return Err(format!("{} trailing bytes", r.remaining()));
    }
    Ok(StatField { name, n_cells, n_timesteps, values })
}

fn stat_path(dir: &Path, field: &str, stat: &str) -> PathBuf {
    dir.join(field).join(format!("{stat}.bin"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ExportError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Assembles global fields from per-rank states (ordered by rank) and writes
/// every statistic plus the manifest. Positions lacking samples read NaN.
pub fn export_statistics(
    dir: &Path,
    layout: &StudyLayout,
    ranks: &[RankState],
) -> Result<ExportManifest, ExportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut fields = Vec::new();
    let mut complete = true;
    for name in &layout.fields {
        let parts: Vec<_> = ranks
            .iter()
            .map(|r| r.field(name).ok_or_else(|| ExportError::UnknownField(name.clone())))
            .collect::<Result<_, _>>()?;
        let fdir = dir.join(name);
        fs::create_dir_all(&fdir).map_err(io_err(&fdir))?;
        let stats = parts[0].statistics();
        for &stat in &stats {
            let mut values = Vec::with_capacity(layout.n_cells as usize * layout.n_timesteps as usize);
            for t in 0..layout.n_timesteps {
                for p in &parts {
                    let snap = p
                        .snapshot_partial(stat, t)
                        .map_err(|e| ExportError::Statistics(e.to_string()))?;
                    values.extend_from_slice(&snap);
                }
            }
            if stat == Statistic::Count {
                complete &= values.iter().all(|&c| c == layout.n_sims as f64);
            }
            let f = StatField {
                name: stat.to_string(),
                n_cells: layout.n_cells,
                n_timesteps: layout.n_timesteps,
                values,
            };
            write_atomic(&stat_path(dir, name, &f.name), &encode_stat_field(&f))?;
        }
        let mut orders = layout.stats.quantile_orders.clone();
        orders.sort_by(f64::total_cmp);
        let report = monotonicity_from_dir(dir, name, layout.n_cells, layout.n_timesteps, &orders)?;
        fields.push(FieldManifest {
            name: name.clone(),
            statistics: stats.iter().map(|s| s.to_string()).collect(),
            quantile_monotonicity: report,
        });
    }
    let manifest = ExportManifest {
        study_id: layout.study_id.clone(),
        n_cells: layout.n_cells,
        n_timesteps: layout.n_timesteps,
        expected_count: layout.n_sims,
        complete,
        fields,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

fn monotonicity_from_dir(
    dir: &Path,
    field: &str,
    n_cells: u64,
    n_timesteps: u32,
    sorted_orders: &[f64],
) -> Result<MonotonicityReport, ExportError> {
    let mut prev: Option<StatField> = None;
    let (mut checked, mut violations) = (0u64, 0u64);
    for &a in sorted_orders {
        let cur = read_stat_file(&stat_path(dir, field, &Statistic::Quantile(a).to_string()))?;
        if let Some(p) = &prev {
            for (lo, hi) in p.values.iter().zip(&cur.values) {
                checked += 1;
                if hi < lo {
                    violations += 1;
                }
            }
        }
        prev = Some(cur);
    }
    debug_assert!(checked == 0 || checked == (sorted_orders.len() as u64 - 1) * n_cells * n_timesteps as u64);
    Ok(MonotonicityReport {
        checked,
        violations,
        rate: if checked == 0 { 0.0 } else { violations as f64 / checked as f64 },
    })
}

pub fn read_stat_file(path: &Path) -> Result<StatField, ExportError> {
    let bytes = fs::read(path).map_err(|source| {
        if source.kind() == io::ErrorKind::NotFound {
            ExportError::Missing(path.display().to_string())
        } else {
            ExportError::Io { path: path.to_owned(), source }
        }
    })?;
    decode_stat_field(&bytes).map_err(|reason| ExportError::Format { path: path.to_owned(), reason })
}

/// Reads single timesteps of a stat file without loading all of it.
#[derive(Debug)]
pub struct StatFileReader {
    file: fs::File,
    path: PathBuf,
    pub name: String,
    pub n_cells: u64,
    pub n_timesteps: u32,
    data_offset: u64,
}

impl StatFileReader {
    pub fn open(path: &Path) -> Result<Self, ExportError> {
        let format = |reason: String| ExportError::Format { path: path.to_owned(), reason };
        let mut file = fs::File::open(path).map_err(io_err(path))?;
        let mut head = [0u8; 22];
        file.read_exact(&mut head).map_err(|e| format(e.to_string()))?;
        let name_len = u16::from_le_bytes([head[20], head[21]]) as usize;
        let mut prefix = head.to_vec();
        prefix.resize(22 + name_len, 0);
        file.read_exact(&mut prefix[22..]).map_err(|e| format(e.to_string()))?;
        // decode the header as an empty field, then check the real size
        let mut r = ByteReader::new(&prefix);
        let short = |_| format("truncated header".into());
        if r.take(4).map_err(short)? != EXPORT_MAGIC || r.u8().map_err(short)? != EXPORT_VERSION {
            return Err(format("bad magic or version".into()));
        }
        r.take(3).map_err(short)?;
        let n_cells = r.u64().map_err(short)?;
        let n_timesteps = r.u32().map_err(short)?;
        let name = r.str().map_err(short)?.ok_or_else(|| format("name is not UTF-8".into()))?;
        let data_offset = prefix.len() as u64;
        let len = file.metadata().map_err(io_err(path))?.len();
        let want = n_cells.checked_mul(n_timesteps as u64).and_then(|n| n.checked_mul(8));
        if want.and_then(|w| w.checked_add(data_offset)) != Some(len) {
            return Err(format(format!("size {len} does not match {n_cells} cells x {n_timesteps} timesteps")));
        }
        Ok(StatFileReader { file, path: path.to_owned(), name, n_cells, n_timesteps, data_offset })
    }

    pub fn read_timestep(&mut self, timestep: u32) -> Result<Vec<f64>, ExportError> {
        if timestep >= self.n_timesteps {
            return Err(ExportError::UnknownTimestep { timestep, n_timesteps: self.n_timesteps });
        }
        let n = self.n_cells as usize;
        let mut buf = vec![0u8; n * 8];
        let at = self.data_offset + timestep as u64 * n as u64 * 8;
        self.file
            .seek(SeekFrom::Start(at))
            .and_then(|_| self.file.read_exact(&mut buf))
            .map_err(io_err(&self.path))?;
        Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn load_manifest(dir: &Path) -> Result<ExportManifest, ExportError> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    serde_json::from_slice(&bytes).map_err(|e| ExportError::Format { path, reason: e.to_string() })
}

/// Reads one statistic of `field` from an export directory.
pub fn read_statistic(dir: &Path, field: &str, stat: Statistic) -> Result<StatField, ExportError> {
    let manifest = load_manifest(dir)?;
    let fm = manifest.field(field)?;
    let name = find_statistic(fm, stat).ok_or_else(|| ExportError::Missing(stat.to_string()))?;
    read_stat_file(&stat_path(dir, field, &name))
}

fn find_statistic(fm: &FieldManifest, want: Statistic) -> Option<String> {
    fm.statistics.iter().find_map(|s| {
        let have: Statistic = s.parse().ok()?;
        let hit = match (have, want) {
            (Statistic::Quantile(a), Statistic::Quantile(b))
            | (Statistic::Exceedance(a), Statistic::Exceedance(b)) => (a - b).abs() <= 1e-12,
            (a, b) => a == b,
        };
        hit.then(|| s.clone())
    })
}

fn quantile_orders(fm: &FieldManifest) -> Vec<f64> {
    let mut v: Vec<f64> = fm
        .statistics
        .iter()
        .filter_map(|s| match s.parse() {
            Ok(Statistic::Quantile(a)) => Some(a),
            _ => None,
        })
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub timestep: u32,
    pub alpha: f64,
    pub value: f64,
}

/// Every exported quantile at one cell, ordered by timestep then alpha.
pub fn probe(dir: &Path, field: &str, cell: u64) -> Result<Vec<ProbeRow>, ExportError> {
    let manifest = load_manifest(dir)?;
    if !manifest.complete {
        return Err(ExportError::Incomplete { expected: manifest.expected_count });
    }
    if cell >= manifest.n_cells {
        return Err(ExportError::UnknownCell { cell, n_cells: manifest.n_cells });
    }
    let fm = manifest.field(field)?;
    let orders = quantile_orders(fm);
    let files = orders
        .iter()
        .map(|&a| read_stat_file(&stat_path(dir, field, &Statistic::Quantile(a).to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::with_capacity(orders.len() * manifest.n_timesteps as usize);
    for t in 0..manifest.n_timesteps {
        for (a, f) in orders.iter().zip(&files) {
            rows.push(ProbeRow { timestep: t, alpha: *a, value: f.at(t)[cell as usize] });
        }
    }
    Ok(rows)
}

/// Per-cell `q_upper - q_lower` at one timestep, clamped at zero since
/// independently updated estimators may cross.
pub fn inter_percentile_range(
    dir: &Path,
    field: &str,
    lower: f64,
    upper: f64,
    timestep: u32,
) -> Result<Vec<f64>, ExportError> {
    let lo = read_statistic(dir, field, Statistic::Quantile(lower))?;
    let hi = read_statistic(dir, field, Statistic::Quantile(upper))?;
    if timestep >= lo.n_timesteps {
        return Err(ExportError::UnknownTimestep { timestep, n_timesteps: lo.n_timesteps });
    }
    Ok(lo.at(timestep).iter().zip(hi.at(timestep)).map(|(l, h)| (h - l).max(0.0)).collect())
}

/// Writes `cell,timestep,statistic,value` rows for every statistic of
/// `field`; returns the number of data rows.
pub fn write_csv(dir: &Path, field: &str, out: &mut impl Write) -> Result<u64, ExportError> {
    let manifest = load_manifest(dir)?;
    let fm = manifest.field(field)?;
    let werr = |source| ExportError::Io { path: PathBuf::from("<csv output>"), source };
    writeln!(out, "cell,timestep,statistic,value").map_err(werr)?;
    let mut rows = 0;
    for stat in &fm.statistics {
        let f = read_stat_file(&stat_path(dir, field, stat))?;
        for t in 0..f.n_timesteps {
            for (cell, v) in f.at(t).iter().enumerate() {
                writeln!(out, "{cell},{t},{stat},{v}").map_err(werr)?;
                rows += 1;
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::DataChunk;
    use crate::stats::StatisticsConfig;

    fn layout() -> StudyLayout {
        StudyLayout {
            study_id: "ex".into(),
            n_cells: 5,
            n_timesteps: 2,
            fields: vec!["dye".into()],
            n_sims: 3,
            n_ranks: 2,
            stats: StatisticsConfig {
                thresholds: vec![0.5],
                ..StatisticsConfig::new(vec![0.25, 0.5, 0.75], 3)
            },
        }
    }

    fn run(layout: &StudyLayout, sims: u64, value: impl Fn(u64, u32, u64) -> f64) -> Vec<RankState> {
        let mut ranks: Vec<RankState> = (0..layout.n_ranks).map(|r| RankState::new(layout, r).unwrap()).collect();
        for sim in 0..sims {
            for t in 0..layout.n_timesteps {
                for st in &mut ranks {
                    let c = st.cells();
                    let values = c.clone().map(|cell| value(sim, t, cell)).collect();
                    st.apply(sim, &DataChunk { field: "dye".into(), timestep: t, offset: c.start, values }).unwrap();
                }
            }
        }
        ranks
    }

    #[test]
    fn stat_file_round_trip_bit_exact() {
        let f = StatField {
            name: "quantile-0.5".into(),
            n_cells: 3,
            n_timesteps: 2,
            values: vec![0.1, -0.0, f64::NAN, 1e300, f64::MIN_POSITIVE, 7.0],
        };
        let bytes = encode_stat_field(&f);
        let back = decode_stat_field(&bytes).unwrap();
        assert_eq!(back.name, f.name);
        assert!(back.values.iter().zip(&f.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        for cut in 0..bytes.len() {
            assert!(decode_stat_field(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn export_assembles_ranks_and_queries() {
        let dir = tempfile::tempdir().unwrap();
        let lay = layout();
        let ranks = run(&lay, 3, |sim, t, cell| (sim as f64 + 1.0) * 0.1 * (cell + t as u64) as f64);
        let m = export_statistics(dir.path(), &lay, &ranks).unwrap();
        assert!(m.complete);
        assert_eq!(m.fields[0].statistics.len(), 7 + 1 + 3);
        let count = read_statistic(dir.path(), "dye", Statistic::Count).unwrap();
        assert!(count.values.iter().all(|&c| c == 3.0));
        let mean = read_statistic(dir.path(), "dye", Statistic::Mean).unwrap();
        // mean over sims of (s+1)*0.1*(cell+t) = 0.2*(cell+t)
        for t in 0..2u32 {
            for cell in 0..5u64 {
                let want = 0.2 * (cell + t as u64) as f64;
                assert!((mean.at(t)[cell as usize] - want).abs() < 1e-12);
            }
        }
        let rows = probe(dir.path(), "dye", 4).unwrap();
        assert_eq!(rows.len(), 2 * 3);
        assert!(rows.windows(2).all(|w| w[0].timestep < w[1].timestep || w[0].alpha < w[1].alpha));
        assert!(matches!(probe(dir.path(), "dye", 5), Err(ExportError::UnknownCell { .. })));
        let same = inter_percentile_range(dir.path(), "dye", 0.5, 0.5, 1).unwrap();
        assert!(same.iter().all(|&v| v == 0.0));
        let r = inter_percentile_range(dir.path(), "dye", 0.25, 0.75, 1).unwrap();
        assert!(r.iter().all(|&v| v >= 0.0));
        assert!(matches!(
            inter_percentile_range(dir.path(), "dye", 0.05, 0.95, 0),
            Err(ExportError::Missing(_))
        ));
        let mut csv = Vec::new();
        let n = write_csv(dir.path(), "dye", &mut csv).unwrap();
        assert_eq!(n, 5 * 2 * 11);
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count() as u64, n + 1);
        assert!(text.starts_with("cell,timestep,statistic,value\n"));
    }

    #[test]
    fn zero_field_probe_is_zero_and_incomplete_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let lay = layout();
        let ranks = run(&lay, 3, |_, _, _| 0.0);
        let m = export_statistics(dir.path(), &lay, &ranks).unwrap();
        assert_eq!(m.fields[0].quantile_monotonicity.violations, 0);
        assert!(probe(dir.path(), "dye", 2).unwrap().iter().all(|r| r.value == 0.0));

        let dir2 = tempfile::tempdir().unwrap();
        let partial = run(&lay, 2, |_, _, _| 1.0);
        let m = export_statistics(dir2.path(), &lay, &partial).unwrap();
        assert!(!m.complete);
        assert!(matches!(probe(dir2.path(), "dye", 0), Err(ExportError::Incomplete { .. })));
    }

    #[test]
    fn crossing_estimates_are_counted_and_range_clamped() {
        let dir = tempfile::tempdir().unwrap();
        let lay = layout();
        let ranks = run(&lay, 3, |_, _, _| 1.0);
        export_statistics(dir.path(), &lay, &ranks).unwrap();
        // overwrite the 0.75 field with values below the 0.5 field
        let mut f = read_statistic(dir.path(), "dye", Statistic::Quantile(0.75)).unwrap();
        f.values.iter_mut().for_each(|v| *v = 0.5);
        fs::write(stat_path(dir.path(), "dye", &f.name), encode_stat_field(&f)).unwrap();
        let rep = monotonicity_from_dir(dir.path(), "dye", 5, 2, &[0.25, 0.5, 0.75]).unwrap();
        assert_eq!(rep.checked, 20);
        assert_eq!(rep.violations, 10);
        let r = inter_percentile_range(dir.path(), "dye", 0.5, 0.75, 0).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reader_seeks_single_timesteps() {
        let dir = tempfile::tempdir().unwrap();
        let f = StatField { name: "dye".into(), n_cells: 3, n_timesteps: 4, values: (0..12).map(|v| v as f64 * 0.5).collect() };
        let path = dir.path().join("sim-0.bin");
        let bytes = encode_stat_field(&f);
        fs::write(&path, &bytes).unwrap();
        let mut r = StatFileReader::open(&path).unwrap();
        assert_eq!((r.name.as_str(), r.n_cells, r.n_timesteps), ("dye", 3, 4));
        for t in [3, 0, 2] {
            assert_eq!(r.read_timestep(t).unwrap(), f.at(t));
        }
        assert!(matches!(r.read_timestep(4), Err(ExportError::UnknownTimestep { .. })));
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(StatFileReader::open(&path), Err(ExportError::Format { .. })));
    }
}
