//! Dense per-(cell, timestep) statistics for one field on one server
//! partition.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::stats::{rm_step, Moments, StatisticsConfig};
use crate::wire::{ByteReader, ByteWriter};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FieldError {
    #[error("cells [{start}, {end}) outside partition [{owned_start}, {owned_end})")]
    CellsOutOfRange {
        start: u64,
        end: u64,
        owned_start: u64,
        owned_end: u64,
    },
    #[error("timestep {timestep} outside [0, {n_timesteps})")]
    TimestepOutOfRange { timestep: u32, n_timesteps: u32 },
    #[error("non-finite value {value} at cell {cell}, timestep {timestep}")]
    NonFinite { cell: u64, timestep: u32, value: f64 },
    #[error("cell {cell} at timestep {timestep} has {count} samples, {required} required")]
    InsufficientCount {
        cell: u64,
        timestep: u32,
        count: u64,
        required: u64,
    },
    #[error("statistic {0} is not configured for this field")]
    UnknownStatistic(Statistic),
    #[error("empty chunk")]
    EmptyChunk,
    #[error("malformed field state: {0}")]
    Malformed(String),
}

impl FieldError {
    /// Whether the error stems from a message that breaks the routing or
    /// shape contract, as opposed to bad sample values.
    pub fn is_protocol_violation(&self) -> bool {
        matches!(
            self,
            FieldError::CellsOutOfRange { .. }
                | FieldError::TimestepOutOfRange { .. }
                | FieldError::EmptyChunk
        )
    }
}

/// A derived per-cell statistic.
///
/// Skewness is `g1 = sqrt(n) m3 / m2^1.5` and kurtosis is the excess form
/// `g2 = n m4 / m2^2 - 3`; both read as NaN where the sample variance is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Statistic {
    Count,
    Mean,
    Variance,
    Skewness,
    Kurtosis,
    Min,
    Max,
    Exceedance(f64),
    Quantile(f64),
}

impl Statistic {
    /// Statistics whose value does not depend on arrival order beyond
    /// floating-point rounding.
    pub fn is_order_independent(&self) -> bool {
        !matches!(self, Statistic::Quantile(_))
    }

    fn required_count(&self) -> u64 {
        match self {
            Statistic::Count => 0,
            Statistic::Variance | Statistic::Skewness | Statistic::Kurtosis => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Statistic::Count => f.write_str("count"),
            Statistic::Mean => f.write_str("mean"),
            Statistic::Variance => f.write_str("variance"),
            Statistic::Skewness => f.write_str("skewness"),
            Statistic::Kurtosis => f.write_str("kurtosis"),
            Statistic::Min => f.write_str("min"),
            Statistic::Max => f.write_str("max"),
            Statistic::Exceedance(t) => write!(f, "exceedance-{t}"),
            Statistic::Quantile(a) => write!(f, "quantile-{a}"),
        }
    }
}

impl FromStr for Statistic {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |v: &str| v.parse::<f64>().map_err(|e| format!("{s}: {e}"));
        Ok(match s {
            "count" => Statistic::Count,
            "mean" => Statistic::Mean,
            "variance" => Statistic::Variance,
            "skewness" => Statistic::Skewness,
            "kurtosis" => Statistic::Kurtosis,
            "min" => Statistic::Min,
            "max" => Statistic::Max,
            _ => {
                if let Some(v) = s.strip_prefix("exceedance-") {
                    Statistic::Exceedance(parse(v)?)
                } else if let Some(v) = s.strip_prefix("quantile-") {
                    Statistic::Quantile(parse(v)?)
                } else {
                    return Err(format!("unknown statistic {s:?}"));
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldStatistics {
    name: String,
    cells: Range<u64>,
    n_timesteps: u32,
    config: StatisticsConfig,
    // all arrays are timestep-major: position = t * n_local + local_cell
    moments: Vec<Moments>,
    exceed: Vec<u64>,
    quantiles: Vec<f64>,
}

impl FieldStatistics {
    pub fn new(
        name: impl Into<String>,
        cells: Range<u64>,
        n_timesteps: u32,
        config: StatisticsConfig,
    ) -> Self {
        let positions = (cells.end - cells.start) as usize * n_timesteps as usize;
        FieldStatistics {
            name: name.into(),
            cells,
            n_timesteps,
            moments: vec![Moments::new(); positions],
            exceed: vec![0; positions * config.thresholds.len()],
            quantiles: vec![0.0; positions * config.quantile_orders.len()],
            config,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn cell_range(&self) -> Range<u64> {
        self.cells.clone()
    }

    pub fn n_local_cells(&self) -> usize {
        (self.cells.end - self.cells.start) as usize
    }

    pub fn n_timesteps(&self) -> u32 {
        self.n_timesteps
    }

    pub fn config(&self) -> &StatisticsConfig {
        &self.config
    }

    /// Bytes held by the accumulator arrays. Depends only on the partition
    /// shape and the configured statistics.
    pub fn footprint_bytes(&self) -> usize {
        self.moments.capacity() * std::mem::size_of::<Moments>()
            + self.exceed.capacity() * 8
            + self.quantiles.capacity() * 8
    }

    #[inline]
    fn position(&self, local: usize, timestep: u32) -> usize {
        timestep as usize * self.n_local_cells() + local
    }

    /// Folds one value per cell of `[offset, offset + values.len())` at
    /// `timestep` into moments, exceedance counters and every quantile
    /// estimator. The chunk is validated in full before any state changes.
    pub fn ingest_chunk(
        &mut self,
        timestep: u32,
        global_cell_offset: u64,
        values: &[f64],
    ) -> Result<(), FieldError> {
        if values.is_empty() {
            return Err(FieldError::EmptyChunk);
        }
        let end = global_cell_offset
            .checked_add(values.len() as u64)
            .unwrap_or(u64::MAX);
        if global_cell_offset < self.cells.start || end > self.cells.end {
            return Err(FieldError::CellsOutOfRange {
                start: global_cell_offset,
                end,
                owned_start: self.cells.start,
                owned_end: self.cells.end,
            });
        }
        if timestep >= self.n_timesteps {
            return Err(FieldError::TimestepOutOfRange {
                timestep,
                n_timesteps: self.n_timesteps,
            });
        }
        if let Some((i, &v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(FieldError::NonFinite {
                cell: global_cell_offset + i as u64,
                timestep,
                value: v,
            });
        }

        let n_alpha = self.config.quantile_orders.len();
        let n_thr = self.config.thresholds.len();
        let local0 = (global_cell_offset - self.cells.start) as usize;
        let base = self.position(local0, timestep);
        let gain = self.config.gain;
        let schedule = self.config.schedule;
        let declared_n = self.config.declared_n;

        for (i, &y) in values.iter().enumerate() {
            let pos = base + i;
            let m = &mut self.moments[pos];
            let seen = m.count;
            m.push(y);

            let thr = &mut self.exceed[pos * n_thr..(pos + 1) * n_thr];
            for (c, &t) in thr.iter_mut().zip(&self.config.thresholds) {
                if y > t {
                    *c += 1;
                }
            }

            let qs = &mut self.quantiles[pos * n_alpha..(pos + 1) * n_alpha];
            if seen == 0 {
                qs.fill(y);
            } else {
                // every order at this position shares the same n, hence the same step
                let step = schedule.step(gain, seen, declared_n);
                for (q, &alpha) in qs.iter_mut().zip(&self.config.quantile_orders) {
                    *q = rm_step(*q, y, alpha, step);
                }
            }
        }
        Ok(())
    }

    /// Sample count at one position.
    pub fn count(&self, global_cell: u64, timestep: u32) -> u64 {
        let local = (global_cell - self.cells.start) as usize;
        self.moments[self.position(local, timestep)].count
    }

    /// Per-cell values of `stat` at `timestep`, in local cell order.
    pub fn snapshot_statistic(&self, stat: Statistic, timestep: u32) -> Result<Vec<f64>, FieldError> {
        self.snapshot(stat, timestep, true)
    }

    /// Like [`snapshot_statistic`](Self::snapshot_statistic) but reads NaN
    /// at positions with too few samples instead of failing.
    pub fn snapshot_partial(&self, stat: Statistic, timestep: u32) -> Result<Vec<f64>, FieldError> {
        self.snapshot(stat, timestep, false)
    }

    fn snapshot(&self, stat: Statistic, timestep: u32, strict: bool) -> Result<Vec<f64>, FieldError> {
        if timestep >= self.n_timesteps {
            return Err(FieldError::TimestepOutOfRange {
                timestep,
                n_timesteps: self.n_timesteps,
            });
        }
        let slot = match stat {
            Statistic::Exceedance(t) => Some(
                self.config
                    .threshold_index(t)
                    .ok_or(FieldError::UnknownStatistic(stat))?,
            ),
            Statistic::Quantile(a) => Some(
                self.config
                    .quantile_index(a)
                    .ok_or(FieldError::UnknownStatistic(stat))?,
            ),
            _ => None,
        };
        let required = stat.required_count();
        let n_local = self.n_local_cells();
        let n_alpha = self.config.quantile_orders.len();
        let n_thr = self.config.thresholds.len();
        let mut out = Vec::with_capacity(n_local);
        for local in 0..n_local {
            let pos = self.position(local, timestep);
            let m = &self.moments[pos];
            if m.count < required {
                if !strict {
                    out.push(f64::NAN);
                    continue;
                }
                return Err(FieldError::InsufficientCount {
                    cell: self.cells.start + local as u64,
                    timestep,
                    count: m.count,
                    required,
                });
            }
            let v = match stat {
                Statistic::Count => m.count as f64,
                Statistic::Mean => m.mean,
                Statistic::Variance => m.variance().unwrap_or(f64::NAN),
                Statistic::Skewness => m.skewness().unwrap_or(f64::NAN),
                Statistic::Kurtosis => m.kurtosis().unwrap_or(f64::NAN),
                Statistic::Min => m.min,
                Statistic::Max => m.max,
                Statistic::Exceedance(_) => {
                    self.exceed[pos * n_thr + slot.unwrap()] as f64 / m.count as f64
                }
                // the recursion can step outside the sample range; the true
                // quantile never does
                Statistic::Quantile(_) => self.quantiles[pos * n_alpha + slot.unwrap()].clamp(m.min, m.max),
            };
            out.push(v);
        }
        Ok(out)
    }

    /// Every statistic this field can export, in a stable order.
    pub fn statistics(&self) -> Vec<Statistic> {
        let mut v = vec![
            Statistic::Count,
            Statistic::Mean,
            Statistic::Variance,
            Statistic::Skewness,
            Statistic::Kurtosis,
            Statistic::Min,
            Statistic::Max,
        ];
        v.extend(self.config.thresholds.iter().map(|&t| Statistic::Exceedance(t)));
        v.extend(self.config.quantile_orders.iter().map(|&a| Statistic::Quantile(a)));
        v
    }

    pub(crate) fn encode(&self, w: &mut ByteWriter) {
        w.str(&self.name);
        w.u64(self.cells.start);
        w.u64(self.cells.end);
        w.u32(self.n_timesteps);
        w.u32(self.config.thresholds.len() as u32);
        w.u32(self.config.quantile_orders.len() as u32);
        for m in &self.moments {
            w.u64(m.count);
            w.f64(m.mean);
            w.f64(m.m2);
            w.f64(m.m3);
            w.f64(m.m4);
            w.f64(m.min);
            w.f64(m.max);
        }
        w.u64s(&self.exceed);
        w.f64s(&self.quantiles);
    }

    pub(crate) fn decode(r: &mut ByteReader<'_>, config: &StatisticsConfig) -> Result<Self, FieldError> {
        let short = |s: crate::wire::Short| {
            FieldError::Malformed(format!("truncated: needed {} bytes, {} left", s.needed, s.available))
        };
        let name = r
            .str()
            .map_err(short)?
            .ok_or_else(|| FieldError::Malformed("field name is not UTF-8".into()))?;
        let start = r.u64().map_err(short)?;
        let end = r.u64().map_err(short)?;
        let n_timesteps = r.u32().map_err(short)?;
        let n_thr = r.u32().map_err(short)? as usize;
        let n_alpha = r.u32().map_err(short)? as usize;
        if end < start {
            return Err(FieldError::Malformed(format!("cell range [{start}, {end})")));
        }
        if n_thr != config.thresholds.len() || n_alpha != config.quantile_orders.len() {
            return Err(FieldError::Malformed(
                "statistic layout differs from the study configuration".into(),
            ));
        }
        let positions = ((end - start) as usize)
            .checked_mul(n_timesteps as usize)
            .ok_or_else(|| FieldError::Malformed("position count overflows".into()))?;
        if positions.saturating_mul(56) > r.remaining() {
            return Err(short(crate::wire::Short {
                needed: positions.saturating_mul(56),
                available: r.remaining(),
            }));
        }
        let mut moments = Vec::with_capacity(positions);
        for _ in 0..positions {
            moments.push(Moments {
                count: r.u64().map_err(short)?,
                mean: r.f64().map_err(short)?,
                m2: r.f64().map_err(short)?,
                m3: r.f64().map_err(short)?,
                m4: r.f64().map_err(short)?,
                min: r.f64().map_err(short)?,
                max: r.f64().map_err(short)?,
            });
        }
        let exceed = r.u64s(positions * n_thr).map_err(short)?;
        let quantiles = r.f64s(positions * n_alpha).map_err(short)?;
        Ok(FieldStatistics {
            name,
            cells: start..end,
            n_timesteps,
            config: config.clone(),
            moments,
            exceed,
            quantiles,
        })
    }
}
