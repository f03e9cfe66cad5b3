//! Browser bindings for the ensemble statistics core.
//!
//! Three operations back the demo page: Robbins-Monro estimate paths for
//! several exponent schedules, the repeated-sample calibration table, and an
//! in-browser dye ensemble whose per-cell statistics can be scrubbed through
//! time. Each binding wraps a plain Rust function so the logic is testable
//! natively.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use ensemble_core::field_stats::{FieldStatistics, Statistic};
use ensemble_core::launcher::parameter_set;
use ensemble_core::sim_dye::{run_simulation, DyeConfig, FrozenFlow, DYE_FIELD};
use ensemble_core::stats::StatisticsConfig;
use ensemble_core::validation::{
    calibrate, run_distribution_study, run_trajectories, summarize, EstimatorSpec, TargetDistribution,
};

/// Upper bound on points per plotted path; longer paths are thinned.
const MAX_PLOT_POINTS: usize = 400;

/// Quantile orders tracked by the dye ensemble.
pub const DYE_ORDERS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

fn parse_dist(name: &str) -> Result<TargetDistribution, String> {
    TargetDistribution::parse(name).ok_or_else(|| format!("unknown distribution {name:?}"))
}

fn thin(path: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let stride = path.len().div_ceil(MAX_PLOT_POINTS).max(1);
    let mut idx: Vec<usize> = (0..path.len()).step_by(stride).collect();
    if idx.last() != Some(&(path.len() - 1)) {
        idx.push(path.len() - 1);
    }
    let vals = idx.iter().map(|&i| path[i]).collect();
    // 1-based observation counts
    (idx.into_iter().map(|i| i + 1).collect(), vals)
}

/// Estimate paths of the constant-exponent and linear-profile estimators on
/// the same `n_traj` samples.
pub fn trajectories_json(dist: &str, alpha: f64, n: usize, n_traj: usize, seed: u64) -> Result<Value, String> {
    let d = parse_dist(dist)?;
    let mut schedules = Vec::new();
    let mut steps = Vec::new();
    for spec in EstimatorSpec::study_set().into_iter().filter(|s| *s != EstimatorSpec::Empirical) {
        let paths = run_trajectories(d, spec, n_traj, n, alpha, seed).map_err(|e| e.to_string())?;
        let thinned: Vec<Vec<f64>> = paths
            .iter()
            .map(|p| {
                let (s, v) = thin(p);
                steps = s;
                v
            })
            .collect();
        schedules.push(json!({ "label": spec.label(), "paths": thinned }));
    }
    Ok(json!({
        "distribution": d.name(),
        "alpha": alpha,
        "exact": d.exact_quantile(alpha),
        "steps": steps,
        "schedules": schedules,
    }))
}

/// Calibration table: one row per estimator over `repeats` paired samples.
pub fn calibration_json(dist: &str, alpha: f64, n: usize, repeats: usize, seed: u64) -> Result<Value, String> {
    let d = parse_dist(dist)?;
    let study = run_distribution_study(d, alpha, n, repeats, seed, &EstimatorSpec::study_set())
        .map_err(|e| e.to_string())?;
    let rows: Vec<Value> = study
        .runs
        .iter()
        .map(|run| {
            let s = summarize(&run.estimates, study.exact).expect("repeats > 0");
            let c = calibrate(&study, &run.spec);
            json!({
                "estimator": run.spec.label(),
                "mean": s.mean,
                "bias": s.bias,
                "std": s.std,
                "rmse": s.rmse,
                "rmse_ratio": c.map(|c| c.rmse_ratio),
                "calibrated": c.map(|c| c.bias_ok && c.rmse_ok),
            })
        })
        .collect();
    Ok(json!({ "distribution": d.name(), "alpha": alpha, "exact": study.exact, "rows": rows }))
}

/// A dye ensemble computed in memory. Members are folded into the statistics
/// one at a time, as a server would receive them.
pub struct Ensemble {
    cfg: DyeConfig,
    flow: FrozenFlow,
    stats: FieldStatistics,
    seed: u64,
    n_sims: u32,
    added: u32,
}

impl Ensemble {
    pub fn new(n_sims: u32, n_timesteps: u32, seed: u64) -> Result<Self, String> {
        if n_sims == 0 || n_timesteps == 0 {
            return Err("need at least one member and one timestep".into());
        }
        let cfg = DyeConfig::default();
        let flow = cfg.build_flow().map_err(|e| e.to_string())?;
        let n_cells = cfg.grid.n_cells() as u64;
        let mut sc = StatisticsConfig::new(DYE_ORDERS.to_vec(), u64::from(n_sims).max(2));
        sc.thresholds = vec![0.5];
        Ok(Ensemble {
            stats: FieldStatistics::new(DYE_FIELD, 0..n_cells, n_timesteps, sc),
            cfg,
            flow,
            seed,
            n_sims,
            added: 0,
        })
    }

    /// Simulates up to `k` further members. Returns how many are folded in.
    pub fn advance(&mut self, k: u32) -> Result<u32, String> {
        let stop = (self.added + k).min(self.n_sims);
        let nt = self.stats.n_timesteps();
        while self.added < stop {
            let params = parameter_set(self.seed, u64::from(self.added));
            let stats = &mut self.stats;
            let mut sink = |t: u32, _f: &str, v: &[f64]| stats.ingest_chunk(t, 0, v);
            run_simulation(&params, &self.cfg, &self.flow, nt, &mut sink, |_| {}).map_err(|e| e.to_string())?;
            self.added += 1;
        }
        Ok(self.added)
    }

    pub fn members(&self) -> u32 {
        self.added
    }

    pub fn width(&self) -> usize {
        self.cfg.grid.nx
    }

    pub fn height(&self) -> usize {
        self.cfg.grid.ny
    }

    /// 1 for obstacle cells, 0 for fluid.
    pub fn solid_mask(&self) -> Vec<u8> {
        (0..self.cfg.grid.n_cells()).map(|k| u8::from(self.flow.is_solid(k))).collect()
    }

    /// `stat` is one of mean, std, min, max, skewness, kurtosis,
    /// exceedance or `q<order>` such as `q0.95`.
    pub fn field(&self, stat: &str, timestep: u32) -> Result<Vec<f64>, String> {
        if self.added == 0 {
            return Err("no members yet".into());
        }
        let s = match stat {
            "mean" => Statistic::Mean,
            "std" => Statistic::Variance,
            "min" => Statistic::Min,
            "max" => Statistic::Max,
            "skewness" => Statistic::Skewness,
            "kurtosis" => Statistic::Kurtosis,
            "exceedance" => Statistic::Exceedance(0.5),
            q => match q.strip_prefix('q').and_then(|v| v.parse::<f64>().ok()) {
                Some(a) if DYE_ORDERS.contains(&a) => Statistic::Quantile(a),
                _ => return Err(format!("unknown statistic {stat:?}")),
            },
        };
        let mut v = self.stats.snapshot_statistic(s, timestep).map_err(|e| e.to_string())?;
        if stat == "std" {
            v.iter_mut().for_each(|x| *x = x.max(0.0).sqrt());
        }
        Ok(v)
    }
}

fn js_err(e: String) -> JsValue {
    JsValue::from_str(&e)
}

/// JSON with thinned estimate paths per exponent schedule.
#[wasm_bindgen(js_name = rmTrajectories)]
pub fn rm_trajectories(dist: &str, alpha: f64, n: usize, n_traj: usize, seed: u32) -> Result<String, JsValue> {
    trajectories_json(dist, alpha, n, n_traj, seed.into()).map(|v| v.to_string()).map_err(js_err)
}

/// JSON calibration table for one distribution.
#[wasm_bindgen(js_name = calibrationTable)]
pub fn calibration_table(dist: &str, alpha: f64, n: usize, repeats: usize, seed: u32) -> Result<String, JsValue> {
    calibration_json(dist, alpha, n, repeats, seed.into()).map(|v| v.to_string()).map_err(js_err)
}

#[wasm_bindgen(js_name = DyeEnsemble)]
pub struct DyeEnsemble(Ensemble);

#[wasm_bindgen(js_class = DyeEnsemble)]
impl DyeEnsemble {
    #[wasm_bindgen(constructor)]
    pub fn new(n_sims: u32, n_timesteps: u32, seed: u32) -> Result<DyeEnsemble, JsValue> {
        Ensemble::new(n_sims, n_timesteps, seed.into()).map(DyeEnsemble).map_err(js_err)
    }

    pub fn advance(&mut self, k: u32) -> Result<u32, JsValue> {
        self.0.advance(k).map_err(js_err)
    }

    #[wasm_bindgen(getter)]
    pub fn members(&self) -> u32 {
        self.0.members()
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.0.width()
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.0.height()
    }

    #[wasm_bindgen(js_name = solidMask)]
    pub fn solid_mask(&self) -> Vec<u8> {
        self.0.solid_mask()
    }

    pub fn field(&self, stat: &str, timestep: u32) -> Result<Vec<f64>, JsValue> {
        self.0.field(stat, timestep).map_err(js_err)
    }
}
