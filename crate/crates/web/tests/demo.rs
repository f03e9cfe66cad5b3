//! The demo operations, exercised natively.

use ensemble_web::{calibration_json, trajectories_json, Ensemble, DYE_ORDERS};

#[test]
fn trajectories_cover_every_schedule() {
    let v = trajectories_json("exponential", 0.95, 1000, 3, 7).unwrap();
    let schedules = v["schedules"].as_array().unwrap();
    assert_eq!(schedules.len(), 4);
    let steps = v["steps"].as_array().unwrap();
    assert_eq!(steps.first().unwrap(), 1);
    assert_eq!(steps.last().unwrap(), 1000);
    for s in schedules {
        let paths = s["paths"].as_array().unwrap();
        assert_eq!(paths.len(), 3);
        assert!(paths.iter().all(|p| p.as_array().unwrap().len() == steps.len()));
    }
    assert!((v["exact"].as_f64().unwrap() - 20f64.ln()).abs() < 1e-12);
    assert!(trajectories_json("cauchy", 0.5, 100, 1, 0).is_err());
    assert!(trajectories_json("gaussian", 1.0, 100, 1, 0).is_err());
}

#[test]
fn calibration_rows_match_the_study_set() {
    let v = calibration_json("uniform", 0.5, 500, 20, 1).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0]["estimator"], "empirical");
    assert!((rows[0]["rmse_ratio"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(rows.iter().any(|r| r["estimator"] == "rm-linear"));
}

#[test]
fn ensemble_statistics_are_ordered() {
    let mut e = Ensemble::new(6, 40, 3).unwrap();
    assert!(e.field("mean", 0).is_err());
    assert_eq!(e.advance(4).unwrap(), 4);
    assert_eq!(e.advance(10).unwrap(), 6);
    let n = e.width() * e.height();
    assert_eq!(e.solid_mask().len(), n);
    let t = 39;
    let lo = e.field("min", t).unwrap();
    let hi = e.field("max", t).unwrap();
    for a in DYE_ORDERS {
        let q = e.field(&format!("q{a}"), t).unwrap();
        assert!((0..n).all(|k| lo[k] <= q[k] && q[k] <= hi[k]));
    }
    let mean = e.field("mean", t).unwrap();
    assert!((0..n).all(|k| lo[k] <= mean[k] + 1e-12 && mean[k] <= hi[k] + 1e-12));
    assert!(mean.iter().any(|&m| m > 0.0));
    assert!(e.field("std", t).unwrap().iter().all(|&s| s >= 0.0));
    assert!(e.field("q0.4", t).is_err());
    assert!(e.field("mean", 40).is_err());
}
