use igu_lora_wasm::{quadrature_curve_json, rank_allocation_json, snr_trajectory_json};
use serde_json::Value;

#[test]
fn quadrature_curve_is_second_order() {
    let v: Value = serde_json::from_str(&quadrature_curve_json(0, 6).unwrap()).unwrap();
    assert_eq!(v["points"].as_array().unwrap().len(), 6);
    let slope = v["slope"].as_f64().unwrap();
    assert!((-2.4..=-1.6).contains(&slope), "{slope}");
}

#[test]
fn snr_trace_has_one_value_per_step() {
    let v: Value = serde_json::from_str(&snr_trajectory_json(0.85, 1.0, 0.2, 300, 1).unwrap()).unwrap();
    assert_eq!(v["snr"].as_array().unwrap().len(), 300);
    assert!(v["target"].as_f64().unwrap() > 0.0);
    let degenerate: Value = serde_json::from_str(&snr_trajectory_json(0.85, 1.0, 0.0, 100, 1).unwrap()).unwrap();
    assert!(degenerate["target"].is_null());
}

#[test]
fn snr_rejects_bad_beta() {
    assert!(snr_trajectory_json(1.5, 1.0, 0.2, 100, 0).is_err());
}

#[test]
fn allocation_reports_every_epoch() {
    let v: Value = serde_json::from_str(&rank_allocation_json(6, 2, 0).unwrap()).unwrap();
    let epochs = v["epochs"].as_array().unwrap();
    assert!(!epochs.is_empty());
    let total: u64 = v["final_ranks"].as_array().unwrap().iter().map(|r| r.as_u64().unwrap()).sum();
    assert_eq!(total, 8);
}
