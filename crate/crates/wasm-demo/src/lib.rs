//! Browser bindings: quadrature error curve, SNR trajectory and planted-task
//! rank allocation, each returned as a JSON string for `www/index.html`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use igu_lora::experiments::{default_ig_setup, discretization_sweep, run_planted, SweepPoint};
use igu_lora::score::{snr_simulate, SnrSimConfig};
use igu_lora::tasks::PlantedSpec;
use igu_lora::trainer::TrainConfig;

#[derive(Serialize)]
struct QuadCurve {
    points: Vec<SweepPoint>,
    slope: f64,
}

/// Trapezoid error for `N = 2, 4, …, 2^max_log2_n` against a 1024-interval reference.
pub fn quadrature_curve_json(seed: u64, max_log2_n: u32) -> igu_lora::Result<String> {
    let setup = default_ig_setup(seed)?;
    let ns: Vec<usize> = (1..=max_log2_n.clamp(2, 9)).map(|k| 1usize << k).collect();
    let sweep = discretization_sweep(&setup.path(0), &ns, 1024)?;
    Ok(serde_json::to_string(&QuadCurve {
        points: sweep.points,
        slope: sweep.slope,
    })
    .expect("plain data"))
}

#[derive(Serialize)]
struct SnrTrace {
    target: Option<f64>,
    burn_in: u64,
    deviation_bound: Option<f64>,
    snr: Vec<f64>,
}

/// One replication of the EMA score on truncated-normal observations.
pub fn snr_trajectory_json(beta: f64, mu: f64, sigma: f64, steps: u64, seed: u64) -> igu_lora::Result<String> {
    let cfg = SnrSimConfig {
        beta,
        mu,
        sigma,
        steps,
        replications: 1,
        oracle_samples: 100_000,
        keep_trajectories: true,
        ..SnrSimConfig::default()
    };
    let r = snr_simulate(&cfg, seed)?;
    Ok(serde_json::to_string(&SnrTrace {
        target: r.summary.target,
        burn_in: r.summary.burn_in.steps,
        deviation_bound: r.summary.deviation_bound,
        snr: r.trajectories.iter().map(|p| p.snr).collect(),
    })
    .expect("plain data"))
}

#[derive(Serialize)]
struct EpochRanks {
    epoch: usize,
    ranks: Vec<usize>,
    val_loss: f64,
}

#[derive(Serialize)]
struct Allocation {
    epochs: Vec<EpochRanks>,
    final_ranks: Vec<usize>,
    test_loss: Option<f64>,
}

/// Adaptive training on a reduced planted task with teacher ranks `(rank_a, rank_b)`.
pub fn rank_allocation_json(rank_a: usize, rank_b: usize, seed: u64) -> igu_lora::Result<String> {
    let spec = PlantedSpec {
        ranks: vec![rank_a, rank_b],
        n_train: 1024,
        n_val: 128,
        n_test: 128,
        seed,
        ..PlantedSpec::default()
    };
    let cfg = TrainConfig {
        seed,
        epochs: 16,
        ..TrainConfig::default()
    };
    let (report, _) = run_planted(&spec, &cfg)?;
    Ok(serde_json::to_string(&Allocation {
        epochs: report
            .epochs
            .iter()
            .map(|e| EpochRanks {
                epoch: e.epoch,
                ranks: e.ranks.clone(),
                val_loss: e.val_loss,
            })
            .collect(),
        final_ranks: report.final_ranks,
        test_loss: report.test_loss,
    })
    .expect("plain data"))
}

fn js(r: igu_lora::Result<String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = quadratureCurve)]
pub fn quadrature_curve(seed: u32, max_log2_n: u32) -> Result<String, JsValue> {
    js(quadrature_curve_json(seed as u64, max_log2_n))
}

#[wasm_bindgen(js_name = snrTrajectory)]
pub fn snr_trajectory(beta: f64, mu: f64, sigma: f64, steps: u32, seed: u32) -> Result<String, JsValue> {
    js(snr_trajectory_json(beta, mu, sigma, steps as u64, seed as u64))
}

#[wasm_bindgen(js_name = rankAllocation)]
pub fn rank_allocation(rank_a: u32, rank_b: u32, seed: u32) -> Result<String, JsValue> {
    js(rank_allocation_json(rank_a as usize, rank_b as usize, seed as u64))
}
