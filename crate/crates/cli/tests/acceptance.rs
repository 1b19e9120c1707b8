//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::path::Path;
use std::time::{Duration, Instant};

use igu_lora::alloc::{budget_at, PruneSchedule};
use igu_lora::experiments::{
    bound_coverage, compare_seed, default_ig_setup, discretization_sweep, grad_check_suite, median, run_planted,
    sampling_sweep, CompareRow, CoverageConfig, GRAD_TOL,
};
use igu_lora::ig::{completeness, ScoreField};
use igu_lora::linalg::{canonicalize, svd_thin, Matrix, Prng};
use igu_lora::model::{Activation, Batch, LossKind, Network};
use igu_lora::score::{is_monotone_in_window, snr_sweep, update, ImportanceState, SnrSimConfig};
use igu_lora::tasks::PlantedSpec;
use igu_lora::trainer::{layer_views, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Check = Box<dyn FnOnce() -> Result<Outcome, String>>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn c1_gradient_oracle() -> Result<Outcome, String> {
    let r = grad_check_suite(0, 100, 0.0).map_err(err)?;
    Ok(outcome(
        r.configs == 100 && r.max_rel_error <= GRAD_TOL,
        format!("max relative error {:.3e} over {} configs (tol {GRAD_TOL:.0e})", r.max_rel_error, r.configs),
    ))
}

fn c2_discretization() -> Result<Outcome, String> {
    let s = default_ig_setup(0).map_err(err)?;
    let sweep = discretization_sweep(&s.path(0), &[2, 4, 8, 16, 32, 64], 4096).map_err(err)?;
    Ok(outcome(
        (-2.4..=-1.6).contains(&sweep.slope),
        format!("log-log slope {:.4} (want [-2.4, -1.6])", sweep.slope),
    ))
}

fn c3_sampling() -> Result<Outcome, String> {
    let s = default_ig_setup(0).map_err(err)?;
    let sweep = sampling_sweep(&s, 20, &[4, 16, 64], 200).map_err(err)?;
    let ok = sweep.std_ratios.len() == 2 && sweep.std_ratios.iter().all(|r| (1.6..=2.4).contains(r));
    Ok(outcome(ok, format!("std(M)/std(4M) = {:?} (want [1.6, 2.4])", round(&sweep.std_ratios))))
}

fn c4_coverage() -> Result<Outcome, String> {
    let s = default_ig_setup(0).map_err(err)?;
    let r = bound_coverage(&s.path(0), &CoverageConfig::default(), 0).map_err(err)?;
    Ok(outcome(
        r.coverage >= 0.95,
        format!(
            "coverage {:.3} over {} trials (single-node estimator {:.3}; want >= 0.95)",
            r.coverage, r.config.trials, r.coverage_single_node
        ),
    ))
}

fn c5_completeness() -> Result<Outcome, String> {
    let s = default_ig_setup(3).map_err(err)?;
    let tanh = completeness(&s.net, &s.views, &s.batches[0], 1024).map_err(err)?;

    let mut rng = Prng::new(8);
    let mut net = Network::init_lora(&[6, 4], 3, Activation::Tanh, LossKind::MeanSquaredError, &mut rng).map_err(err)?;
    net.layers[0].b = Matrix::from_fn(3, 4, |_, _| rng.normal());
    let views = layer_views(&net).map_err(err)?;
    let batch = Batch::new(Matrix::from_fn(10, 6, |_, _| rng.normal()), Matrix::from_fn(10, 4, |_, _| rng.normal()))
        .map_err(err)?;
    let linear = completeness(&net, &views, &batch, 1024).map_err(err)?;
    Ok(outcome(
        tanh.gap <= 1e-3 && linear.gap <= 1e-10,
        format!("tanh gap {:.3e} (<= 1e-3), linear gap {:.3e} (<= 1e-10)", tanh.gap, linear.gap),
    ))
}

fn c6_svd() -> Result<Outcome, String> {
    let mut rng = Prng::new(6).stream("svd-acceptance");
    let (mut recon, mut ortho, mut canon) = (0.0f64, 0.0f64, 0.0f64);
    let mut idempotent = true;
    for _ in 0..1000 {
        let (r, c) = (1 + rng.index(64), 1 + rng.index(64));
        let m = Matrix::from_fn(r, c, |_, _| rng.normal());
        let v = svd_thin(&m).map_err(err)?;
        let scale = m.max_abs().max(1.0);
        recon = recon.max(v.reconstruct().sub(&m).map_err(err)?.max_abs() / scale);
        ortho = ortho.max(v.orthogonality_residual());
        let once = canonicalize(&v);
        idempotent &= canonicalize(&once) == once;
        canon = canon.max(once.reconstruct().sub(&m).map_err(err)?.max_abs() / scale);
    }
    Ok(outcome(
        recon <= 1e-10 && ortho <= 1e-10 && canon <= 1e-10 && idempotent,
        format!(
            "1000 matrices: reconstruction {recon:.2e}, orthogonality {ortho:.2e}, canonical reconstruction {canon:.2e}, idempotent {idempotent}"
        ),
    ))
}

fn c7_snr_stability() -> Result<Outcome, String> {
    let base = SnrSimConfig {
        mu: 1.0,
        sigma: 0.2,
        replications: 200,
        delta: 0.05,
        c0: 1.0,
        ..SnrSimConfig::default()
    };
    let results = snr_sweep(&base, &[0.5, 0.85, 0.97], 0).map_err(err)?;
    let summaries: Vec<_> = results.iter().map(|r| r.summary.clone()).collect();
    let monotone = is_monotone_in_window(&summaries);
    let cov: Vec<f64> = summaries.iter().map(|s| s.coverage.unwrap_or(f64::NAN)).collect();
    let med: Vec<f64> = summaries.iter().map(|s| s.median_deviation.unwrap_or(f64::NAN)).collect();
    Ok(outcome(
        monotone && cov.iter().all(|&c| c >= 0.95),
        format!(
            "median |SNR - mu/d| by beta {:?}, monotone {monotone}; coverage {:?} (want >= 0.95)",
            round(&med),
            round(&cov)
        ),
    ))
}

fn c8_ema_exactness() -> Result<Outcome, String> {
    let one = |v: f64| ScoreField {
        layers: vec![(Matrix::from_rows(&[[v]]), Matrix::zeros(1, 0))],
    };
    let val = |f: &ScoreField| f.layers[0].0[(0, 0)];
    let st = |s: f64, b: f64| ImportanceState::from_parts(one(s), one(0.0), 1, b, b, 1e-6).map_err(err);

    let worked = update(&st(1.0, 0.85)?, &one(2.0)).map_err(err)?;
    let worked_err = (val(&worked.s_bar) - 1.15).abs().max((val(&worked.u_bar) - 0.1275).abs());

    let mut fixed_err = 0.0f64;
    for &(s, b) in &[(0.0, 0.5), (0.3, 0.85), (2.5, 0.97), (7.0, 0.0), (1.0, 1.0)] {
        let next = update(&st(s, b)?, &one(s)).map_err(err)?;
        fixed_err = fixed_err.max((val(&next.s_bar) - s).abs()).max(val(&next.u_bar));
    }

    let mut geo_err = 0.0f64;
    for &b in &[0.5, 0.85, 0.97] {
        let (s0, target) = (3.0, 0.5);
        let mut state = st(s0, b)?;
        for t in 1..=60 {
            state = update(&state, &one(target)).map_err(err)?;
            let expect = b.powi(t) * (s0 - target);
            geo_err = geo_err.max(((val(&state.s_bar) - target).abs() - expect).abs());
        }
    }
    Ok(outcome(
        worked_err <= 1e-12 && fixed_err <= 1e-12 && geo_err <= 1e-12,
        format!("worked update {worked_err:.1e}, fixed point {fixed_err:.1e}, geometric decay {geo_err:.1e} (all <= 1e-12)"),
    ))
}

fn c9_pruning() -> Result<Outcome, String> {
    let cfg = TrainConfig::default();
    let spec = PlantedSpec::default();
    let (report, _) = run_planted(&spec, &cfg).map_err(err)?;
    let n_layers = spec.ranks.len();
    let mut worst_excess = f64::NEG_INFINITY;
    let mut budget_ok = !report.allocation.is_empty();
    for ev in &report.allocation {
        for (d, m) in ev.drift.iter().zip(&ev.dropped_mass) {
            worst_excess = worst_excess.max(d - m);
        }
        let scheduled = budget_at(&cfg.schedule, n_layers, ev.global_step, report.steps_per_epoch);
        budget_ok &= ev.budget == scheduled && ev.ranks_after.iter().sum::<usize>() == scheduled;
    }
    budget_ok &= report.final_ranks.iter().sum::<usize>() == cfg.schedule.b_final;

    let full = TrainConfig {
        schedule: PruneSchedule {
            b_final: cfg.schedule.r0 * n_layers,
            ..cfg.schedule.clone()
        },
        ..cfg.clone()
    };
    let (full_report, _) = run_planted(&spec, &full).map_err(err)?;
    let noop = full_report
        .allocation
        .iter()
        .flat_map(|e| e.drift.iter().copied())
        .fold(0.0f64, f64::max);
    let noop_ok = !full_report.allocation.is_empty() && noop <= 1e-12;
    Ok(outcome(
        worst_excess <= 1e-10 && budget_ok && noop_ok,
        format!(
            "{} events, max(drift - dropped mass) {worst_excess:.2e} (<= 1e-10), budgets match schedule {budget_ok}; full-budget drift {noop:.1e} over {} events (<= 1e-12)",
            report.allocation.len(),
            full_report.allocation.len()
        ),
    ))
}

fn compare_rows() -> Result<Vec<[CompareRow; 2]>, String> {
    let spec = PlantedSpec::default();
    let cfg = TrainConfig::default();
    (0..5).map(|seed| compare_seed(&spec, &cfg, seed).map_err(err)).collect()
}

fn c10_allocation(rows: &[[CompareRow; 2]], shared: Duration) -> Result<Outcome, String> {
    let r1: Vec<f64> = rows.iter().map(|r| r[0].final_ranks[0] as f64).collect();
    let r2: Vec<f64> = rows.iter().map(|r| r[0].final_ranks[1] as f64).collect();
    let (m1, m2) = (median(&r1), median(&r2));
    Ok(outcome(
        m1 > m2,
        format!(
            "median final ranks layer 1 = {m1}, layer 2 = {m2} over seeds {:?} (5-seed runs shared with 11: {:.2}s)",
            per_seed_ranks(rows),
            shared.as_secs_f64()
        ),
    ))
}

fn c11_comparison(rows: &[[CompareRow; 2]]) -> Result<Outcome, String> {
    let ada: Vec<f64> = rows.iter().map(|r| r[0].test_loss).collect();
    let fix: Vec<f64> = rows.iter().map(|r| r[1].test_loss).collect();
    let (ma, mf) = (median(&ada), median(&fix));
    Ok(outcome(
        ma <= mf,
        format!(
            "median test MSE adaptive {ma:.4e} vs fixed {mf:.4e}; trainable params {} vs {}",
            rows[0][0].trainable_params, rows[0][1].trainable_params
        ),
    ))
}

fn per_seed_ranks(rows: &[[CompareRow; 2]]) -> Vec<Vec<usize>> {
    rows.iter().map(|r| r[0].final_ranks.clone()).collect()
}

fn strip_wall_clock(text: &str) -> String {
    text.lines().filter(|l| !l.contains("\"wall_clock_seconds\"")).collect::<Vec<_>>().join("\n")
}

fn c12_determinism() -> Result<Outcome, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let config = dir.path().join("run.cfg");
    std::fs::write(&config, "# acceptance determinism run\nepochs = 12\n").map_err(err)?;
    let run = |out: &Path| {
        igu_lora_cli::run([
            "igu-lora".as_ref(),
            "train".as_ref(),
            "--config".as_ref(),
            config.as_os_str(),
            "--seed".as_ref(),
            "7".as_ref(),
            "--out".as_ref(),
            out.as_os_str(),
        ])
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let codes = (run(&a), run(&b));
    if codes != (0, 0) {
        return Ok(outcome(false, format!("exit codes {codes:?}")));
    }
    let mut same = true;
    for name in ["ranks.csv", "scores.csv"] {
        same &= std::fs::read(a.join(name)).map_err(err)? == std::fs::read(b.join(name)).map_err(err)?;
    }
    let ra = std::fs::read_to_string(a.join("report.json")).map_err(err)?;
    let rb = std::fs::read_to_string(b.join("report.json")).map_err(err)?;
    let report_same = strip_wall_clock(&ra) == strip_wall_clock(&rb);
    Ok(outcome(
        same && report_same,
        format!("report.json identical modulo wall clock {report_same}; ranks.csv and scores.csv byte-identical {same}"),
    ))
}

fn round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

fn main() {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, limit: Option<Duration>, check: Check| {
        let start = Instant::now();
        let res = check();
        let took = start.elapsed();
        let (pass, detail) = match res {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = limit.is_none_or(|l| took <= l);
        let pass = pass && in_time;
        if !pass {
            failed += 1;
        }
        let budget = limit.map(|l| format!(" / limit {}s", l.as_secs())).unwrap_or_default();
        println!(
            "[{}] {id:>2} {name}: {detail} [{:.2}s{budget}]",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    };
    let s = Duration::from_secs;
    report(1, "gradient oracle", Some(s(30)), Box::new(c1_gradient_oracle));
    report(2, "quadrature discretization order", Some(s(60)), Box::new(c2_discretization));
    report(3, "quadrature sampling order", Some(s(120)), Box::new(c3_sampling));
    report(4, "error bound coverage", Some(s(120)), Box::new(c4_coverage));
    report(5, "completeness", Some(s(10)), Box::new(c5_completeness));
    report(6, "SVD contract", Some(s(30)), Box::new(c6_svd));
    report(7, "SNR stability", Some(s(60)), Box::new(c7_snr_stability));
    report(8, "EMA exactness", None, Box::new(c8_ema_exactness));
    report(9, "pruning drift and budget", None, Box::new(c9_pruning));

    let start = Instant::now();
    let rows = compare_rows();
    let shared = start.elapsed();
    let rows_10 = rows.clone();
    report(10, "planted rank allocation", Some(s(180).saturating_sub(shared)), Box::new(move || c10_allocation(&rows_10?, shared)));
    report(11, "adaptive vs fixed rank", Some(s(300).saturating_sub(shared)), Box::new(move || c11_comparison(&rows?)));
    report(12, "train determinism", None, Box::new(c12_determinism));

    println!("acceptance: {} of 12 criteria passed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
