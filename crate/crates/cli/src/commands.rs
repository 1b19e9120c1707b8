use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use igu_lora::experiments::{
    bound_coverage, compare_seed, default_ig_setup, discretization_sweep, grad_check_suite, median, sampling_sweep,
    CompareRow, CoverageConfig, CoverageReport,
};
use igu_lora::ig::{b_field, c2_field, PathGradient};
use igu_lora::linalg::Prng;
use igu_lora::model::{Activation, LossKind, Network};
use igu_lora::score::{is_monotone_in_window, snr_simulate, SnrSimConfig, SnrSimSummary};
use igu_lora::tasks::{gen_planted, load_csv, student_from, CsvSchema, Dataset};
use igu_lora::trainer::{train, RunReport, RunStatus};

use crate::config::{load_config, RunConfig, TaskSource};
use crate::svg::{line_chart, Axes, Series};
use crate::{CliError, CompareArgs, GradArgs, QuadArgs, SnrArgs, TrainArgs};

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Dataset and freshly initialised student for a run configuration.
pub fn build_task(cfg: &RunConfig) -> Result<(Dataset, Network), CliError> {
    let r0 = cfg.train.schedule.r0;
    let mut rng = Prng::new(cfg.train.seed).stream("student");
    match &cfg.task {
        TaskSource::Planted(spec) => {
            let (data, teacher) = gen_planted(spec)?;
            let student = student_from(&teacher, r0, &mut rng)?;
            Ok((data, student))
        }
        TaskSource::Csv {
            path,
            layer_dims,
            fractions,
            seed,
        } => {
            let schema = CsvSchema {
                input_dim: layer_dims[0],
                output_dim: *layer_dims.last().expect("validated"),
                fractions: *fractions,
                seed: *seed,
            };
            let data = load_csv(path, &schema)?;
            let net = Network::init_lora(layer_dims, r0, Activation::Tanh, LossKind::MeanSquaredError, &mut rng)?;
            Ok((data, net))
        }
    }
}

pub const RANKS_HEADER: [&str; 3] = ["epoch", "layer", "rank"];
pub const SCORES_HEADER: [&str; 10] =
    ["epoch", "layer", "factor", "row", "col", "y", "mean", "variance", "lag1_autocorr", "snr"];

/// Writes report.json, ranks.csv and scores.csv (and charts when asked).
pub fn write_train_outputs(out: &Path, report: &RunReport, svg: bool) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    write_json(&out.join("report.json"), report)?;
    write_csv(
        &out.join("ranks.csv"),
        &RANKS_HEADER,
        report.epochs.iter().flat_map(|e| {
            e.ranks
                .iter()
                .enumerate()
                .map(move |(l, r)| vec![e.epoch.to_string(), l.to_string(), r.to_string()])
        }),
    )?;
    write_csv(
        &out.join("scores.csv"),
        &SCORES_HEADER,
        report.score_stats.iter().map(|s| {
            vec![
                s.epoch.to_string(),
                s.layer.to_string(),
                format!("{:?}", s.factor),
                s.row.to_string(),
                s.col.to_string(),
                s.y.to_string(),
                s.mean.to_string(),
                s.variance.to_string(),
                opt(s.lag1_autocorr),
                s.snr.to_string(),
            ]
        }),
    )?;
    if svg {
        let e = &report.epochs;
        let losses = [
            Series {
                name: "train".into(),
                points: e.iter().map(|r| (r.epoch as f64, r.train_loss)).collect(),
            },
            Series {
                name: "val".into(),
                points: e.iter().map(|r| (r.epoch as f64, r.val_loss)).collect(),
            },
        ];
        let axes = Axes { log_x: false, log_y: true };
        fs::write(out.join("loss.svg"), line_chart("Loss", "epoch", "loss", &losses, axes))?;
        let n_layers = report.initial_ranks.len();
        let ranks: Vec<Series> = (0..n_layers)
            .map(|l| Series {
                name: format!("layer {l}"),
                points: e.iter().map(|r| (r.epoch as f64, r.ranks[l] as f64)).collect(),
            })
            .collect();
        fs::write(out.join("ranks.svg"), line_chart("Rank per layer", "epoch", "rank", &ranks, Axes::default()))?;
    }
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    let (data, net) = build_task(&cfg)?;
    let (report, _) = train(net, &data, &cfg.train).map_err(|e| match e {
        igu_lora::Error::InvalidArgument(msg) => CliError::Config {
            key: "config".into(),
            msg,
        },
        other => CliError::Run(other),
    })?;
    write_train_outputs(&args.out, &report, args.svg)?;
    if let RunStatus::Diverged {
        epoch,
        global_step,
        message,
    } = &report.status
    {
        return Err(CliError::Diverged(format!("epoch {epoch}, step {global_step}: {message}")));
    }
    println!(
        "final ranks {:?}, test loss {}, {} epochs",
        report.final_ranks,
        opt(report.test_loss),
        report.epochs.len()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct QuadSummary {
    pub n_quad: usize,
    pub n_ref: usize,
    pub seeds: usize,
    pub discretization_slope: f64,
    pub slope_in_range: bool,
    pub sampling_std_ratios: Vec<f64>,
    pub ratios_in_range: bool,
    pub coverage: CoverageReport,
}

pub const QUAD_HEADER: [&str; 4] = ["kind", "param", "error", "bound"];

pub fn cmd_quad_sweep(args: &QuadArgs) -> Result<(), CliError> {
    if args.n_list.is_empty() || args.m_list.is_empty() {
        return Err(CliError::Config {
            key: "n-list/m-list".into(),
            msg: "lists must be nonempty".into(),
        });
    }
    let setup = default_ig_setup(args.setup_seed)?;
    let path = setup.path(0);
    let disc = discretization_sweep(&path, &args.n_list, args.n_ref)?;
    let samp = sampling_sweep(&setup, args.n_quad, &args.m_list, args.seeds)?;
    let cov_cfg = CoverageConfig {
        n_quad: args.n_quad,
        m: args.coverage_m,
        trials: args.seeds,
        n_exact: args.n_ref,
        ..CoverageConfig::default()
    };
    let coverage = bound_coverage(&path, &cov_cfg, args.setup_seed)?;

    // Aggregate bounds over all entries for the CSV's bound column.
    let w: Vec<f64> = path
        .parameters()
        .iter()
        .flat_map(|(p, q)| p.data().iter().chain(q.data()).map(|v| v.abs()).collect::<Vec<_>>())
        .collect();
    let c2: Vec<f64> = c2_field(&path, cov_cfg.probes)?.values().collect();
    let wc2: f64 = w.iter().zip(&c2).map(|(w, c)| w * c).sum();
    let w_sum: f64 = w.iter().sum();
    let b_hat = b_field(&path, args.n_quad)?.max();
    let log_term = (1.0 / cov_cfg.delta).ln();

    fs::create_dir_all(&args.out)?;
    let rows = disc
        .points
        .iter()
        .map(|p| {
            let n = p.param as f64;
            vec!["discretization".into(), p.param.to_string(), p.error.to_string(), (wc2 / (12.0 * n * n)).to_string()]
        })
        .chain(samp.points.iter().map(|p| {
            let bound = cov_cfg.c_const * w_sum * b_hat * (log_term / p.param as f64).sqrt();
            vec!["sampling".into(), p.param.to_string(), p.error.to_string(), bound.to_string()]
        }));
    write_csv(&args.out.join("quad.csv"), &QUAD_HEADER, rows)?;
    let summary = QuadSummary {
        n_quad: args.n_quad,
        n_ref: args.n_ref,
        seeds: args.seeds,
        discretization_slope: disc.slope,
        slope_in_range: (-2.4..=-1.6).contains(&disc.slope),
        ratios_in_range: samp.std_ratios.iter().all(|r| (1.6..=2.4).contains(r)),
        sampling_std_ratios: samp.std_ratios.clone(),
        coverage,
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    if args.svg {
        let series = [Series {
            name: "trapezoid error".into(),
            points: disc.points.iter().map(|p| (p.param as f64, p.error)).collect(),
        }];
        let axes = Axes { log_x: true, log_y: true };
        fs::write(args.out.join("quad.svg"), line_chart("Discretization error", "N", "error", &series, axes))?;
    }
    println!(
        "slope {:.3}, std ratios {:?}, coverage {}",
        summary.discretization_slope, summary.sampling_std_ratios, summary.coverage.coverage
    );
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct SnrSummary {
    pub mu: f64,
    pub sigma: f64,
    pub replications: usize,
    pub steps: u64,
    pub monotone_median_deviation: Option<bool>,
    pub betas: Vec<SnrSimSummary>,
}

pub const SNR_HEADER: [&str; 4] = ["beta", "t", "median_snr", "median_deviation"];

pub fn cmd_snr_sim(args: &SnrArgs) -> Result<(), CliError> {
    if args.betas.is_empty() || args.betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
        return Err(CliError::Config {
            key: "betas".into(),
            msg: "need values in (0, 1)".into(),
        });
    }
    if !(args.mu > 0.0) || args.sigma < 0.0 || args.reps == 0 {
        return Err(CliError::Config {
            key: "mu/sigma/reps".into(),
            msg: "need mu > 0, sigma >= 0 and reps >= 1".into(),
        });
    }
    let base = SnrSimConfig {
        mu: args.mu,
        sigma: args.sigma,
        steps: args.steps,
        replications: args.reps,
        keep_trajectories: true,
        ..SnrSimConfig::default()
    };
    let results = args
        .betas
        .par_iter()
        .map(|&beta| snr_simulate(&SnrSimConfig { beta, ..base.clone() }, args.seed))
        .collect::<Result<Vec<_>, _>>()?;

    fs::create_dir_all(&args.out)?;
    let steps = args.steps as usize;
    let mut rows = Vec::with_capacity(results.len() * steps);
    let mut curves = Vec::new();
    for r in &results {
        let mut snr_at: Vec<Vec<f64>> = vec![Vec::with_capacity(args.reps); steps];
        let mut dev_at: Vec<Vec<f64>> = vec![Vec::with_capacity(args.reps); steps];
        for p in &r.trajectories {
            snr_at[p.t as usize - 1].push(p.snr);
            dev_at[p.t as usize - 1].push(p.deviation);
        }
        let mut curve = Vec::with_capacity(steps);
        for t in 0..steps {
            let ms = median(&snr_at[t]);
            let md = median(&dev_at[t]);
            rows.push(vec![r.summary.beta.to_string(), (t + 1).to_string(), ms.to_string(), md.to_string()]);
            curve.push(((t + 1) as f64, md));
        }
        curves.push(Series {
            name: format!("beta {}", r.summary.beta),
            points: curve,
        });
    }
    write_csv(&args.out.join("snr.csv"), &SNR_HEADER, rows)?;
    let summaries: Vec<SnrSimSummary> = results.into_iter().map(|r| r.summary).collect();
    let any_degenerate = summaries.iter().any(|s| s.degenerate);
    let summary = SnrSummary {
        mu: args.mu,
        sigma: args.sigma,
        replications: args.reps,
        steps: args.steps,
        monotone_median_deviation: (!any_degenerate).then(|| is_monotone_in_window(&summaries)),
        betas: summaries,
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    if args.svg {
        let axes = Axes { log_x: true, log_y: true };
        fs::write(
            args.out.join("snr.svg"),
            line_chart("Median |SNR - mu/d|", "t", "deviation", &curves, axes),
        )?;
    }
    for s in &summary.betas {
        println!(
            "beta {}: n_eff {:.2}, median deviation {}, coverage {}",
            s.beta,
            s.n_eff,
            opt(s.median_deviation),
            opt(s.coverage)
        );
    }
    Ok(())
}

pub fn cmd_grad_check(args: &GradArgs) -> Result<(), CliError> {
    let report = grad_check_suite(args.seed, args.configs, args.inject_fault)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if report.passed {
        return Ok(());
    }
    let loc = report
        .worst
        .map(|w| {
            format!(
                "config {} target {} layer {} factor {} index {}",
                w.config, w.target, w.layer, w.factor, w.index
            )
        })
        .unwrap_or_else(|| "no finite comparison".into());
    Err(CliError::Oracle(format!(
        "max relative error {:e} exceeds {:e} at {loc}",
        report.max_rel_error,
        igu_lora::experiments::GRAD_TOL
    )))
}

#[derive(Debug, Serialize)]
pub struct CompareSummary {
    pub seeds: Vec<u64>,
    pub median_test_loss_adaptive: f64,
    pub median_test_loss_fixed: f64,
    pub adaptive_not_worse: bool,
    pub params_adaptive: Vec<usize>,
    pub params_fixed: Vec<usize>,
}

pub const COMPARE_HEADER: [&str; 5] = ["seed", "method", "test_loss", "trainable_params", "final_ranks"];

pub fn cmd_compare(args: &CompareArgs) -> Result<(), CliError> {
    if let Some(b) = args.baselines.iter().find(|b| b.as_str() != "fixed-lora") {
        return Err(CliError::Config {
            key: "baselines".into(),
            msg: format!("unsupported baseline {b:?}"),
        });
    }
    if args.seeds == 0 {
        return Err(CliError::Config {
            key: "seeds".into(),
            msg: "need at least one seed".into(),
        });
    }
    let cfg = load_config(&args.config)?;
    let TaskSource::Planted(spec) = &cfg.task else {
        return Err(CliError::Config {
            key: "data_csv".into(),
            msg: "compare runs on the planted task only".into(),
        });
    };
    let base = cfg.train.seed;
    let seeds: Vec<u64> = (0..args.seeds).map(|i| base + i).collect();
    let per_seed = seeds
        .par_iter()
        .map(|&s| compare_seed(spec, &cfg.train, s))
        .collect::<Result<Vec<_>, _>>()?;
    let rows: Vec<CompareRow> = per_seed.into_iter().flatten().collect();

    fs::create_dir_all(&args.out)?;
    write_csv(
        &args.out.join("compare.csv"),
        &COMPARE_HEADER,
        rows.iter().map(|r| {
            vec![
                r.seed.to_string(),
                r.method.clone(),
                r.test_loss.to_string(),
                r.trainable_params.to_string(),
                r.final_ranks.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";"),
            ]
        }),
    )?;
    let pick = |m: &str| rows.iter().filter(|r| r.method == m).collect::<Vec<_>>();
    let (ad, fx) = (pick("igu-lora"), pick("fixed-lora"));
    let ma = median(&ad.iter().map(|r| r.test_loss).collect::<Vec<_>>());
    let mf = median(&fx.iter().map(|r| r.test_loss).collect::<Vec<_>>());
    let summary = CompareSummary {
        seeds,
        median_test_loss_adaptive: ma,
        median_test_loss_fixed: mf,
        adaptive_not_worse: ma <= mf,
        params_adaptive: ad.iter().map(|r| r.trainable_params).collect(),
        params_fixed: fx.iter().map(|r| r.trainable_params).collect(),
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    println!("median test loss: adaptive {ma:e}, fixed {mf:e}");
    Ok(())
}
