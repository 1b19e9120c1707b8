//! Reproducible measurement harnesses: quadrature error scaling, sampling
//! variance, error-bound coverage and planted-task comparisons.

use serde::{Deserialize, Serialize};

use crate::alloc::PruneSchedule;
use crate::error::{Error, Result};
use crate::ig::{c2_field, ig_full, node_gradients, single_node_score, error_bound, trapezoid_integral, b_field, BoundInputs, PathGradient, ViewPath};
use crate::linalg::{Matrix, Prng, SvdView};
use crate::model::{finite_diff_grad, grad_ab, grad_pq, worst_relative_error, Activation, Batch, FactorGrads, GradTarget, LossKind, Network};
use crate::tasks::{gen_planted, student_from, PlantedSpec};
use crate::trainer::{layer_views, train, RunReport, TrainConfig};

/// A fixed adapted network with its canonical views and a pool of batches.
#[derive(Debug, Clone)]
pub struct IgSetup {
    pub net: Network,
    pub views: Vec<SvdView>,
    pub batches: Vec<Batch>,
}

impl IgSetup {
    pub fn path(&self, batch: usize) -> ViewPath<'_> {
        ViewPath::new(&self.net, &self.views, &self.batches[batch])
    }
}

pub const DEFAULT_DIMS: [usize; 3] = [16, 32, 8];

/// Default 16→32→8 tanh network with a rank-4 adapter whose `B` is drawn
/// at unit scale, plus 16 random regression batches of 32 rows.
pub fn default_ig_setup(seed: u64) -> Result<IgSetup> {
    let mut rng = Prng::new(seed).stream("ig-setup");
    let mut net = Network::init_lora(&DEFAULT_DIMS, 4, Activation::Tanh, LossKind::MeanSquaredError, &mut rng)?;
    for layer in &mut net.layers {
        let scale = 1.0 / (layer.rank() as f64).sqrt();
        layer.b = Matrix::from_fn(layer.rank(), layer.d_out(), |_, _| scale * rng.normal());
    }
    let views = layer_views(&net)?;
    let batches = (0..16)
        .map(|_| {
            let x = Matrix::from_fn(32, DEFAULT_DIMS[0], |_, _| rng.normal());
            let y = Matrix::from_fn(32, DEFAULT_DIMS[2], |_, _| rng.normal());
            Batch::new(x, y)
        })
        .collect::<Result<_>>()?;
    Ok(IgSetup { net, views, batches })
}

fn flat(g: &[FactorGrads]) -> Vec<f64> {
    g.iter().flat_map(|(p, q)| p.data().iter().chain(q.data()).copied()).collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("slope fit needs two or more points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("log-log fit needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: usize,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationSweep {
    pub n_ref: usize,
    pub points: Vec<SweepPoint>,
    pub slope: f64,
}

/// Composite-trapezoid error `Σ |w|·|T_N − T_ref|` over every entry for each
/// `N`, against an `n_ref`-interval reference, with the fitted log-log slope.
pub fn discretization_sweep(path: &impl PathGradient, n_list: &[usize], n_ref: usize) -> Result<DiscretizationSweep> {
    if n_list.is_empty() {
        return Err(Error::InvalidArgument("empty N list".into()));
    }
    let w = flat(&path.parameters());
    let reference = flat(&trapezoid_integral(path, n_ref)?);
    let points = n_list
        .iter()
        .map(|&n| {
            let t = flat(&trapezoid_integral(path, n)?);
            let error = w.iter().zip(t.iter().zip(&reference)).map(|(w, (a, b))| w.abs() * (a - b).abs()).sum();
            Ok(SweepPoint { param: n, error })
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = points.iter().map(|p| p.param as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.error).collect();
    Ok(DiscretizationSweep {
        n_ref,
        slope: loglog_slope(&xs, &ys)?,
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSweep {
    pub n_quad: usize,
    pub seeds: usize,
    /// `error` holds the across-seed standard deviation for each `M`.
    pub points: Vec<SweepPoint>,
    /// `std(M_i) / std(M_{i+1})` for consecutive list entries.
    pub std_ratios: Vec<f64>,
}

/// Spread of the `M`-batch mean of single-node scores (summed over all
/// entries). Each draw picks a batch from the pool and an interior node
/// uniformly at random.
pub fn sampling_sweep(setup: &IgSetup, n_quad: usize, m_list: &[usize], seeds: usize) -> Result<SamplingSweep> {
    if m_list.is_empty() || seeds < 2 || n_quad < 2 {
        return Err(Error::InvalidArgument("need M values, >= 2 seeds and N >= 2".into()));
    }
    let mut table: Vec<Vec<f64>> = Vec::with_capacity(setup.batches.len());
    for b in 0..setup.batches.len() {
        let path = setup.path(b);
        let params = path.parameters();
        let nodes = node_gradients(&path, n_quad)?;
        table.push(
            (1..n_quad)
                .map(|k| single_node_score(&params, n_quad, &nodes[0], &nodes[k], &nodes[n_quad]).sum())
                .collect(),
        );
    }
    let points: Vec<SweepPoint> = m_list
        .iter()
        .map(|&m| {
            let means: Vec<f64> = (0..seeds as u64)
                .map(|s| {
                    let mut rng = Prng::new(s).stream_indexed("sampling", m as u64);
                    (0..m)
                        .map(|_| {
                            let b = rng.index(table.len());
                            table[b][rng.index(n_quad - 1)]
                        })
                        .sum::<f64>()
                        / m as f64
                })
                .collect();
            SweepPoint {
                param: m,
                error: sample_std(&means),
            }
        })
        .collect();
    let std_ratios = points.windows(2).map(|w| w[0].error / w[1].error).collect();
    Ok(SamplingSweep {
        n_quad,
        seeds,
        points,
        std_ratios,
    })
}

fn sample_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub n_quad: usize,
    pub m: usize,
    pub trials: usize,
    pub probes: usize,
    pub delta: f64,
    pub c_const: f64,
    pub n_exact: usize,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            n_quad: 20,
            m: 16,
            trials: 200,
            probes: 32,
            delta: 0.05,
            c_const: 1.0,
            n_exact: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub config: CoverageConfig,
    pub entries: usize,
    pub b_hat: f64,
    pub c2_max: f64,
    /// Trials in which every entry of the unbiased node-mean estimator
    /// `|w|·|(g₀ + 2(N−1)·ḡ_M + g₁)/(2N)|` lies within its bound.
    pub coverage: f64,
    /// Same, for the mean of single-node scores `|w|/(2N)·|g₀ + 2g(α_k) + g₁|`.
    pub coverage_single_node: f64,
    pub worst_gap_ratio: f64,
}

/// Fraction of trials whose `M`-draw estimate stays within the per-entry
/// bound `|w|Ĉ₂/(12N²) + c|w|B̂·sqrt(log(1/δ)/M)` of the exact score.
pub fn bound_coverage(path: &impl PathGradient, cfg: &CoverageConfig, seed: u64) -> Result<CoverageReport> {
    let n = cfg.n_quad;
    if n < 2 || cfg.m == 0 || cfg.trials == 0 {
        return Err(Error::InvalidArgument("coverage needs N >= 2, M >= 1 and trials >= 1".into()));
    }
    let w = flat(&path.parameters());
    let exact: Vec<f64> = ig_full(path, cfg.n_exact)?.values().collect();
    let c2 = c2_field(path, cfg.probes)?;
    let b_hat = b_field(path, n)?.max();
    let bounds = w
        .iter()
        .zip(c2.values())
        .map(|(w, c2)| {
            let inputs = BoundInputs {
                c2_hat: c2,
                b_hat,
                delta: cfg.delta,
                c_const: cfg.c_const,
            };
            error_bound(w.abs(), &inputs, n, cfg.m)
        })
        .collect::<Result<Vec<f64>>>()?;
    let nodes: Vec<Vec<f64>> = node_gradients(path, n)?.iter().map(|g| flat(g)).collect();
    let (g0, g1) = (&nodes[0], &nodes[n]);
    let h = 1.0 / (2.0 * n as f64);

    let mut covered = 0usize;
    let mut covered_single = 0usize;
    let mut worst = 0.0f64;
    let root = Prng::new(seed);
    for trial in 0..cfg.trials {
        let mut rng = root.stream_indexed("coverage", trial as u64);
        let ks: Vec<usize> = (0..cfg.m).map(|_| 1 + rng.index(n - 1)).collect();
        let mut ok = true;
        let mut ok_single = true;
        for i in 0..w.len() {
            let mean_g = ks.iter().map(|&k| nodes[k][i]).sum::<f64>() / cfg.m as f64;
            let unbiased = w[i].abs() * (h * (g0[i] + 2.0 * (n - 1) as f64 * mean_g + g1[i])).abs();
            let single = ks
                .iter()
                .map(|&k| w[i].abs() * h * (g0[i] + 2.0 * nodes[k][i] + g1[i]).abs())
                .sum::<f64>()
                / cfg.m as f64;
            let gap = (exact[i] - unbiased).abs();
            if bounds[i] > 0.0 {
                worst = worst.max(gap / bounds[i]);
            }
            ok &= gap <= bounds[i];
            ok_single &= (exact[i] - single).abs() <= bounds[i];
        }
        covered += ok as usize;
        covered_single += ok_single as usize;
    }
    Ok(CoverageReport {
        config: cfg.clone(),
        entries: w.len(),
        b_hat,
        c2_max: c2.max(),
        coverage: covered as f64 / cfg.trials as f64,
        coverage_single_node: covered_single as f64 / cfg.trials as f64,
        worst_gap_ratio: worst,
    })
}

/// Generates the planted task for `spec`, builds a fresh student at the
/// schedule's `r0` and trains it.
pub fn run_planted(spec: &PlantedSpec, cfg: &TrainConfig) -> Result<(RunReport, Network)> {
    let (data, teacher) = gen_planted(spec)?;
    let mut rng = Prng::new(cfg.seed).stream("student");
    let student = student_from(&teacher, cfg.schedule.r0, &mut rng)?;
    train(student, &data, cfg)
}

/// Fixed-rank baseline: uniform rank `b_final / L` with a schedule whose
/// budget never drops, so it follows the same protocol (including the
/// post-schedule early stopping) without changing capacity.
pub fn fixed_rank_config(cfg: &TrainConfig, n_layers: usize) -> TrainConfig {
    let r = (cfg.schedule.b_final / n_layers).max(1);
    TrainConfig {
        schedule: PruneSchedule {
            r0: r,
            b_final: r * n_layers,
            ..cfg.schedule.clone()
        },
        ..cfg.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub seed: u64,
    pub method: String,
    pub test_loss: f64,
    pub trainable_params: usize,
    pub final_ranks: Vec<usize>,
}

/// Adaptive and fixed-rank runs on the planted task for one seed (used for
/// both data generation and training).
pub fn compare_seed(spec: &PlantedSpec, cfg: &TrainConfig, seed: u64) -> Result<[CompareRow; 2]> {
    let spec = PlantedSpec { seed, ..spec.clone() };
    let adaptive = TrainConfig { seed, ..cfg.clone() };
    let fixed = fixed_rank_config(&adaptive, spec.ranks.len());
    let row = |method: &str, c: &TrainConfig| -> Result<CompareRow> {
        let (rep, _) = run_planted(&spec, c)?;
        let test_loss = rep
            .test_loss
            .ok_or_else(|| Error::NonFinite(format!("{method} run diverged on seed {seed}")))?;
        Ok(CompareRow {
            seed,
            method: method.to_string(),
            test_loss,
            trainable_params: rep.trainable_params,
            final_ranks: rep.final_ranks,
        })
    };
    Ok([row("igu-lora", &adaptive)?, row("fixed-lora", &fixed)?])
}

/// Median of a slice (mean of the middle pair for even lengths).
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Pass threshold of the finite-difference gradient suite.
pub const GRAD_TOL: f64 = 1e-5;
pub const GRAD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradWorst {
    pub config: usize,
    /// `"ab"` or `"pq"`.
    pub target: &'static str,
    pub layer: usize,
    /// 0 for `A`/`P`, 1 for `B`/`Q`.
    pub factor: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub configs: usize,
    pub step: f64,
    pub max_rel_error: f64,
    pub worst: Option<GradWorst>,
    pub passed: bool,
}

/// Analytic `A`/`B` and `P`/`Q` gradients against central differences on
/// `configs` random smooth (tanh) networks. ReLU is excluded because its
/// kink makes central differences unreliable. `fault` is added to one
/// analytic entry per check to exercise the failure path.
pub fn grad_check_suite(seed: u64, configs: usize, fault: f64) -> Result<GradCheckReport> {
    let root = Prng::new(seed);
    let mut max_err = 0.0f64;
    let mut worst = None;
    for c in 0..configs {
        let mut rng = root.stream_indexed("grad-check", c as u64);
        let depth = 2 + rng.index(2);
        let dims: Vec<usize> = (0..=depth).map(|_| 2 + rng.index(7)).collect();
        let cap = dims.windows(2).map(|w| w[0].min(w[1])).min().expect("depth >= 2");
        let rank = 1 + rng.index(cap);
        let loss = if c % 4 == 3 { LossKind::SoftmaxCrossEntropy } else { LossKind::MeanSquaredError };
        let mut net = Network::init_lora(&dims, rank, Activation::Tanh, loss, &mut rng)?;
        for l in &mut net.layers {
            l.b = Matrix::from_fn(rank, l.d_out(), |_, _| 0.5 * rng.normal());
        }
        let rows = 5;
        let x = Matrix::from_fn(rows, dims[0], |_, _| rng.normal());
        let d_out = *dims.last().expect("non-empty");
        let y = match loss {
            LossKind::SoftmaxCrossEntropy => Matrix::from_fn(rows, 1, |_, _| rng.index(d_out) as f64),
            LossKind::MeanSquaredError => Matrix::from_fn(rows, d_out, |_, _| rng.normal()),
        };
        let batch = Batch::new(x, y)?;
        let alpha = 0.1 + 0.9 * rng.uniform();
        let views = layer_views(&net)?;
        let checks = [
            ("ab", grad_ab(&net, &batch, alpha)?, finite_diff_grad(&net, &batch, alpha, GradTarget::Ab, GRAD_STEP)?),
            (
                "pq",
                grad_pq(&net, &views, &batch, alpha)?,
                finite_diff_grad(&net, &batch, alpha, GradTarget::Pq(&views), GRAD_STEP)?,
            ),
        ];
        for (target, mut analytic, fd) in checks {
            if fault != 0.0 {
                analytic[0].0.data_mut()[0] += fault;
            }
            let (err, (layer, factor, index)) = worst_relative_error(&analytic, &fd);
            if !(err <= max_err) {
                max_err = err;
                worst = Some(GradWorst {
                    config: c,
                    target,
                    layer,
                    factor,
                    index,
                });
            }
        }
    }
    Ok(GradCheckReport {
        configs,
        step: GRAD_STEP,
        max_rel_error: max_err,
        worst,
        passed: max_err <= GRAD_TOL,
    })
}
