//! Temporal scoring: EMA-smoothed sensitivity, EMA absolute deviation and
//! their ratio, plus a Monte-Carlo simulator for the ratio's stability.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ig::ScoreField;
use crate::linalg::Prng;

/// Which smoothed mean the deviation term is measured against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyCentering {
    /// `|s_agg − s̄⁽ᵗ⁾|` with the freshly updated mean.
    #[default]
    Updated,
    /// `|s_agg − s̄⁽ᵗ⁻¹⁾|` with the previous mean.
    Prior,
}

/// Per-entry smoothed sensitivity `s̄` and uncertainty `Ū`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceState {
    pub s_bar: ScoreField,
    pub u_bar: ScoreField,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub centering: UncertaintyCentering,
}

fn check_beta(name: &str, b: f64, closed: bool) -> Result<()> {
    let ok = if closed { (0.0..=1.0).contains(&b) } else { b > 0.0 && b < 1.0 };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} = {b} out of range")))
    }
}

impl ImportanceState {
    /// Empty state; the first update adopts its observation as `s̄` with `Ū = 0`.
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        Self::from_parts(
            ScoreField { layers: Vec::new() },
            ScoreField { layers: Vec::new() },
            0,
            beta1,
            beta2,
            epsilon,
        )
    }

    /// State with explicit history. The smoothing factors may sit at the
    /// closed endpoints `0` and `1`.
    pub fn from_parts(
        s_bar: ScoreField,
        u_bar: ScoreField,
        t: u64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Result<Self> {
        check_beta("beta1", beta1, true)?;
        check_beta("beta2", beta2, true)?;
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be > 0".into()));
        }
        if !s_bar.same_shape(&u_bar) {
            return Err(Error::ShapeDrift("s_bar and u_bar differ in shape".into()));
        }
        Ok(Self {
            s_bar,
            u_bar,
            t,
            beta1,
            beta2,
            epsilon,
            centering: UncertaintyCentering::Updated,
        })
    }

    pub fn with_centering(mut self, c: UncertaintyCentering) -> Self {
        self.centering = c;
        self
    }

    pub fn is_initialized(&self) -> bool {
        !self.s_bar.layers.is_empty()
    }

    /// Keeps only the listed triplets of every layer (columns of the `P`
    /// field, rows of the `Q` field). History of retained triplets survives.
    pub fn reindex(&mut self, kept: &[Vec<usize>]) -> Result<()> {
        if !self.is_initialized() {
            return Ok(());
        }
        if kept.len() != self.s_bar.layers.len() {
            return Err(Error::ShapeDrift(format!(
                "reindex with {} layers for a {}-layer state",
                kept.len(),
                self.s_bar.layers.len()
            )));
        }
        for field in [&mut self.s_bar, &mut self.u_bar] {
            for ((p, q), idx) in field.layers.iter_mut().zip(kept) {
                if idx.iter().any(|&i| i >= p.cols()) {
                    return Err(Error::ShapeDrift("reindex beyond current rank".into()));
                }
                *p = p.select_columns(idx);
                *q = q.select_rows(idx);
            }
        }
        Ok(())
    }
}

/// One EMA step: `s̄ ← β₁s̄ + (1−β₁)s_agg` first, then
/// `Ū ← β₂Ū + (1−β₂)|s_agg − s̄|`.
pub fn update(state: &ImportanceState, s_agg: &ScoreField) -> Result<ImportanceState> {
    if !s_agg.is_valid() {
        return Err(Error::NonFinite("s_agg must be finite and non-negative".into()));
    }
    let mut next = state.clone();
    next.t = state.t + 1;
    if !state.is_initialized() {
        next.s_bar = s_agg.clone();
        next.u_bar = s_agg.map(|_| 0.0);
        return Ok(next);
    }
    if !state.s_bar.same_shape(s_agg) {
        return Err(Error::ShapeDrift(
            "s_agg does not match the importance state; reindex after pruning".into(),
        ));
    }
    let (b1, b2) = (state.beta1, state.beta2);
    next.s_bar = state.s_bar.zip_with(s_agg, |s, y| b1 * s + (1.0 - b1) * y)?;
    let centre = match state.centering {
        UncertaintyCentering::Updated => &next.s_bar,
        UncertaintyCentering::Prior => &state.s_bar,
    };
    let dev = s_agg.zip_with(centre, |y, s| (y - s).abs())?;
    next.u_bar = state.u_bar.zip_with(&dev, |u, d| b2 * u + (1.0 - b2) * d)?;
    Ok(next)
}

/// `s̄ / (Ū + ε)` entrywise.
pub fn snr(state: &ImportanceState) -> ScoreField {
    let eps = state.epsilon;
    state
        .s_bar
        .zip_with(&state.u_bar, |s, u| s / (u + eps))
        .expect("state fields share a shape")
}

/// Effective sample count `(1+β)/(1−β)` of a geometric moving average.
pub fn effective_window(beta: f64) -> f64 {
    (1.0 + beta) / (1.0 - beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BurnIn {
    pub steps: u64,
    /// Set when `δ ≥ c₂` made the logarithm non-positive and `steps` was clamped to 1.
    pub clamped: bool,
}

/// `⌈c₁/(1−β_min) · log(c₂/δ)⌉`.
pub fn burn_in(beta_min: f64, delta: f64, c1: f64, c2: f64) -> Result<BurnIn> {
    if !(0.0..1.0).contains(&beta_min) {
        return Err(Error::InvalidArgument(format!("beta {beta_min} outside [0, 1)")));
    }
    if !(delta > 0.0 && delta < 1.0) || !(c1 > 0.0) || !(c2 > 0.0) {
        return Err(Error::InvalidArgument("burn-in needs delta in (0,1) and c1, c2 > 0".into()));
    }
    let log = (c2 / delta).ln();
    if log <= 0.0 {
        return Ok(BurnIn { steps: 1, clamped: true });
    }
    let steps = (c1 / (1.0 - beta_min) * log).ceil();
    Ok(BurnIn {
        steps: (steps as u64).max(1),
        clamped: false,
    })
}

/// Stability simulation for one smoothing factor `β = β₁ = β₂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrSimConfig {
    pub mu: f64,
    pub sigma: f64,
    pub beta: f64,
    pub steps: u64,
    pub replications: usize,
    pub delta: f64,
    pub c1: f64,
    pub c2: f64,
    pub c0: f64,
    pub epsilon: f64,
    /// Monte-Carlo sample count for the `d = E|y − μ|` oracle.
    pub oracle_samples: usize,
    pub centering: UncertaintyCentering,
    pub keep_trajectories: bool,
}

impl Default for SnrSimConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            sigma: 0.2,
            beta: 0.85,
            steps: 1000,
            replications: 200,
            delta: 0.05,
            c1: 2.0,
            c2: 2.0,
            c0: 1.0,
            epsilon: 1e-6,
            oracle_samples: 1_000_000,
            centering: UncertaintyCentering::Updated,
            keep_trajectories: false,
        }
    }
}

/// One recorded step of one replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrPoint {
    pub replication: usize,
    pub t: u64,
    pub snr: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrSimSummary {
    pub beta: f64,
    pub n_eff: f64,
    pub burn_in: BurnIn,
    pub mu_hat: f64,
    pub d_hat: f64,
    /// `d̂ < 1e-9`: the target ratio `μ/d` does not exist.
    pub degenerate: bool,
    pub target: Option<f64>,
    /// Constant `C` of the deviation bound.
    pub c_bound: Option<f64>,
    pub deviation_bound: Option<f64>,
    /// Median post-burn-in `|SNR_t − μ/d|` with `ε` kept.
    pub median_deviation: Option<f64>,
    /// Same with `ε` dropped (`s̄/Ū`).
    pub median_deviation_no_eps: Option<f64>,
    /// Fraction of replications whose final-step deviation is within the bound.
    pub coverage: Option<f64>,
    /// Fraction of all post-burn-in (replication, step) pairs within the bound.
    pub pooled_coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrSimResult {
    pub summary: SnrSimSummary,
    pub trajectories: Vec<SnrPoint>,
}

/// Minimum replications for a reported coverage rate.
pub const MIN_COVERAGE_REPS: usize = 50;
const DEGENERATE_D: f64 = 1e-9;

fn truncated_normal(rng: &mut Prng, mu: f64, sigma: f64) -> f64 {
    loop {
        let y = mu + sigma * rng.normal();
        if y >= 0.0 {
            return y;
        }
    }
}

/// Monte-Carlo `(E[y], E|y − E[y]|)` for `y ~ N(μ, σ²)` truncated at 0.
pub fn mean_abs_deviation_oracle(mu: f64, sigma: f64, samples: usize, rng: &mut Prng) -> (f64, f64) {
    let ys: Vec<f64> = (0..samples).map(|_| truncated_normal(rng, mu, sigma)).collect();
    let m = ys.iter().sum::<f64>() / samples as f64;
    let d = ys.iter().map(|y| (y - m).abs()).sum::<f64>() / samples as f64;
    (m, d)
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Runs `replications` independent score streams through [`update`] and
/// [`snr`] and measures post-burn-in deviation from `μ/d`.
pub fn snr_simulate(cfg: &SnrSimConfig, seed: u64) -> Result<SnrSimResult> {
    if !(cfg.mu > 0.0) || cfg.sigma < 0.0 || cfg.replications == 0 || cfg.oracle_samples == 0 {
        return Err(Error::InvalidArgument(
            "snr simulation needs mu > 0, sigma >= 0, replications >= 1".into(),
        ));
    }
    check_beta("beta", cfg.beta, false)?;
    let burn = burn_in(cfg.beta, cfg.delta, cfg.c1, cfg.c2)?;
    if cfg.steps < burn.steps {
        return Err(Error::InvalidArgument(format!(
            "steps {} shorter than burn-in {}",
            cfg.steps, burn.steps
        )));
    }
    let root = Prng::new(seed);
    let (mu_hat, d_hat) =
        mean_abs_deviation_oracle(cfg.mu, cfg.sigma, cfg.oracle_samples, &mut root.stream("snr-oracle"));
    let degenerate = d_hat < DEGENERATE_D;
    let n_eff = effective_window(cfg.beta);
    let target = (!degenerate).then(|| mu_hat / d_hat);
    let c_bound = (!degenerate).then(|| {
        2.0 * 2f64.sqrt() * cfg.sigma / d_hat + 2.0 * cfg.c0 * mu_hat / (d_hat * d_hat) * (cfg.sigma + d_hat)
    });
    let deviation_bound = c_bound.map(|c| c * ((2.0 / cfg.delta).ln() / n_eff).sqrt());

    let mut deviations = Vec::new();
    let mut deviations_no_eps = Vec::new();
    let mut trajectories = Vec::new();
    let mut final_within = 0usize;
    let mut pooled_within = 0usize;
    for rep in 0..cfg.replications {
        let mut rng = root.stream_indexed("snr-rep", rep as u64);
        let mut state = ImportanceState::new(cfg.beta, cfg.beta, cfg.epsilon)?.with_centering(cfg.centering);
        let mut last_dev = f64::NAN;
        for t in 1..=cfg.steps {
            let y = truncated_normal(&mut rng, cfg.mu, cfg.sigma);
            let obs = ScoreField {
                layers: vec![(crate::linalg::Matrix::from_rows(&[[y]]), crate::linalg::Matrix::zeros(0, 0))],
            };
            state = update(&state, &obs)?;
            let s = state.s_bar.layers[0].0[(0, 0)];
            let u = state.u_bar.layers[0].0[(0, 0)];
            let ratio = s / (u + cfg.epsilon);
            let dev = target.map_or(f64::NAN, |tg| (ratio - tg).abs());
            if t >= burn.steps {
                if let (Some(tg), Some(b)) = (target, deviation_bound) {
                    deviations.push(dev);
                    if u > 0.0 {
                        deviations_no_eps.push((s / u - tg).abs());
                    }
                    if dev <= b {
                        pooled_within += 1;
                    }
                }
            }
            if cfg.keep_trajectories {
                trajectories.push(SnrPoint {
                    replication: rep,
                    t,
                    snr: ratio,
                    deviation: dev,
                });
            }
            last_dev = dev;
        }
        if deviation_bound.is_some_and(|b| last_dev <= b) {
            final_within += 1;
        }
    }

    let post_steps = (cfg.steps - burn.steps + 1) as usize;
    let enough = cfg.replications >= MIN_COVERAGE_REPS && !degenerate;
    let summary = SnrSimSummary {
        beta: cfg.beta,
        n_eff,
        burn_in: burn,
        mu_hat,
        d_hat,
        degenerate,
        target,
        c_bound,
        deviation_bound,
        median_deviation: median(&mut deviations),
        median_deviation_no_eps: median(&mut deviations_no_eps),
        coverage: enough.then(|| final_within as f64 / cfg.replications as f64),
        pooled_coverage: enough.then(|| pooled_within as f64 / (cfg.replications * post_steps) as f64),
    };
    Ok(SnrSimResult {
        summary,
        trajectories,
    })
}

/// [`snr_simulate`] for several smoothing factors sharing one seed.
pub fn snr_sweep(base: &SnrSimConfig, betas: &[f64], seed: u64) -> Result<Vec<SnrSimResult>> {
    betas
        .iter()
        .map(|&beta| snr_simulate(&SnrSimConfig { beta, ..base.clone() }, seed))
        .collect()
}

/// True when median deviation never increases as `n_eff` grows.
pub fn is_monotone_in_window(summaries: &[SnrSimSummary]) -> bool {
    let mut sorted: Vec<&SnrSimSummary> = summaries.iter().collect();
    sorted.sort_by(|a, b| a.n_eff.total_cmp(&b.n_eff));
    sorted.windows(2).all(|w| match (w[0].median_deviation, w[1].median_deviation) {
        (Some(a), Some(b)) => b <= a,
        _ => false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn one(v: f64) -> ScoreField {
        ScoreField {
            layers: vec![(Matrix::from_rows(&[[v]]), Matrix::zeros(1, 0))],
        }
    }

    fn val(f: &ScoreField) -> f64 {
        f.layers[0].0[(0, 0)]
    }

    #[test]
    fn worked_update() {
        let s = ImportanceState::from_parts(one(1.0), one(0.0), 3, 0.85, 0.85, 1e-6).unwrap();
        let n = update(&s, &one(2.0)).unwrap();
        assert!((val(&n.s_bar) - 1.15).abs() < 1e-12);
        assert!((val(&n.u_bar) - 0.1275).abs() < 1e-12);
        assert_eq!(n.t, 4);
    }

    #[test]
    fn memoryless_and_frozen_limits() {
        let s = ImportanceState::from_parts(one(1.0), one(0.3), 1, 0.0, 0.5, 1e-6).unwrap();
        assert_eq!(val(&update(&s, &one(2.5)).unwrap().s_bar), 2.5);
        let f = ImportanceState::from_parts(one(1.0), one(0.3), 1, 1.0, 0.5, 1e-6).unwrap();
        assert_eq!(val(&update(&f, &one(2.5)).unwrap().s_bar), 1.0);
    }

    #[test]
    fn first_observation_initializes() {
        let s = ImportanceState::new(0.85, 0.85, 1e-6).unwrap();
        let n = update(&s, &one(0.7)).unwrap();
        assert_eq!(val(&n.s_bar), 0.7);
        assert_eq!(val(&n.u_bar), 0.0);
        assert_eq!(n.t, 1);
    }

    #[test]
    fn prior_centering_variant() {
        let s = ImportanceState::from_parts(one(1.0), one(0.0), 1, 0.85, 0.85, 1e-6)
            .unwrap()
            .with_centering(UncertaintyCentering::Prior);
        let n = update(&s, &one(2.0)).unwrap();
        assert!((val(&n.u_bar) - 0.15).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_requires_reindex() {
        let s = ImportanceState::from_parts(one(1.0), one(0.0), 1, 0.85, 0.85, 1e-6).unwrap();
        let wide = ScoreField {
            layers: vec![(Matrix::zeros(1, 2), Matrix::zeros(2, 0))],
        };
        assert!(matches!(update(&s, &wide), Err(Error::ShapeDrift(_))));
        assert!(update(&s, &one(-1.0)).is_err());
    }

    #[test]
    fn reindex_keeps_selected_history() {
        let p = Matrix::from_rows(&[[1.0, 2.0, 3.0]]);
        let q = Matrix::from_rows(&[[10.0], [20.0], [30.0]]);
        let f = ScoreField { layers: vec![(p, q)] };
        let mut s = ImportanceState::from_parts(f.clone(), f, 2, 0.85, 0.85, 1e-6).unwrap();
        s.reindex(&[vec![0, 2]]).unwrap();
        assert_eq!(s.s_bar.layers[0].0, Matrix::from_rows(&[[1.0, 3.0]]));
        assert_eq!(s.u_bar.layers[0].1, Matrix::from_rows(&[[10.0], [30.0]]));
        assert!(s.reindex(&[vec![5]]).is_err());
    }

    #[test]
    fn snr_cases() {
        let s = ImportanceState::from_parts(one(0.0), one(0.4), 1, 0.85, 0.85, 1e-6).unwrap();
        assert_eq!(val(&snr(&s)), 0.0);
        let s = ImportanceState::from_parts(one(1.0), one(0.5), 1, 0.85, 0.85, 1e-6).unwrap();
        assert!((val(&snr(&s)) - 1.0 / 0.500001).abs() < 1e-15);
        assert!((val(&snr(&s)) - 1.999996).abs() < 1e-6);
    }

    #[test]
    fn constant_stream_drives_snr_to_mu_over_eps() {
        let mu = 0.8;
        let eps = 1e-6;
        let mut s = ImportanceState::new(0.85, 0.85, eps).unwrap();
        for _ in 0..200 {
            s = update(&s, &one(mu)).unwrap();
        }
        assert!(val(&snr(&s)) > 0.99 * mu / eps);
    }

    #[test]
    fn windows_and_burn_in() {
        assert_eq!(effective_window(0.0), 1.0);
        assert_eq!(effective_window(0.5), 3.0);
        assert!((effective_window(0.85) - 37.0 / 3.0).abs() < 1e-12);

        let b = burn_in(0.85, 0.05, 2.0, 2.0).unwrap();
        assert_eq!(b, BurnIn { steps: 50, clamped: false });
        let delta: f64 = 0.05;
        let b = burn_in(0.6, delta, 1.0, std::f64::consts::E * delta).unwrap();
        assert_eq!(b.steps, (1.0f64 / 0.4).ceil() as u64);
        let clamped = burn_in(0.85, 0.5, 2.0, 0.4).unwrap();
        assert_eq!(clamped, BurnIn { steps: 1, clamped: true });
        let small = burn_in(0.1, 0.05, 2.0, 2.0).unwrap().steps;
        let mid = burn_in(0.5, 0.05, 2.0, 2.0).unwrap().steps;
        assert!(small <= mid && mid <= b_steps(0.9));
    }

    fn b_steps(beta: f64) -> u64 {
        burn_in(beta, 0.05, 2.0, 2.0).unwrap().steps
    }

    #[test]
    fn half_normal_oracle() {
        let mut rng = Prng::new(12);
        let (_, d) = mean_abs_deviation_oracle(1.0, 0.2, 1_000_000, &mut rng);
        let exact = 0.2 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((exact - 0.159_576_9).abs() < 1e-7);
        assert!((d - exact).abs() < 1e-3);
    }

    #[test]
    fn zero_noise_is_degenerate() {
        let cfg = SnrSimConfig {
            sigma: 0.0,
            replications: 60,
            steps: 100,
            oracle_samples: 1000,
            ..SnrSimConfig::default()
        };
        let r = snr_simulate(&cfg, 1).unwrap();
        assert!(r.summary.degenerate);
        assert!(r.summary.target.is_none() && r.summary.coverage.is_none());
    }

    #[test]
    fn single_replication_has_no_coverage() {
        let cfg = SnrSimConfig {
            replications: 1,
            steps: 100,
            oracle_samples: 10_000,
            ..SnrSimConfig::default()
        };
        let r = snr_simulate(&cfg, 1).unwrap();
        assert!(r.summary.coverage.is_none());
        assert!(r.summary.median_deviation.is_some());
    }

    #[test]
    fn steps_shorter_than_burn_in_rejected() {
        let cfg = SnrSimConfig {
            steps: 10,
            ..SnrSimConfig::default()
        };
        assert!(snr_simulate(&cfg, 1).is_err());
    }
}
