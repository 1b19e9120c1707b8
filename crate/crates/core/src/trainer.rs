//! Adaptive-rank training loop: optimizer steps on `A`/`B`, per-batch
//! stochastic IG scoring, epoch-level EMA smoothing, scheduled global
//! pruning and early-stopped fine-tuning.

use serde::{Deserialize, Serialize};

use crate::alloc::{budget_at, per_layer, prune_rebuild, select_top_b, triplet_scores, PruneSchedule, TripletScore};
use crate::error::{Error, Result};
use crate::ig::{aggregate_epoch, ig_at_node, ig_full, Factor, PathGradient, QuadMode, ScoreField, ViewPath};
use crate::linalg::{svd_thin, Matrix, Prng, SvdView};
use crate::model::{forward_loss, Batch, Network};
use crate::score::{snr, update, ImportanceState, UncertaintyCentering};
use crate::tasks::Dataset;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Score at the path endpoint `α = 1` instead of a sampled interior node.
    NoAlpha,
    /// Rank triplets by `s̄·Ū` instead of the signal-to-noise ratio.
    MultiplicativeScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub n_quad: usize,
    /// Per-batch estimator; [`QuadMode::Full`] sweeps every node.
    pub quad_mode: QuadMode,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub schedule: PruneSchedule,
    pub optimizer: OptimizerKind,
    /// Validation evaluations without improvement before fine-tuning stops.
    pub patience: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Recompute the SVD view every this many steps (1 = every batch).
    pub svd_every: usize,
    pub centering: UncertaintyCentering,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            batch_size: 64,
            epochs: 20,
            n_quad: 20,
            quad_mode: QuadMode::Stochastic,
            beta1: 0.85,
            beta2: 0.85,
            epsilon: 1e-6,
            schedule: PruneSchedule::new(8, 8, 4.0, 10.0, 0.2),
            optimizer: OptimizerKind::Adam,
            patience: 10,
            seed: 0,
            ablation: Ablation::None,
            svd_every: 1,
            centering: UncertaintyCentering::Updated,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, net: &Network) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and > 0");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.svd_every == 0 {
            return bad("batch_size, epochs and svd_every must be >= 1");
        }
        if self.n_quad < 2 {
            return bad("n_quad must be >= 2");
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("{name} = {b} out of range")));
            }
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be > 0");
        }
        self.schedule.validate(net.layers.len())?;
        for l in &net.layers {
            if l.rank() != self.schedule.r0 {
                return Err(Error::InvalidArgument(format!(
                    "layer {} has rank {}, schedule expects r0 = {}",
                    l.layer_id,
                    l.rank(),
                    self.schedule.r0
                )));
            }
            if l.rank() > l.d_in().min(l.d_out()) {
                return Err(Error::InvalidArgument(format!(
                    "rank {} exceeds min dim of layer {}",
                    l.rank(),
                    l.layer_id
                )));
            }
        }
        Ok(())
    }
}

/// First-order optimizer state over a flat list of parameter matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Drops moment estimates, e.g. after parameter shapes change.
    pub fn reset(&mut self) {
        self.t = 0;
        self.m.clear();
        self.v.clear();
    }
}

/// In-place update: SGD `p ← p − lr·g`, or bias-corrected Adam.
pub fn optimizer_step(params: &mut [Matrix], grads: &[Matrix], opt: &mut Optimizer) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters, {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::DimensionMismatch {
                op: "optimizer step",
                left: p.shape(),
                right: g.shape(),
            });
        }
    }
    let lr = opt.learning_rate;
    let updated: Vec<Matrix> = match opt.kind {
        OptimizerKind::Sgd => params
            .iter()
            .zip(grads)
            .map(|(p, g)| p.add_scaled(g, -lr))
            .collect::<Result<_>>()?,
        OptimizerKind::Adam => {
            let fresh = opt.m.len() != params.len()
                || opt.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape());
            if fresh {
                opt.t = 0;
                opt.m = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
                opt.v = opt.m.clone();
            }
            opt.t += 1;
            let c1 = 1.0 - ADAM_BETA1.powi(opt.t as i32);
            let c2 = 1.0 - ADAM_BETA2.powi(opt.t as i32);
            let mut out = Vec::with_capacity(params.len());
            for ((p, g), (m, v)) in params.iter().zip(grads).zip(opt.m.iter_mut().zip(opt.v.iter_mut())) {
                *m = m.zip_with(g, "adam m", |m, g| ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g)?;
                *v = v.zip_with(g, "adam v", |v, g| ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g)?;
                let step = m.zip_with(v, "adam step", |m, v| (m / c1) / ((v / c2).sqrt() + ADAM_EPS))?;
                out.push(p.add_scaled(&step, -lr)?);
            }
            out
        }
    };
    if updated.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("optimizer produced a non-finite parameter".into()));
    }
    for (p, u) in params.iter_mut().zip(updated) {
        *p = u;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopDecision {
    Improved,
    Waiting,
    Stop,
}

/// Patience counter against the best validation loss seen so far. The loss
/// at construction is the reference and does not count as an evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub best_eval: Option<usize>,
    pub evaluations: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, reference_loss: f64) -> Self {
        Self {
            patience,
            best: reference_loss,
            best_eval: None,
            evaluations: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> StopDecision {
        self.evaluations += 1;
        if loss < self.best {
            self.best = loss;
            self.best_eval = Some(self.evaluations);
            self.since_best = 0;
            StopDecision::Improved
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Waiting
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopOutcome<C> {
    pub best: C,
    pub best_loss: f64,
    /// 1-based evaluation that produced `best`; `None` keeps the reference.
    pub best_eval: Option<usize>,
    pub evaluations: usize,
    pub stopped_early: bool,
}

/// Drives `step` (one training period followed by a validation evaluation)
/// until patience runs out or `max_evals` is reached, keeping the best
/// checkpoint.
pub fn early_stop_loop<C>(
    initial: C,
    reference_loss: f64,
    patience: usize,
    max_evals: usize,
    mut step: impl FnMut(usize) -> Result<(C, f64)>,
) -> Result<EarlyStopOutcome<C>> {
    let mut stopper = EarlyStopper::new(patience, reference_loss);
    let mut best = initial;
    let mut stopped_early = false;
    for i in 0..max_evals {
        let (ckpt, loss) = step(i)?;
        match stopper.observe(loss) {
            StopDecision::Improved => best = ckpt,
            StopDecision::Waiting => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(EarlyStopOutcome {
        best,
        best_loss: stopper.best,
        best_eval: stopper.best_eval,
        evaluations: stopper.evaluations,
        stopped_early,
    })
}

/// The quadrature node used for one batch score: a uniformly drawn interior
/// node `k/N`, or `1` under [`Ablation::NoAlpha`]. The draw happens in both
/// cases so the random stream is identical across ablations.
pub fn score_node(n_quad: usize, ablation: Ablation, rng: &mut Prng) -> (usize, f64) {
    let k = 1 + rng.index(n_quad - 1);
    match ablation {
        Ablation::NoAlpha => (n_quad, 1.0),
        _ => (k, k as f64 / n_quad as f64),
    }
}

/// One batch score under the configured estimator and ablation, with the
/// node used (`None` for the full sweep).
pub fn batch_score(
    path: &impl PathGradient,
    n_quad: usize,
    mode: QuadMode,
    ablation: Ablation,
    rng: &mut Prng,
) -> Result<(ScoreField, Option<usize>)> {
    match mode {
        QuadMode::Full => Ok((ig_full(path, n_quad)?, None)),
        QuadMode::Stochastic => {
            let (k, alpha) = score_node(n_quad, ablation, rng);
            Ok((ig_at_node(path, n_quad, alpha)?, Some(k)))
        }
    }
}

/// Per-entry field the triplet ranking consumes.
pub fn ranking_field(state: &ImportanceState, ablation: Ablation) -> Result<ScoreField> {
    match ablation {
        Ablation::MultiplicativeScore => state.s_bar.zip_with(&state.u_bar, |s, u| s * u),
        _ => Ok(snr(state)),
    }
}

/// Canonical SVD of every adapter delta, truncated to the adapter's rank.
pub fn layer_views(net: &Network) -> Result<Vec<SvdView>> {
    net.layers
        .iter()
        .map(|l| {
            let r = l.rank();
            let full = svd_thin(&l.delta())?;
            let idx: Vec<usize> = (0..r).collect();
            Ok(SvdView {
                p: full.p.select_columns(&idx),
                lambda: full.lambda[..r].to_vec(),
                q: full.q.select_rows(&idx),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Scoring and pruning.
    Allocate,
    /// After the final prune: early-stopped fine-tuning.
    FineTune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Phase the epoch's steps ran under.
    pub phase: Phase,
    pub steps: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationEvent {
    pub epoch: usize,
    pub global_step: u64,
    pub budget: usize,
    pub ranks_before: Vec<usize>,
    pub ranks_after: Vec<usize>,
    pub kept: Vec<Vec<usize>>,
    pub triplet_scores: Vec<TripletScore>,
    /// Per-layer `‖ΔW_before − ΔW_after‖_F`.
    pub drift: Vec<f64>,
    /// Per-layer `sqrt(Σ_dropped λ²)`.
    pub dropped_mass: Vec<f64>,
}

impl AllocationEvent {
    pub fn drift_within_bound(&self) -> bool {
        self.drift.iter().zip(&self.dropped_mass).all(|(d, m)| *d <= m + 1e-10)
    }
}

/// One tracked entry's score history statistics at one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreStat {
    pub epoch: usize,
    pub layer: usize,
    pub factor: Factor,
    pub row: usize,
    pub col: usize,
    pub y: f64,
    pub mean: f64,
    pub variance: f64,
    pub lag1_autocorr: Option<f64>,
    pub snr: f64,
}

/// Whole-field summary of `s_agg` at one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldStat {
    pub epoch: usize,
    pub entries: usize,
    pub mean: f64,
    pub variance: f64,
    pub mean_snr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadDiagnostics {
    pub n_quad: usize,
    pub ablation: Ablation,
    /// `node_counts[k]` = batches scored at node `k/N`.
    pub node_counts: Vec<u64>,
    /// Scores aggregated per epoch (equals the batches per epoch).
    pub scores_per_epoch: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RunStatus {
    Completed,
    Diverged { epoch: usize, global_step: u64, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub config: TrainConfig,
    pub steps_per_epoch: usize,
    pub global_steps: u64,
    pub epochs: Vec<EpochRecord>,
    pub allocation: Vec<AllocationEvent>,
    pub score_stats: Vec<ScoreStat>,
    pub field_stats: Vec<FieldStat>,
    pub quadrature: QuadDiagnostics,
    pub initial_ranks: Vec<usize>,
    pub final_ranks: Vec<usize>,
    pub trainable_params: usize,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
    pub test_loss: Option<f64>,
    pub status: RunStatus,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }
}

fn gather(batch: &Batch, idx: &[usize]) -> Result<Batch> {
    Batch::new(batch.inputs.select_rows(idx), batch.targets.select_rows(idx))
}

fn permutation(n: usize, rng: &mut Prng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.index(i + 1));
    }
    p
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Lag-1 sample autocorrelation; `None` with fewer than three points or no variance.
pub fn lag1_autocorr(v: &[f64]) -> Option<f64> {
    if v.len() < 3 {
        return None;
    }
    let (mean, var) = mean_var(v);
    if var <= 0.0 {
        return None;
    }
    let cov = v.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / v.len() as f64;
    Some(cov / var)
}

/// Entries followed in the score diagnostics: the leading `P` and `Q`
/// entries of every layer.
fn tracked_entries(n_layers: usize) -> Vec<(usize, Factor)> {
    (0..n_layers).flat_map(|l| [(l, Factor::P), (l, Factor::Q)]).collect()
}

fn entry_value(field: &ScoreField, layer: usize, factor: Factor) -> Option<f64> {
    let (p, q) = field.layers.get(layer)?;
    let m = match factor {
        Factor::P => p,
        Factor::Q => q,
    };
    (!m.is_empty()).then(|| m[(0, 0)])
}

fn loss_and_step(net: &mut Network, batch: &Batch, opt: &mut Optimizer) -> Result<f64> {
    let (loss, gw) = net.weight_gradients(batch, &net.deltas(), 1.0)?;
    let mut params = Vec::with_capacity(2 * net.layers.len());
    let mut grads = Vec::with_capacity(2 * net.layers.len());
    for (layer, g) in net.layers.iter().zip(&gw) {
        grads.push(g.matmul_t(&layer.b)?);
        grads.push(layer.a.t_matmul(g)?);
        params.push(layer.a.clone());
        params.push(layer.b.clone());
    }
    optimizer_step(&mut params, &grads, opt)?;
    let mut it = params.into_iter();
    for layer in &mut net.layers {
        layer.a = it.next().expect("paired");
        layer.b = it.next().expect("paired");
    }
    Ok(loss)
}

/// Mutable loop state shared by the epoch body and the prune step.
struct Run<'a> {
    cfg: &'a TrainConfig,
    data: &'a Dataset,
    net: Network,
    opt: Optimizer,
    state: ImportanceState,
    quad_rng: Prng,
    shuffle_rng: Prng,
    m: usize,
    global_step: u64,
    phase: Phase,
    stopper: Option<EarlyStopper>,
    best_net: Option<Network>,
    report: RunReport,
    history: Vec<Vec<f64>>,
}

impl Run<'_> {
    fn prune(&mut self, epoch: usize, scores: &[TripletScore], views: &[SvdView]) -> Result<()> {
        let n_layers = self.net.layers.len();
        let budget = budget_at(&self.cfg.schedule, n_layers, self.global_step, self.m);
        let selection = select_top_b(scores, budget)?;
        let kept = per_layer(&selection, n_layers);
        let ranks_before = self.net.ranks();
        let mut drift = Vec::with_capacity(n_layers);
        let mut dropped_mass = Vec::with_capacity(n_layers);
        for ((layer, view), keep) in self.net.layers.iter_mut().zip(views).zip(&kept) {
            let before = layer.delta();
            let (a, b) = if keep.is_empty() {
                (Matrix::zeros(layer.d_in(), 0), Matrix::zeros(0, layer.d_out()))
            } else {
                prune_rebuild(view, keep)?
            };
            layer.set_factors(a, b)?;
            drift.push(before.sub(&layer.delta())?.frobenius_norm());
            let dropped: f64 = (0..view.rank())
                .filter(|i| !keep.contains(i))
                .map(|i| view.lambda[i] * view.lambda[i])
                .sum();
            dropped_mass.push(dropped.sqrt());
        }
        self.state.reindex(&kept)?;
        self.opt.reset();
        self.report.allocation.push(AllocationEvent {
            epoch,
            global_step: self.global_step,
            budget,
            ranks_before,
            ranks_after: self.net.ranks(),
            kept,
            triplet_scores: scores.to_vec(),
            drift,
            dropped_mass,
        });
        Ok(())
    }

    fn record_scores(&mut self, epoch: usize, s_agg: &ScoreField, ranking: &ScoreField) {
        let values: Vec<f64> = s_agg.values().collect();
        let mean_snr = if ranking.is_empty() {
            0.0
        } else {
            ranking.values().sum::<f64>() / ranking.len() as f64
        };
        let (mean, variance) = if values.is_empty() { (0.0, 0.0) } else { mean_var(&values) };
        self.report.field_stats.push(FieldStat {
            epoch,
            entries: values.len(),
            mean,
            variance,
            mean_snr,
        });
        for (slot, (layer, factor)) in tracked_entries(self.net.layers.len()).into_iter().enumerate() {
            let (Some(y), Some(s)) = (entry_value(s_agg, layer, factor), entry_value(ranking, layer, factor)) else {
                continue;
            };
            let h = &mut self.history[slot];
            h.push(y);
            let (mean, variance) = mean_var(h);
            self.report.score_stats.push(ScoreStat {
                epoch,
                layer,
                factor,
                row: 0,
                col: 0,
                y,
                mean,
                variance,
                lag1_autocorr: lag1_autocorr(h),
                snr: s,
            });
        }
    }

    /// Returns `true` when early stopping fired.
    fn epoch(&mut self, epoch: usize) -> Result<bool> {
        let cfg = self.cfg;
        let perm = permutation(self.data.train.len(), &mut self.shuffle_rng);
        let epoch_start = self.global_step;
        let phase = self.phase;
        let mut fields = Vec::with_capacity(self.m);
        let mut views: Option<Vec<SvdView>> = None;
        let mut loss_sum = 0.0;
        let mut steps = 0;
        let mut stop = false;
        for b in 0..self.m {
            let batch = gather(&self.data.train, &perm[b * cfg.batch_size..(b + 1) * cfg.batch_size])?;
            loss_sum += loss_and_step(&mut self.net, &batch, &mut self.opt)?;
            steps += 1;
            self.global_step += 1;
            if self.phase == Phase::Allocate {
                if views.is_none() || self.global_step.is_multiple_of(cfg.svd_every as u64) {
                    views = Some(layer_views(&self.net)?);
                }
                let v = views.as_deref().expect("computed above");
                let path = ViewPath::new(&self.net, v, &batch);
                let (field, k) = batch_score(&path, cfg.n_quad, cfg.quad_mode, cfg.ablation, &mut self.quad_rng)?;
                if let Some(k) = k {
                    self.report.quadrature.node_counts[k] += 1;
                }
                fields.push(field);
            } else if let Some(stopper) = self.stopper.as_mut() {
                let val = forward_loss(&self.net, &self.data.val, 1.0)?;
                match stopper.observe(val) {
                    StopDecision::Improved => self.best_net = Some(self.net.clone()),
                    StopDecision::Waiting => {}
                    StopDecision::Stop => {
                        stop = true;
                        break;
                    }
                }
            }
        }

        if self.phase == Phase::Allocate && !fields.is_empty() {
            self.report.quadrature.scores_per_epoch.push(fields.len());
            let s_agg = aggregate_epoch(&fields, self.m)?;
            self.state = update(&self.state, &s_agg)?;
            let ranking = ranking_field(&self.state, cfg.ablation)?;
            self.record_scores(epoch, &s_agg, &ranking);
            if cfg.schedule.boundary_in(epoch_start, self.global_step, self.m) {
                // Fresh views so the drift bound refers to the current factors.
                let fresh = layer_views(&self.net)?;
                let scores = triplet_scores(&fresh, &ranking)?;
                self.prune(epoch, &scores, &fresh)?;
                if self.global_step >= cfg.schedule.end_step(self.m) {
                    self.phase = Phase::FineTune;
                    let reference = forward_loss(&self.net, &self.data.val, 1.0)?;
                    self.stopper = Some(EarlyStopper::new(cfg.patience, reference));
                    self.best_net = Some(self.net.clone());
                }
            }
        }

        self.report.epochs.push(EpochRecord {
            epoch,
            phase,
            steps,
            train_loss: loss_sum / steps.max(1) as f64,
            val_loss: forward_loss(&self.net, &self.data.val, 1.0)?,
            ranks: self.net.ranks(),
        });
        Ok(stop)
    }
}

/// Elapsed-seconds probe; reports 0 where the platform has no clock.
#[cfg(not(target_arch = "wasm32"))]
fn stopwatch() -> impl FnOnce() -> f64 {
    let t = std::time::Instant::now();
    move || t.elapsed().as_secs_f64()
}

#[cfg(target_arch = "wasm32")]
fn stopwatch() -> impl FnOnce() -> f64 {
    || 0.0
}

/// Runs the full adaptive-rank schedule and returns the report together
/// with the final (best-restored) network. A non-finite loss ends the run
/// with [`RunStatus::Diverged`] rather than an error.
pub fn train(net: Network, data: &Dataset, cfg: &TrainConfig) -> Result<(RunReport, Network)> {
    let elapsed = stopwatch();
    cfg.validate(&net)?;
    if data.input_dim != net.input_dim() || data.output_dim != net.output_dim() {
        return Err(Error::DimensionMismatch {
            op: "dataset vs network",
            left: (data.input_dim, data.output_dim),
            right: (net.input_dim(), net.output_dim()),
        });
    }
    if data.train.len() < cfg.batch_size || data.val.is_empty() || data.test.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "train split ({}) smaller than batch_size ({}) or empty val/test",
            data.train.len(),
            cfg.batch_size
        )));
    }
    let m = data.train.len() / cfg.batch_size;
    let root = Prng::new(cfg.seed);
    let n_layers = net.layers.len();
    let initial_ranks = net.ranks();
    let report = RunReport {
        config: cfg.clone(),
        steps_per_epoch: m,
        global_steps: 0,
        epochs: Vec::new(),
        allocation: Vec::new(),
        score_stats: Vec::new(),
        field_stats: Vec::new(),
        quadrature: QuadDiagnostics {
            n_quad: cfg.n_quad,
            ablation: cfg.ablation,
            node_counts: vec![0; cfg.n_quad + 1],
            scores_per_epoch: Vec::new(),
        },
        initial_ranks: initial_ranks.clone(),
        final_ranks: initial_ranks,
        trainable_params: net.trainable_params(),
        best_val_loss: None,
        stopped_early: false,
        test_loss: None,
        status: RunStatus::Completed,
        wall_clock_seconds: 0.0,
    };
    let mut run = Run {
        cfg,
        data,
        net,
        opt: Optimizer::new(cfg.optimizer, cfg.learning_rate),
        state: ImportanceState::new(cfg.beta1, cfg.beta2, cfg.epsilon)?.with_centering(cfg.centering),
        quad_rng: root.stream("quadrature"),
        shuffle_rng: root.stream("shuffle"),
        m,
        global_step: 0,
        phase: Phase::Allocate,
        stopper: None,
        best_net: None,
        report,
        history: vec![Vec::new(); 2 * n_layers],
    };

    for epoch in 0..cfg.epochs {
        match run.epoch(epoch) {
            Ok(true) => {
                run.report.stopped_early = true;
                break;
            }
            Ok(false) => {}
            Err(Error::NonFinite(message)) => {
                run.report.status = RunStatus::Diverged {
                    epoch,
                    global_step: run.global_step,
                    message,
                };
                break;
            }
            Err(e) => return Err(e),
        }
    }

    let mut net = run.net;
    let mut report = run.report;
    if let (Some(best), Some(stopper)) = (run.best_net, &run.stopper) {
        net = best;
        report.best_val_loss = Some(stopper.best);
    }
    report.global_steps = run.global_step;
    report.final_ranks = net.ranks();
    report.trainable_params = net.trainable_params();
    if !report.diverged() {
        report.test_loss = Some(forward_loss(&net, &data.test, 1.0)?);
    }
    report.wall_clock_seconds = elapsed();
    Ok((report, net))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_examples() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        let mut p = vec![Matrix::from_rows(&[[1.0]])];
        optimizer_step(&mut p, &[Matrix::from_rows(&[[2.0]])], &mut opt).unwrap();
        assert!((p[0][(0, 0)] - 0.8).abs() < 1e-15);
        optimizer_step(&mut p, &[Matrix::zeros(1, 1)], &mut opt).unwrap();
        assert!((p[0][(0, 0)] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01);
        let mut p = vec![Matrix::from_rows(&[[1.0, -2.0]])];
        optimizer_step(&mut p, &[Matrix::from_rows(&[[1.0, -3.0]])], &mut opt).unwrap();
        assert!((p[0][(0, 0)] - 0.99).abs() < 1e-6);
        assert!((p[0][(0, 1)] + 1.99).abs() < 1e-6);
        let mut q = vec![Matrix::from_rows(&[[1.0]])];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01);
        optimizer_step(&mut q, &[Matrix::zeros(1, 1)], &mut opt).unwrap();
        assert_eq!(q[0][(0, 0)], 1.0);
    }

    #[test]
    fn optimizer_rejects_mismatch_and_nonfinite() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        let mut p = vec![Matrix::zeros(2, 2)];
        assert!(optimizer_step(&mut p, &[Matrix::zeros(1, 2)], &mut opt).is_err());
        assert!(matches!(
            optimizer_step(&mut p, &[Matrix::from_fn(2, 2, |_, _| f64::INFINITY)], &mut opt),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(p[0], Matrix::zeros(2, 2));
    }

    fn run_stub(losses: &[f64], patience: usize, reference: f64) -> EarlyStopOutcome<usize> {
        early_stop_loop(usize::MAX, reference, patience, losses.len(), |i| Ok((i, losses[i]))).unwrap()
    }

    #[test]
    fn early_stop_improving_runs_to_cap() {
        let losses: Vec<f64> = (0..30).map(|i| 1.0 / (i + 1) as f64).collect();
        let out = run_stub(&losses, 10, f64::INFINITY);
        assert_eq!((out.best, out.evaluations, out.stopped_early), (29, 30, false));
    }

    #[test]
    fn early_stop_flat_stops_after_patience() {
        let out = run_stub(&[1.0; 50], 10, 1.0);
        assert_eq!((out.evaluations, out.stopped_early, out.best_eval), (10, true, None));
        assert_eq!(out.best, usize::MAX);
    }

    #[test]
    fn early_stop_u_shape_returns_minimum() {
        let losses: Vec<f64> = (0..60).map(|i| ((i as f64) - 17.0).powi(2)).collect();
        let out = run_stub(&losses, 10, f64::INFINITY);
        assert_eq!(out.best, 17);
        assert_eq!(out.best_loss, 0.0);
        assert_eq!(out.evaluations, 28);
    }

    #[test]
    fn no_alpha_changes_only_the_node() {
        for seed in 0..20 {
            let (k, a) = score_node(20, Ablation::None, &mut Prng::new(seed));
            assert!((1..20).contains(&k) && a == k as f64 / 20.0);
            assert_eq!(score_node(20, Ablation::NoAlpha, &mut Prng::new(seed)), (20, 1.0));
            assert_eq!(score_node(20, Ablation::MultiplicativeScore, &mut Prng::new(seed)), (k, a));
        }
    }

    #[test]
    fn autocorrelation_cases() {
        assert_eq!(lag1_autocorr(&[1.0, 2.0]), None);
        assert_eq!(lag1_autocorr(&[3.0; 5]), None);
        let alt = lag1_autocorr(&[1.0, -1.0, 1.0, -1.0, 1.0, -1.0]).unwrap();
        assert!(alt < -0.8);
    }
}
