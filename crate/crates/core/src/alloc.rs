//! Triplet importance, global budgeted selection and adapter rebuilding.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ig::ScoreField;
use crate::linalg::{Matrix, SvdView};

/// Combined importance `S_i` of one singular triplet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletScore {
    pub layer_id: usize,
    pub triplet_index: usize,
    pub value: f64,
    /// `|λ_i|`, kept for tie-breaking.
    pub lambda_abs: f64,
}

/// `S_i = |λ_i| + mean_k field(P_ki) + mean_k field(Q_ik)` for every
/// triplet of every layer.
pub fn triplet_scores(views: &[SvdView], field: &ScoreField) -> Result<Vec<TripletScore>> {
    if views.len() != field.layers.len() {
        return Err(Error::ShapeDrift(format!(
            "{} views against a {}-layer score field",
            views.len(),
            field.layers.len()
        )));
    }
    let mut out = Vec::new();
    for (layer_id, (v, (fp, fq))) in views.iter().zip(&field.layers).enumerate() {
        if fp.shape() != v.p.shape() || fq.shape() != v.q.shape() {
            return Err(Error::ShapeDrift(format!(
                "layer {layer_id}: field {:?}/{:?} vs view {:?}/{:?}",
                fp.shape(),
                fq.shape(),
                v.p.shape(),
                v.q.shape()
            )));
        }
        let (d1, d2) = (fp.rows() as f64, fq.cols() as f64);
        for i in 0..v.rank() {
            let p_mean = (0..fp.rows()).map(|k| fp[(k, i)]).sum::<f64>() / d1;
            let q_mean = fq.row(i).iter().sum::<f64>() / d2;
            let lambda_abs = v.lambda[i].abs();
            let value = lambda_abs + p_mean + q_mean;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("S of layer {layer_id} triplet {i}")));
            }
            out.push(TripletScore {
                layer_id,
                triplet_index: i,
                value,
                lambda_abs,
            });
        }
    }
    Ok(out)
}

/// Ranking order: larger `S`, then larger `|λ|`, then lower layer, then lower index.
fn rank_order(a: &TripletScore, b: &TripletScore) -> Ordering {
    b.value
        .total_cmp(&a.value)
        .then(b.lambda_abs.total_cmp(&a.lambda_abs))
        .then(a.layer_id.cmp(&b.layer_id))
        .then(a.triplet_index.cmp(&b.triplet_index))
}

/// The `b` highest-ranked triplets across all layers, as `(layer, index)`
/// pairs in ascending order.
pub fn select_top_b(scores: &[TripletScore], b: usize) -> Result<Vec<(usize, usize)>> {
    if b == 0 || b > scores.len() {
        return Err(Error::BudgetInfeasible {
            budget: b,
            available: scores.len(),
        });
    }
    let mut ranked: Vec<&TripletScore> = scores.iter().collect();
    ranked.sort_by(|a, b| rank_order(a, b));
    let mut chosen: Vec<(usize, usize)> = ranked[..b].iter().map(|s| (s.layer_id, s.triplet_index)).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Splits a global selection into sorted per-layer index lists.
pub fn per_layer(selection: &[(usize, usize)], n_layers: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n_layers];
    for &(l, i) in selection {
        out[l].push(i);
    }
    for v in &mut out {
        v.sort_unstable();
    }
    out
}

/// `A = P_sel·diag(λ_sel)^{1/2}`, `B = diag(λ_sel)^{1/2}·Q_sel`.
pub fn prune_rebuild(view: &SvdView, selected_local: &[usize]) -> Result<(Matrix, Matrix)> {
    if selected_local.is_empty() {
        return Err(Error::InvalidArgument("cannot rebuild an adapter from zero triplets".into()));
    }
    if let Some(&bad) = selected_local.iter().find(|&&i| i >= view.rank()) {
        return Err(Error::InvalidArgument(format!(
            "triplet {bad} out of range for rank {}",
            view.rank()
        )));
    }
    let roots: Vec<f64> = selected_local
        .iter()
        .map(|&i| {
            let l = view.lambda[i];
            if l < 0.0 {
                Err(Error::InvalidArgument(format!("negative singular value {l}")))
            } else {
                Ok(l.sqrt())
            }
        })
        .collect::<Result<_>>()?;
    let a = view.p.select_columns(selected_local).scale_columns(&roots);
    let b = view.q.select_rows(selected_local).scale_rows(&roots);
    Ok((a, b))
}

/// Rank-budget schedule. `gamma`, `t_init`, `t_final` and `delta_t` are carried
/// for configuration compatibility and do not affect [`budget_at`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    /// Initial rank of every adapted layer.
    pub r0: usize,
    /// Final total number of triplets across layers.
    pub b_final: usize,
    pub start_epoch: f64,
    pub end_epoch: f64,
    /// Spacing of prune boundaries as a fraction of an epoch.
    pub interval: f64,
    pub t_init: f64,
    pub t_final: f64,
    pub delta_t: f64,
    pub gamma: f64,
}

impl PruneSchedule {
    pub fn new(r0: usize, b_final: usize, start_epoch: f64, end_epoch: f64, interval: f64) -> Self {
        Self {
            r0,
            b_final,
            start_epoch,
            end_epoch,
            interval,
            t_init: 0.0,
            t_final: 0.0,
            delta_t: 0.0,
            gamma: 0.0,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.r0 == 0 {
            return Err(Error::InvalidArgument("r0 must be >= 1".into()));
        }
        if self.b_final == 0 || self.b_final > n_layers * self.r0 {
            return Err(Error::BudgetInfeasible {
                budget: self.b_final,
                available: n_layers * self.r0,
            });
        }
        if !(self.start_epoch < self.end_epoch) || self.start_epoch < 0.0 {
            return Err(Error::InvalidArgument("need 0 <= start_epoch < end_epoch".into()));
        }
        if !(self.interval > 0.0) {
            return Err(Error::InvalidArgument("prune interval must be > 0".into()));
        }
        Ok(())
    }

    pub fn start_step(&self, steps_per_epoch: usize) -> u64 {
        (self.start_epoch * steps_per_epoch as f64).ceil() as u64
    }

    pub fn end_step(&self, steps_per_epoch: usize) -> u64 {
        (self.end_epoch * steps_per_epoch as f64).ceil() as u64
    }

    pub fn interval_steps(&self, steps_per_epoch: usize) -> u64 {
        ((self.interval * steps_per_epoch as f64).ceil() as u64).max(1)
    }

    /// True when `global_step` is a prune boundary.
    pub fn is_boundary(&self, global_step: u64, steps_per_epoch: usize) -> bool {
        let (s, e) = (self.start_step(steps_per_epoch), self.end_step(steps_per_epoch));
        if global_step < s || global_step > e {
            return false;
        }
        global_step == e || (global_step - s).is_multiple_of(self.interval_steps(steps_per_epoch))
    }

    /// Whether any boundary lies in the half-open step window `(from, to]`.
    pub fn boundary_in(&self, from: u64, to: u64, steps_per_epoch: usize) -> bool {
        (from + 1..=to).any(|s| self.is_boundary(s, steps_per_epoch))
    }
}

/// Total budget after `global_step` optimizer steps: the initial pool before
/// the window, `b_final` after it, and a cubic decay in between that only
/// moves at interval boundaries.
pub fn budget_at(schedule: &PruneSchedule, n_layers: usize, global_step: u64, steps_per_epoch: usize) -> usize {
    let b_init = n_layers * schedule.r0;
    let (s, e) = (schedule.start_step(steps_per_epoch), schedule.end_step(steps_per_epoch));
    if global_step < s {
        return b_init;
    }
    if global_step >= e {
        return schedule.b_final;
    }
    let iv = schedule.interval_steps(steps_per_epoch);
    let quantized = (global_step - s) / iv * iv;
    let tau = quantized as f64 / (e - s) as f64;
    cubic_budget(b_init, schedule.b_final, tau)
}

/// `B_final + (B_init − B_final)(1 − τ)³`, rounded to the nearest integer.
pub fn cubic_budget(b_init: usize, b_final: usize, tau: f64) -> usize {
    let tau = tau.clamp(0.0, 1.0);
    let span = b_init as f64 - b_final as f64;
    (b_final as f64 + span * (1.0 - tau).powi(3)).round() as usize
}
