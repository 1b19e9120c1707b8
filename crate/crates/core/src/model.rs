//! Small adapted feed-forward network with exact reverse-mode gradients.
//!
//! Every adapted layer computes `x · (W₀ + α·ΔW)` where `ΔW` is either the
//! trainable product `A·B` or a factored view `P·diag(Λ)·Q`. The path scale
//! `α` multiplies the adapter contribution at forward time; stored factors are
//! never mutated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Prng, SvdView};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean over every output element of the squared residual.
    MeanSquaredError,
    /// Mean over the batch; targets hold one class index per row.
    SoftmaxCrossEntropy,
}

/// Frozen base weight plus trainable low-rank factors. Rank 0 (no adapter)
/// is allowed; it arises when pruning removes every triplet of a layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterLayer {
    pub layer_id: usize,
    w0: Matrix,
    pub a: Matrix,
    pub b: Matrix,
}

impl AdapterLayer {
    pub fn new(layer_id: usize, w0: Matrix, a: Matrix, b: Matrix) -> Result<Self> {
        let (d1, d2) = w0.shape();
        if a.rows() != d1 || b.cols() != d2 || a.cols() != b.rows() {
            return Err(Error::DimensionMismatch {
                op: "adapter layer",
                left: a.shape(),
                right: b.shape(),
            });
        }
        Ok(Self { layer_id, w0, a, b })
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn d_in(&self) -> usize {
        self.w0.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w0.cols()
    }

    pub fn delta(&self) -> Matrix {
        self.a.matmul(&self.b).expect("factor shapes checked on construction")
    }

    /// `W₀ + α·A·B`.
    pub fn effective_weight(&self, alpha: f64) -> Matrix {
        self.w0.add_scaled(&self.delta(), alpha).expect("shape")
    }

    /// Replaces both factors, keeping `W₀`.
    pub fn set_factors(&mut self, a: Matrix, b: Matrix) -> Result<()> {
        let rebuilt = AdapterLayer::new(self.layer_id, self.w0.clone(), a, b)?;
        *self = rebuilt;
        Ok(())
    }

    pub fn trainable_params(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// Adapted layers with a fixed activation between consecutive layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<AdapterLayer>,
    pub activation: Activation,
    pub loss: LossKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.rows() == 0 || inputs.rows() != targets.rows() {
            return Err(Error::DimensionMismatch {
                op: "batch",
                left: inputs.shape(),
                right: targets.shape(),
            });
        }
        if !inputs.is_finite() || !targets.is_finite() {
            return Err(Error::NonFinite("batch".into()));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

/// Gradient pair for one layer: with respect to the left and right factor.
pub type FactorGrads = (Matrix, Matrix);

impl Network {
    pub fn new(layers: Vec<AdapterLayer>, activation: Activation, loss: LossKind) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one adapted layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(Error::DimensionMismatch {
                    op: "network",
                    left: pair[0].w0().shape(),
                    right: pair[1].w0().shape(),
                });
            }
        }
        Ok(Self {
            layers,
            activation,
            loss,
        })
    }

    /// Random base weights `N(0, 1/d_in)`, `A ~ N(0, 1/d_in)` and `B = 0`.
    pub fn init_lora(
        dims: &[usize],
        rank: usize,
        activation: Activation,
        loss: LossKind,
        rng: &mut Prng,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument("need at least input and output dims".into()));
        }
        if rank == 0 {
            return Err(Error::InvalidArgument("adapter rank must be >= 1".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (id, w) in dims.windows(2).enumerate() {
            let (d1, d2) = (w[0], w[1]);
            let scale = 1.0 / (d1 as f64).sqrt();
            let w0 = Matrix::from_fn(d1, d2, |_, _| scale * rng.normal());
            let a = Matrix::from_fn(d1, rank, |_, _| scale * rng.normal());
            let b = Matrix::zeros(rank, d2);
            layers.push(AdapterLayer::new(id, w0, a, b)?);
        }
        Network::new(layers, activation, loss)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").d_out()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.layers.iter().map(AdapterLayer::rank).collect()
    }

    pub fn trainable_params(&self) -> usize {
        self.layers.iter().map(AdapterLayer::trainable_params).sum()
    }

    pub fn deltas(&self) -> Vec<Matrix> {
        self.layers.iter().map(AdapterLayer::delta).collect()
    }

    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        let deltas = self.deltas();
        let trace = self.forward_trace(inputs, &deltas, 1.0)?;
        Ok(trace.output)
    }

    fn check_deltas(&self, deltas: &[Matrix]) -> Result<()> {
        if deltas.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} adapter deltas for {} layers",
                deltas.len(),
                self.layers.len()
            )));
        }
        for (l, d) in self.layers.iter().zip(deltas) {
            if l.w0().shape() != d.shape() {
                return Err(Error::DimensionMismatch {
                    op: "adapter delta",
                    left: l.w0().shape(),
                    right: d.shape(),
                });
            }
        }
        Ok(())
    }

    fn forward_trace(&self, inputs: &Matrix, deltas: &[Matrix], alpha: f64) -> Result<Trace> {
        self.check_deltas(deltas)?;
        if inputs.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                op: "forward",
                left: inputs.shape(),
                right: self.layers[0].w0().shape(),
            });
        }
        let last = self.layers.len() - 1;
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = inputs.clone();
        for (i, (layer, delta)) in self.layers.iter().zip(deltas).enumerate() {
            let w = layer.w0().add_scaled(delta, alpha)?;
            let z = x.matmul(&w)?;
            layer_inputs.push(x);
            x = if i < last { z.map(|v| self.activation.apply(v)) } else { z.clone() };
            pre.push(z);
            weights.push(w);
        }
        Ok(Trace {
            weights,
            layer_inputs,
            pre,
            output: x,
        })
    }

    /// Loss with every adapter contributing `alpha · delta`.
    pub fn loss_with_deltas(&self, batch: &Batch, deltas: &[Matrix], alpha: f64) -> Result<f64> {
        let trace = self.forward_trace(&batch.inputs, deltas, alpha)?;
        let (loss, _) = loss_and_grad(self.loss, &trace.output, &batch.targets)?;
        finite(loss, "loss")
    }

    /// Loss and `∂L/∂W_ℓ` for every effective weight `W_ℓ = W₀ + α·delta_ℓ`.
    pub fn weight_gradients(
        &self,
        batch: &Batch,
        deltas: &[Matrix],
        alpha: f64,
    ) -> Result<(f64, Vec<Matrix>)> {
        let trace = self.forward_trace(&batch.inputs, deltas, alpha)?;
        let (loss, mut dz) = loss_and_grad(self.loss, &trace.output, &batch.targets)?;
        finite(loss, "loss")?;
        let n = self.layers.len();
        let mut grads = vec![Matrix::zeros(0, 0); n];
        for l in (0..n).rev() {
            grads[l] = trace.layer_inputs[l].t_matmul(&dz)?;
            if l > 0 {
                let dx = dz.matmul_t(&trace.weights[l])?;
                let z = &trace.pre[l - 1];
                let y = &trace.layer_inputs[l];
                let act = self.activation;
                dz = Matrix::from_fn(dx.rows(), dx.cols(), |i, j| {
                    dx[(i, j)] * act.derivative(z[(i, j)], y[(i, j)])
                });
            }
        }
        for (l, g) in grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("weight gradient of layer {l}")));
            }
        }
        Ok((loss, grads))
    }
}

struct Trace {
    weights: Vec<Matrix>,
    layer_inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    output: Matrix,
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

fn loss_and_grad(kind: LossKind, out: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    match kind {
        LossKind::MeanSquaredError => {
            if out.shape() != targets.shape() {
                return Err(Error::DimensionMismatch {
                    op: "mse",
                    left: out.shape(),
                    right: targets.shape(),
                });
            }
            let n = out.len() as f64;
            let resid = out.sub(targets)?;
            let loss = resid.data().iter().map(|r| r * r).sum::<f64>() / n;
            Ok((loss, resid.scale(2.0 / n)))
        }
        LossKind::SoftmaxCrossEntropy => {
            if targets.cols() != 1 || targets.rows() != out.rows() {
                return Err(Error::DimensionMismatch {
                    op: "cross entropy",
                    left: out.shape(),
                    right: targets.shape(),
                });
            }
            let n = out.rows() as f64;
            let mut grad = Matrix::zeros(out.rows(), out.cols());
            let mut loss = 0.0;
            for i in 0..out.rows() {
                let class = targets[(i, 0)];
                if class < 0.0 || class.fract() != 0.0 || class as usize >= out.cols() {
                    return Err(Error::InvalidArgument(format!(
                        "class index {class} out of range at row {i}"
                    )));
                }
                let class = class as usize;
                let row = out.row(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
                let log_z = m + sum.ln();
                loss += log_z - row[class];
                for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
                    let p = (row[j] - log_z).exp();
                    *g = (p - if j == class { 1.0 } else { 0.0 }) / n;
                }
            }
            Ok((loss / n, grad))
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Loss of the network with every adapter scaled by `alpha`.
pub fn forward_loss(net: &Network, batch: &Batch, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    net.loss_with_deltas(batch, &net.deltas(), alpha)
}

/// Exact `(∂L/∂A, ∂L/∂B)` per layer at path scale `alpha`.
pub fn grad_ab(net: &Network, batch: &Batch, alpha: f64) -> Result<Vec<FactorGrads>> {
    check_alpha(alpha)?;
    let (_, gw) = net.weight_gradients(batch, &net.deltas(), alpha)?;
    net.layers
        .iter()
        .zip(gw)
        .map(|(layer, g)| {
            let da = g.matmul_t(&layer.b)?.scale(alpha);
            let db = layer.a.t_matmul(&g)?.scale(alpha);
            Ok((da, db))
        })
        .collect()
}

/// Gradients with respect to the entries of `P`, `Q` and `Λ` of a factored
/// adapter, evaluated at adapter contribution `α·P·diag(Λ)·Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewGrads {
    pub dp: Matrix,
    pub dq: Matrix,
    pub dlambda: Vec<f64>,
}

/// Whether gradients carry the chain-rule factor `α` of the path scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathDerivative {
    /// `∂/∂w L(α·ΔW(w))`: the derivative of the composed loss, zero at `α = 0`.
    Composite,
    /// `∂L/∂w` evaluated at the scaled point, as if `w` itself moved along the path.
    AtPathPoint,
}

fn check_views(net: &Network, views: &[SvdView]) -> Result<()> {
    if views.len() != net.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "{} views for {} layers",
            views.len(),
            net.layers.len()
        )));
    }
    for (l, v) in net.layers.iter().zip(views) {
        if v.p.rows() != l.d_in() || v.q.cols() != l.d_out() || v.p.cols() != v.rank() || v.q.rows() != v.rank() {
            return Err(Error::DimensionMismatch {
                op: "svd view",
                left: l.w0().shape(),
                right: (v.p.rows(), v.q.cols()),
            });
        }
    }
    Ok(())
}

/// Full `P`, `Q`, `Λ` gradients at path scale `alpha`.
pub fn grad_view(
    net: &Network,
    views: &[SvdView],
    batch: &Batch,
    alpha: f64,
    mode: PathDerivative,
) -> Result<Vec<ViewGrads>> {
    check_alpha(alpha)?;
    check_views(net, views)?;
    let deltas: Vec<Matrix> = views.iter().map(SvdView::reconstruct).collect();
    let (_, gw) = net.weight_gradients(batch, &deltas, alpha)?;
    let factor = match mode {
        PathDerivative::Composite => alpha,
        PathDerivative::AtPathPoint => 1.0,
    };
    views
        .iter()
        .zip(gw)
        .map(|(v, g)| {
            // ΔW = P Λ Q:  ∂/∂P = G Qᵀ Λ,  ∂/∂Q = Λ Pᵀ G,  ∂/∂λ_i = p_iᵀ G q_iᵀ.
            let gqt = g.matmul_t(&v.q)?;
            let ptg = v.p.t_matmul(&g)?;
            let dp = gqt.scale_columns(&v.lambda).scale(factor);
            let dq = ptg.scale_rows(&v.lambda).scale(factor);
            let dlambda = (0..v.rank())
                .map(|i| {
                    factor * (0..v.p.rows()).map(|a| v.p[(a, i)] * gqt[(a, i)]).sum::<f64>()
                })
                .collect();
            Ok(ViewGrads { dp, dq, dlambda })
        })
        .collect()
}

/// `(∂L/∂P, ∂L/∂Q)` per layer with `Λ` held constant.
pub fn grad_pq(
    net: &Network,
    views: &[SvdView],
    batch: &Batch,
    alpha: f64,
) -> Result<Vec<FactorGrads>> {
    Ok(grad_view(net, views, batch, alpha, PathDerivative::Composite)?
        .into_iter()
        .map(|g| (g.dp, g.dq))
        .collect())
}

/// Central difference `(f(x+h) − f(x−h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Parameters a finite-difference check perturbs.
#[derive(Debug, Clone, Copy)]
pub enum GradTarget<'a> {
    /// Entries of every layer's `A` and `B`.
    Ab,
    /// Entries of `P` and `Q` in the given views, `Λ` fixed.
    Pq(&'a [SvdView]),
}

/// Entry-by-entry central differences of [`forward_loss`]; same layout as
/// [`grad_ab`] / [`grad_pq`].
pub fn finite_diff_grad(
    net: &Network,
    batch: &Batch,
    alpha: f64,
    target: GradTarget<'_>,
    h: f64,
) -> Result<Vec<FactorGrads>> {
    if h <= 0.0 {
        return Err(Error::InvalidArgument("finite-difference step must be > 0".into()));
    }
    check_alpha(alpha)?;
    match target {
        GradTarget::Ab => {
            let base = net.deltas();
            let mut out = Vec::with_capacity(net.layers.len());
            for (l, layer) in net.layers.iter().enumerate() {
                let eval = |a: &Matrix, b: &Matrix| -> f64 {
                    let mut d = base.clone();
                    d[l] = a.matmul(b).expect("shape");
                    net.loss_with_deltas(batch, &d, alpha).unwrap_or(f64::NAN)
                };
                let da = perturb_each(&layer.a, h, |a| eval(a, &layer.b));
                let db = perturb_each(&layer.b, h, |b| eval(&layer.a, b));
                out.push((da, db));
            }
            Ok(out)
        }
        GradTarget::Pq(views) => {
            check_views(net, views)?;
            let base: Vec<Matrix> = views.iter().map(SvdView::reconstruct).collect();
            let mut out = Vec::with_capacity(views.len());
            for (l, v) in views.iter().enumerate() {
                let eval = |p: &Matrix, q: &Matrix| -> f64 {
                    let mut d = base.clone();
                    d[l] = p.scale_columns(&v.lambda).matmul(q).expect("shape");
                    net.loss_with_deltas(batch, &d, alpha).unwrap_or(f64::NAN)
                };
                let dp = perturb_each(&v.p, h, |p| eval(p, &v.q));
                let dq = perturb_each(&v.q, h, |q| eval(&v.p, q));
                out.push((dp, dq));
            }
            Ok(out)
        }
    }
}

fn perturb_each(m: &Matrix, h: f64, f: impl Fn(&Matrix) -> f64) -> Matrix {
    let mut work = m.clone();
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for k in 0..m.len() {
        let x = m.data()[k];
        work.data_mut()[k] = x + h;
        let up = f(&work);
        work.data_mut()[k] = x - h;
        let down = f(&work);
        work.data_mut()[k] = x;
        out.data_mut()[k] = (up - down) / (2.0 * h);
    }
    out
}

/// Floor on the denominator of [`max_relative_error`]; entries smaller than
/// this are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Worst entry of `|a − b| / max(|a|, |b|, REL_ERR_FLOOR)` across matching
/// gradient layouts, with its `(layer, factor, flat index)` location.
pub fn worst_relative_error(
    analytic: &[FactorGrads],
    reference: &[FactorGrads],
) -> (f64, (usize, usize, usize)) {
    let mut worst = (0.0_f64, (0, 0, 0));
    for (l, ((a1, a2), (b1, b2))) in analytic.iter().zip(reference).enumerate() {
        for (f, (x, y)) in [(a1, b1), (a2, b2)].into_iter().enumerate() {
            for (k, (u, v)) in x.data().iter().zip(y.data()).enumerate() {
                let err = (u - v).abs() / u.abs().max(v.abs()).max(REL_ERR_FLOOR);
                if !(err <= worst.0) {
                    worst = (err, (l, f, k));
                }
            }
        }
    }
    worst
}

pub fn max_relative_error(analytic: &[FactorGrads], reference: &[FactorGrads]) -> f64 {
    worst_relative_error(analytic, reference).0
}
