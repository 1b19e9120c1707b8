//! Integrated-gradients importance of adapter factor entries.
//!
//! The path runs from the frozen backbone (`α = 0`) to the trained adapter
//! (`α = 1`). Every estimator here is written against [`PathGradient`], so the
//! same code scores a real network or a hand-rigged scalar probe.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Prng, SvdView};
use crate::model::{grad_pq, grad_view, Batch, FactorGrads, Network, PathDerivative};

/// Anything that can report parameter values and their path gradients
/// `g(α)` in a per-layer `(left, right)` factor layout.
pub trait PathGradient {
    /// Signed values of the scored entries.
    fn parameters(&self) -> Vec<FactorGrads>;

    /// Signed `g(α)` for every scored entry.
    fn gradient_at(&self, alpha: f64) -> Result<Vec<FactorGrads>>;
}

/// Scores the entries of `P` and `Q` of every layer's canonical view.
#[derive(Debug, Clone, Copy)]
pub struct ViewPath<'a> {
    pub net: &'a Network,
    pub views: &'a [SvdView],
    pub batch: &'a Batch,
}

impl<'a> ViewPath<'a> {
    pub fn new(net: &'a Network, views: &'a [SvdView], batch: &'a Batch) -> Self {
        Self { net, views, batch }
    }
}

impl PathGradient for ViewPath<'_> {
    fn parameters(&self) -> Vec<FactorGrads> {
        self.views.iter().map(|v| (v.p.clone(), v.q.clone())).collect()
    }

    fn gradient_at(&self, alpha: f64) -> Result<Vec<FactorGrads>> {
        grad_pq(self.net, self.views, self.batch, alpha)
    }
}

/// Non-negative per-entry scores laid out like the `P` and `Q` factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreField {
    pub layers: Vec<FactorGrads>,
}

impl ScoreField {
    pub fn zeros_like(layout: &[FactorGrads]) -> Self {
        Self {
            layers: layout
                .iter()
                .map(|(p, q)| (Matrix::zeros(p.rows(), p.cols()), Matrix::zeros(q.rows(), q.cols())))
                .collect(),
        }
    }

    pub fn shapes(&self) -> Vec<((usize, usize), (usize, usize))> {
        self.layers.iter().map(|(p, q)| (p.shape(), q.shape())).collect()
    }

    pub fn same_shape(&self, other: &ScoreField) -> bool {
        self.shapes() == other.shapes()
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|(p, q)| p.len() + q.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every entry in layer order, `P` before `Q`, row-major.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|(p, q)| p.data().iter().chain(q.data()).copied())
    }

    pub fn sum(&self) -> f64 {
        self.values().sum()
    }

    pub fn max(&self) -> f64 {
        self.values().fold(0.0, f64::max)
    }

    pub fn is_valid(&self) -> bool {
        self.values().all(|v| v.is_finite() && v >= 0.0)
    }

    pub fn get(&self, e: Entry) -> f64 {
        let (p, q) = &self.layers[e.layer];
        match e.factor {
            Factor::P => p[(e.row, e.col)],
            Factor::Q => q[(e.row, e.col)],
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScoreField {
        ScoreField {
            layers: self.layers.iter().map(|(p, q)| (p.map(&f), q.map(&f))).collect(),
        }
    }

    pub fn zip_with(&self, other: &ScoreField, f: impl Fn(f64, f64) -> f64) -> Result<ScoreField> {
        if !self.same_shape(other) {
            return Err(Error::ShapeDrift(format!(
                "score fields {:?} and {:?}",
                self.shapes(),
                other.shapes()
            )));
        }
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|((p1, q1), (p2, q2))| {
                Ok((p1.zip_with(p2, "field", &f)?, q1.zip_with(q2, "field", &f)?))
            })
            .collect::<Result<_>>()?;
        Ok(ScoreField { layers })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Factor {
    P,
    Q,
}

/// Location of one scored entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub layer: usize,
    pub factor: Factor,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadMode {
    /// Composite trapezoid over all `N + 1` nodes.
    Full,
    /// One interior node drawn uniformly per evaluation.
    Stochastic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub n: usize,
    pub mode: QuadMode,
    pub rng_label: String,
}

impl QuadratureSpec {
    pub fn new(n: usize, mode: QuadMode) -> Result<Self> {
        let spec = Self {
            n,
            mode,
            rng_label: "quadrature".into(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            QuadMode::Full if self.n < 1 => {
                Err(Error::InvalidArgument("quadrature needs N >= 1".into()))
            }
            QuadMode::Stochastic if self.n < 2 => Err(Error::InvalidArgument(
                "stochastic quadrature needs N >= 2 (empty interior node set)".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Interior node `k/N` for a uniform draw of `k ∈ {1, …, N−1}`.
    pub fn sample_node(&self, rng: &mut Prng) -> usize {
        1 + rng.index(self.n - 1)
    }
}

fn weighted_sum(terms: &[(f64, &[FactorGrads])]) -> Vec<FactorGrads> {
    let (_, first) = terms[0];
    first
        .iter()
        .enumerate()
        .map(|(l, (p0, q0))| {
            let mut p = Matrix::zeros(p0.rows(), p0.cols());
            let mut q = Matrix::zeros(q0.rows(), q0.cols());
            for (w, g) in terms {
                let (gp, gq) = &g[l];
                for (o, v) in p.data_mut().iter_mut().zip(gp.data()) {
                    *o += w * v;
                }
                for (o, v) in q.data_mut().iter_mut().zip(gq.data()) {
                    *o += w * v;
                }
            }
            (p, q)
        })
        .collect()
}

/// `|w| · |integral|` entrywise.
fn abs_score(params: &[FactorGrads], integral: &[FactorGrads]) -> ScoreField {
    ScoreField {
        layers: params
            .iter()
            .zip(integral)
            .map(|((wp, wq), (ip, iq))| {
                (
                    wp.zip_with(ip, "score", |w, i| (w * i).abs()).expect("layout"),
                    wq.zip_with(iq, "score", |w, i| (w * i).abs()).expect("layout"),
                )
            })
            .collect(),
    }
}

/// Gradients at every node `k/N`, `k = 0..=N`.
pub fn node_gradients(path: &impl PathGradient, n: usize) -> Result<Vec<Vec<FactorGrads>>> {
    (0..=n).map(|k| path.gradient_at(k as f64 / n as f64)).collect()
}

/// Signed composite trapezoid `(1/2N)[g(0) + 2Σ g(k/N) + g(1)]` from
/// precomputed node gradients.
pub fn trapezoid_from_nodes(nodes: &[Vec<FactorGrads>]) -> Vec<FactorGrads> {
    let n = nodes.len() - 1;
    let h = 1.0 / (2.0 * n as f64);
    let terms: Vec<(f64, &[FactorGrads])> = nodes
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let w = if k == 0 || k == n { h } else { 2.0 * h };
            (w, g.as_slice())
        })
        .collect();
    weighted_sum(&terms)
}

/// Signed trapezoid integral of `g` over `[0, 1]` with `n` panels.
pub fn trapezoid_integral(path: &impl PathGradient, n: usize) -> Result<Vec<FactorGrads>> {
    if n < 1 {
        return Err(Error::InvalidArgument("quadrature needs N >= 1".into()));
    }
    Ok(trapezoid_from_nodes(&node_gradients(path, n)?))
}

/// Composite-trapezoid IG score `|w|/(2N) · |g(0) + 2Σ_{k=1}^{N−1} g(k/N) + g(1)|`.
pub fn ig_full(path: &impl PathGradient, n: usize) -> Result<ScoreField> {
    let integral = trapezoid_integral(path, n)?;
    Ok(abs_score(&path.parameters(), &integral))
}

/// Single-node score `|w|/(2N) · |g(0) + 2g(α) + g(1)|` given the three
/// gradients.
pub fn single_node_score(
    params: &[FactorGrads],
    n: usize,
    g0: &[FactorGrads],
    g_node: &[FactorGrads],
    g1: &[FactorGrads],
) -> ScoreField {
    let h = 1.0 / (2.0 * n as f64);
    let sum = weighted_sum(&[(h, g0), (2.0 * h, g_node), (h, g1)]);
    abs_score(params, &sum)
}

/// Stochastic IG: one interior node drawn from `rng`, three gradient
/// evaluations. Returns the score and the node index `k`.
pub fn ig_stochastic(path: &impl PathGradient, n: usize, rng: &mut Prng) -> Result<(ScoreField, usize)> {
    if n < 2 {
        return Err(Error::InvalidArgument(
            "stochastic quadrature needs N >= 2 (empty interior node set)".into(),
        ));
    }
    let k = 1 + rng.index(n - 1);
    Ok((ig_at_node(path, n, k as f64 / n as f64)?, k))
}

/// Single-node score with an explicit node `alpha`.
pub fn ig_at_node(path: &impl PathGradient, n: usize, alpha: f64) -> Result<ScoreField> {
    let g0 = path.gradient_at(0.0)?;
    let gk = path.gradient_at(alpha)?;
    let g1 = path.gradient_at(1.0)?;
    Ok(single_node_score(&path.parameters(), n, &g0, &gk, &g1))
}

/// Runs the estimator selected by `spec`.
pub fn ig_score(path: &impl PathGradient, spec: &QuadratureSpec, rng: &mut Prng) -> Result<ScoreField> {
    spec.validate()?;
    match spec.mode {
        QuadMode::Full => ig_full(path, spec.n),
        QuadMode::Stochastic => Ok(ig_stochastic(path, spec.n, rng)?.0),
    }
}

/// Entrywise mean of `m` per-batch fields.
pub fn aggregate_epoch(per_batch: &[ScoreField], m: usize) -> Result<ScoreField> {
    if per_batch.is_empty() || m != per_batch.len() {
        return Err(Error::InvalidArgument(format!(
            "aggregate over M={m} with {} fields",
            per_batch.len()
        )));
    }
    let mut acc = per_batch[0].clone();
    for f in &per_batch[1..] {
        if !f.same_shape(&acc) {
            return Err(Error::ShapeDrift(
                "score field shape changed within an aggregation window".into(),
            ));
        }
        acc = acc.zip_with(f, |a, b| a + b)?;
    }
    let inv = 1.0 / m as f64;
    Ok(acc.map(|v| v * inv))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub c2_hat: f64,
    pub b_hat: f64,
    pub delta: f64,
    pub c_const: f64,
}

/// `|w|·C₂/(12N²) + c·|w|·B·sqrt(log(1/δ)/M)`.
pub fn error_bound(w_abs: f64, inputs: &BoundInputs, n: usize, m: usize) -> Result<f64> {
    if !(inputs.delta > 0.0 && inputs.delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta {} outside (0, 1)", inputs.delta)));
    }
    if n < 1 || m < 1 {
        return Err(Error::InvalidArgument("bound needs N >= 1 and M >= 1".into()));
    }
    let n = n as f64;
    let m = m as f64;
    let discretization = w_abs * inputs.c2_hat / (12.0 * n * n);
    let sampling = inputs.c_const * w_abs * inputs.b_hat * ((1.0 / inputs.delta).ln() / m).sqrt();
    Ok(discretization + sampling)
}

/// Per-entry `max |g''(α)|` from central second differences on the grid
/// `α_i = i·h`, `h = 1/(2·probes)`.
pub fn c2_field(path: &impl PathGradient, probes: usize) -> Result<ScoreField> {
    if probes < 3 {
        return Err(Error::InvalidArgument("C2 estimate needs probes >= 3".into()));
    }
    let grid = 2 * probes;
    let h = 1.0 / grid as f64;
    let g: Vec<Vec<FactorGrads>> = (0..=grid)
        .map(|i| path.gradient_at(i as f64 * h))
        .collect::<Result<_>>()?;
    let mut out = ScoreField::zeros_like(&g[0]);
    let inv_h2 = 1.0 / (h * h);
    for i in 1..grid {
        let d2 = weighted_sum(&[(inv_h2, &g[i + 1]), (-2.0 * inv_h2, &g[i]), (inv_h2, &g[i - 1])]);
        out = out.zip_with(&ScoreField { layers: d2 }, |a, b| a.max(b.abs()))?;
    }
    Ok(out)
}

/// `Ĉ₂` for a single entry.
pub fn estimate_c2(path: &impl PathGradient, entry: Entry, probes: usize) -> Result<f64> {
    Ok(c2_field(path, probes)?.get(entry))
}

/// Per-entry `max_k |g(k/N)|` over interior nodes.
pub fn b_field(path: &impl PathGradient, n: usize) -> Result<ScoreField> {
    if n < 2 {
        return Err(Error::InvalidArgument("B estimate needs N >= 2".into()));
    }
    let mut out: Option<ScoreField> = None;
    for k in 1..n {
        let g = ScoreField {
            layers: path.gradient_at(k as f64 / n as f64)?,
        };
        out = Some(match out {
            None => g.map(f64::abs),
            Some(acc) => acc.zip_with(&g, |a, b| a.max(b.abs()))?,
        });
    }
    Ok(out.expect("n >= 2"))
}

/// `B̂`: the largest interior-node gradient magnitude over the whole field.
pub fn estimate_b(path: &impl PathGradient, n: usize) -> Result<f64> {
    Ok(b_field(path, n)?.max())
}

/// Signed path attributions against the loss change they should account for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Completeness {
    /// `𝓛(ΔW) − 𝓛(0)`.
    pub loss_change: f64,
    /// `Σ w·∫g` over the entries of `P`, of `Q` and of `Λ` respectively.
    pub attribution_p: f64,
    pub attribution_q: f64,
    pub attribution_lambda: f64,
    /// Largest relative gap over the three factor groups.
    pub gap: f64,
}

/// Completeness check over all path parameters `P`, `Q` and `Λ`.
///
/// Scaling any single factor of `ΔW = P·diag(Λ)·Q` by `α` traces the same
/// adapter path `α·ΔW`, so each factor group on its own must attribute the
/// whole loss change when gradients are taken at the path point. The
/// reported gap is the worst group's `|Σ − ΔL| / max(1, |ΔL|)`.
pub fn completeness(net: &Network, views: &[SvdView], batch: &Batch, n_dense: usize) -> Result<Completeness> {
    if n_dense < 64 {
        return Err(Error::InvalidArgument("completeness needs n_dense >= 64".into()));
    }
    let deltas: Vec<Matrix> = views.iter().map(SvdView::reconstruct).collect();
    let l1 = net.loss_with_deltas(batch, &deltas, 1.0)?;
    let l0 = net.loss_with_deltas(batch, &deltas, 0.0)?;
    let loss_change = l1 - l0;

    let (mut ap, mut aq, mut al) = (0.0, 0.0, 0.0);
    let h = 1.0 / n_dense as f64;
    for k in 0..=n_dense {
        let w = if k == 0 || k == n_dense { 0.5 * h } else { h };
        let grads = grad_view(net, views, batch, k as f64 * h, PathDerivative::AtPathPoint)?;
        for (v, g) in views.iter().zip(&grads) {
            ap += w * dot(v.p.data(), g.dp.data());
            aq += w * dot(v.q.data(), g.dq.data());
            al += w * dot(&v.lambda, &g.dlambda);
        }
    }
    for (name, v) in [("P", ap), ("Q", aq), ("lambda", al)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} attribution")));
        }
    }
    let denom = loss_change.abs().max(1.0);
    let gap = [ap, aq, al]
        .iter()
        .map(|a| (a - loss_change).abs() / denom)
        .fold(0.0, f64::max);
    Ok(Completeness {
        loss_change,
        attribution_p: ap,
        attribution_q: aq,
        attribution_lambda: al,
        gap,
    })
}

/// Relative completeness gap; see [`completeness`].
pub fn completeness_gap(net: &Network, views: &[SvdView], batch: &Batch, n_dense: usize) -> Result<f64> {
    Ok(completeness(net, views, batch, n_dense)?.gap)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// One scored parameter `w` with a prescribed gradient path `g(α)`.
    pub(crate) struct ScalarProbe<F: Fn(f64) -> f64> {
        pub w: f64,
        pub g: F,
    }

    impl<F: Fn(f64) -> f64> PathGradient for ScalarProbe<F> {
        fn parameters(&self) -> Vec<FactorGrads> {
            vec![(Matrix::from_rows(&[[self.w]]), Matrix::zeros(1, 0))]
        }

        fn gradient_at(&self, alpha: f64) -> Result<Vec<FactorGrads>> {
            Ok(vec![(Matrix::from_rows(&[[(self.g)(alpha)]]), Matrix::zeros(1, 0))])
        }
    }

    fn entry0() -> Entry {
        Entry {
            layer: 0,
            factor: Factor::P,
            row: 0,
            col: 0,
        }
    }

    fn scalar(f: &ScoreField) -> f64 {
        f.get(entry0())
    }

    #[test]
    fn zero_weight_scores_zero() {
        let probe = ScalarProbe { w: 0.0, g: |a: f64| 5.0 + a };
        assert_eq!(scalar(&ig_full(&probe, 7).unwrap()), 0.0);
    }

    #[test]
    fn constant_gradient_is_integrated_exactly() {
        for n in [1, 2, 5, 20] {
            let probe = ScalarProbe { w: -1.5, g: |_| 0.4 };
            assert!((scalar(&ig_full(&probe, n).unwrap()) - 0.6).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_probe_at_two_panels() {
        let probe = ScalarProbe { w: 1.0, g: |a: f64| a * a };
        let s = scalar(&ig_full(&probe, 2).unwrap());
        assert!((s - 0.375).abs() < 1e-15);
        let err = s - 1.0 / 3.0;
        assert!((err - 0.125 / 3.0).abs() < 1e-15);
        // Discretization term of the bound with C₂ = 2 is saturated.
        let bound = error_bound(1.0, &BoundInputs { c2_hat: 2.0, b_hat: 0.0, delta: 0.5, c_const: 1.0 }, 2, 1).unwrap();
        assert!(err <= bound + 1e-15 && (bound - 2.0 / 48.0).abs() < 1e-15);
    }

    #[test]
    fn stochastic_equals_full_at_two_panels() {
        let probe = ScalarProbe { w: 0.7, g: |a: f64| (3.0 * a).sin() };
        let full = ig_full(&probe, 2).unwrap();
        let mut rng = Prng::new(4);
        for _ in 0..5 {
            let (s, k) = ig_stochastic(&probe, 2, &mut rng).unwrap();
            assert_eq!(k, 1);
            assert_eq!(s, full);
        }
    }

    #[test]
    fn stochastic_constant_gradient_closed_form() {
        let probe = ScalarProbe { w: 2.0, g: |_| -0.5 };
        let mut rng = Prng::new(1);
        for n in [2, 5, 20] {
            let (s, _) = ig_stochastic(&probe, n, &mut rng).unwrap();
            assert!((scalar(&s) - 1.0 * 2.0 / n as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn stochastic_enumeration_mean_versus_trapezoid() {
        // Averaging over all N−1 draws reproduces the interior part of the
        // trapezoid only with weight 2 instead of 2(N−1); the difference is
        // measured here exactly.
        let n = 5;
        let g = |a: f64| 1.0 + a + a * a;
        let probe = ScalarProbe { w: 1.0, g };
        let mean: f64 = (1..n)
            .map(|k| scalar(&ig_at_node(&probe, n, k as f64 / n as f64).unwrap()))
            .sum::<f64>()
            / (n - 1) as f64;
        let interior_mean = (1..n).map(|k| g(k as f64 / n as f64)).sum::<f64>() / (n - 1) as f64;
        let expected = (g(0.0) + 2.0 * interior_mean + g(1.0)) / (2.0 * n as f64);
        assert!((mean - expected).abs() < 1e-14);
        let full = scalar(&ig_full(&probe, n).unwrap());
        let unbiased = (g(0.0) + 2.0 * (n - 1) as f64 * interior_mean + g(1.0)) / (2.0 * n as f64);
        assert!((full - unbiased).abs() < 1e-14);
        assert!(mean < full);
    }

    #[test]
    fn stochastic_requires_interior_nodes() {
        let probe = ScalarProbe { w: 1.0, g: |_| 1.0 };
        assert!(ig_stochastic(&probe, 1, &mut Prng::new(0)).is_err());
        assert!(QuadratureSpec::new(1, QuadMode::Stochastic).is_err());
        assert!(QuadratureSpec::new(1, QuadMode::Full).is_ok());
    }

    fn field(v: f64) -> ScoreField {
        ScoreField {
            layers: vec![(Matrix::from_rows(&[[v]]), Matrix::zeros(1, 0))],
        }
    }

    #[test]
    fn aggregation_cases() {
        assert_eq!(aggregate_epoch(&[field(0.3)], 1).unwrap(), field(0.3));
        assert_eq!(aggregate_epoch(&vec![field(0.25); 4], 4).unwrap(), field(0.25));
        let mean = aggregate_epoch(&[field(0.2), field(0.4), field(0.6)], 3).unwrap();
        assert!((scalar(&mean) - 0.4).abs() < 1e-15);
        assert!(aggregate_epoch(&[field(0.2)], 2).is_err());
    }

    #[test]
    fn aggregation_rejects_shape_drift() {
        let wide = ScoreField {
            layers: vec![(Matrix::zeros(1, 2), Matrix::zeros(2, 0))],
        };
        assert!(matches!(aggregate_epoch(&[field(0.1), wide], 2), Err(Error::ShapeDrift(_))));
    }

    #[test]
    fn bound_arithmetic() {
        let zero = BoundInputs { c2_hat: 0.0, b_hat: 0.0, delta: 0.05, c_const: 1.0 };
        assert_eq!(error_bound(3.0, &zero, 4, 4).unwrap(), 0.0);
        let disc = BoundInputs { c2_hat: 12.0, b_hat: 0.0, delta: 0.05, c_const: 1.0 };
        assert!((error_bound(1.0, &disc, 10, 1).unwrap() - 0.01).abs() < 1e-15);
        let samp = BoundInputs { c2_hat: 0.0, b_hat: 2.0, delta: (-1.0f64).exp(), c_const: 1.0 };
        assert!((error_bound(1.0, &samp, 10, 4).unwrap() - 1.0).abs() < 1e-15);
        let bad = BoundInputs { delta: 1.0, ..zero };
        assert!(error_bound(1.0, &bad, 1, 1).is_err());
    }

    #[test]
    fn c2_estimates_on_probes() {
        let flat = ScalarProbe { w: 1.0, g: |_| 3.0 };
        assert!(estimate_c2(&flat, entry0(), 8).unwrap() <= 1e-6);
        let quad = ScalarProbe { w: 1.0, g: |a: f64| a * a };
        assert!((estimate_c2(&quad, entry0(), 8).unwrap() - 2.0).abs() < 1e-3);
        assert!(estimate_c2(&quad, entry0(), 2).is_err());
    }

    #[test]
    fn b_estimates_on_probes() {
        let zero = ScalarProbe { w: 1.0, g: |_| 0.0 };
        assert_eq!(estimate_b(&zero, 10).unwrap(), 0.0);
        let flat = ScalarProbe { w: 1.0, g: |_| -2.5 };
        assert_eq!(estimate_b(&flat, 10).unwrap(), 2.5);
    }

    #[test]
    fn homogeneity_in_the_weight() {
        let g = |a: f64| (2.0 * a).cos();
        let base = scalar(&ig_full(&ScalarProbe { w: 0.8, g }, 9).unwrap());
        let scaled = scalar(&ig_full(&ScalarProbe { w: 0.8 * 3.0, g }, 9).unwrap());
        assert!((scaled - 3.0 * base).abs() <= 1e-15 * scaled);
    }
}
