use igu_lora::experiments::default_ig_setup;
use igu_lora::ig::{
    b_field, completeness, estimate_b, estimate_c2, ig_full, ig_stochastic, node_gradients, Entry, Factor, PathGradient,
    ViewPath,
};
use igu_lora::linalg::{Matrix, Prng};
use igu_lora::model::{Activation, Batch, FactorGrads, LossKind, Network};
use igu_lora::trainer::layer_views;
use proptest::prelude::*;

/// Path with a frozen gradient profile `g(α) = g0 + α·g1` and free parameters.
struct Frozen {
    params: Vec<FactorGrads>,
    g0: Vec<FactorGrads>,
    g1: Vec<FactorGrads>,
}

impl PathGradient for Frozen {
    fn parameters(&self) -> Vec<FactorGrads> {
        self.params.clone()
    }

    fn gradient_at(&self, alpha: f64) -> igu_lora::Result<Vec<FactorGrads>> {
        Ok(self
            .g0
            .iter()
            .zip(&self.g1)
            .map(|((a, b), (c, d))| (a.add_scaled(c, alpha).unwrap(), b.add_scaled(d, alpha).unwrap()))
            .collect())
    }
}

fn m(v: &[f64]) -> Matrix {
    Matrix::from_vec(1, v.len(), v.to_vec()).unwrap()
}

proptest! {
    #[test]
    fn score_is_homogeneous_in_its_weight(w in -3.0f64..3.0, t in 0.01f64..10.0, g0 in -2.0f64..2.0, g1 in -2.0f64..2.0, n in 1usize..30) {
        let mk = |w: f64| Frozen {
            params: vec![(m(&[w, 0.5]), m(&[1.0]))],
            g0: vec![(m(&[g0, 1.0]), m(&[0.3]))],
            g1: vec![(m(&[g1, -1.0]), m(&[0.2]))],
        };
        let e = Entry { layer: 0, factor: Factor::P, row: 0, col: 0 };
        let base = ig_full(&mk(w), n).unwrap().get(e);
        let scaled = ig_full(&mk(t * w), n).unwrap().get(e);
        prop_assert!((scaled - t * base).abs() <= 1e-12 * (1.0 + scaled.abs()));
    }
}

#[test]
fn two_panel_stochastic_matches_full_bitwise() {
    let s = default_ig_setup(1).unwrap();
    let path = s.path(0);
    let full = ig_full(&path, 2).unwrap();
    let mut rng = Prng::new(4).stream("quadrature");
    for _ in 0..3 {
        let (st, k) = ig_stochastic(&path, 2, &mut rng).unwrap();
        assert_eq!(k, 1);
        assert_eq!(st, full);
    }
}

#[test]
fn completeness_on_the_default_net() {
    let s = default_ig_setup(3).unwrap();
    let c = completeness(&s.net, &s.views, &s.batches[0], 1024).unwrap();
    assert!(c.loss_change.abs() > 1e-3, "{c:?}");
    assert!(c.gap <= 1e-3, "{c:?}");
}

#[test]
fn completeness_on_a_linear_quadratic_model() {
    let mut rng = Prng::new(8);
    let mut net = Network::init_lora(&[6, 4], 3, Activation::Tanh, LossKind::MeanSquaredError, &mut rng).unwrap();
    net.layers[0].b = Matrix::from_fn(3, 4, |_, _| rng.normal());
    let views = layer_views(&net).unwrap();
    let batch = Batch::new(Matrix::from_fn(10, 6, |_, _| rng.normal()), Matrix::from_fn(10, 4, |_, _| rng.normal())).unwrap();
    let c = completeness(&net, &views, &batch, 1024).unwrap();
    assert!(c.gap <= 1e-10, "{c:?}");
}

#[test]
fn completeness_with_zero_update_is_zero() {
    let mut rng = Prng::new(2);
    let net = Network::init_lora(&[5, 3, 2], 2, Activation::Tanh, LossKind::MeanSquaredError, &mut rng).unwrap();
    let views = layer_views(&net).unwrap();
    let batch = Batch::new(Matrix::from_fn(4, 5, |_, _| rng.normal()), Matrix::from_fn(4, 2, |_, _| rng.normal())).unwrap();
    let c = completeness(&net, &views, &batch, 64).unwrap();
    assert_eq!(c.loss_change, 0.0);
    assert!(c.gap <= 1e-15);
}

#[test]
fn b_hat_dominates_every_interior_node() {
    let s = default_ig_setup(3).unwrap();
    let path: ViewPath = s.path(0);
    let b_hat = estimate_b(&path, 20).unwrap();
    let field = b_field(&path, 20).unwrap();
    for g in &node_gradients(&path, 20).unwrap()[1..20] {
        for ((p, q), (bp, bq)) in g.iter().zip(&field.layers) {
            for (x, b) in p.data().iter().zip(bp.data()).chain(q.data().iter().zip(bq.data())) {
                assert!(x.abs() <= *b && *b <= b_hat);
            }
        }
    }
}

#[test]
fn c2_estimate_is_stable_under_probe_doubling() {
    let s = default_ig_setup(3).unwrap();
    let path = s.path(0);
    let e = Entry { layer: 0, factor: Factor::P, row: 0, col: 0 };
    let a = estimate_c2(&path, e, 16).unwrap();
    let b = estimate_c2(&path, e, 32).unwrap();
    assert!(a.is_finite() && b.is_finite());
    assert!((a - b).abs() <= 0.25 * a.max(b), "{a} vs {b}");
}
