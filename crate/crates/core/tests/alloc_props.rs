use std::collections::HashSet;

use igu_lora::alloc::{budget_at, per_layer, prune_rebuild, select_top_b, PruneSchedule, TripletScore};
use igu_lora::linalg::{svd_thin, Matrix};
use proptest::prelude::*;

fn scores_strategy() -> impl Strategy<Value = Vec<TripletScore>> {
    (1usize..4, 1usize..6).prop_flat_map(|(layers, rank)| {
        proptest::collection::vec((0u8..4, 0u8..3), layers * rank).prop_map(move |vals| {
            vals.iter()
                .enumerate()
                .map(|(k, &(v, l))| TripletScore {
                    layer_id: k / rank,
                    triplet_index: k % rank,
                    // Small integer grids force plenty of ties.
                    value: v as f64,
                    lambda_abs: l as f64,
                })
                .collect()
        })
    })
}

proptest! {
    #[test]
    fn selection_has_budget_size_and_no_duplicates(scores in scores_strategy(), frac in 0.0f64..=1.0) {
        let b = ((scores.len() as f64 * frac).round() as usize).clamp(1, scores.len());
        let sel = select_top_b(&scores, b).unwrap();
        prop_assert_eq!(sel.len(), b);
        let uniq: HashSet<_> = sel.iter().collect();
        prop_assert_eq!(uniq.len(), b);
        // Every unselected triplet ranks no higher than every selected one.
        let value = |l: usize, i: usize| scores.iter().find(|s| s.layer_id == l && s.triplet_index == i).unwrap().value;
        let min_in = sel.iter().map(|&(l, i)| value(l, i)).fold(f64::INFINITY, f64::min);
        for s in &scores {
            if !uniq.contains(&(s.layer_id, s.triplet_index)) {
                prop_assert!(s.value <= min_in);
            }
        }
        let n_layers = scores.iter().map(|s| s.layer_id).max().unwrap() + 1;
        let split = per_layer(&sel, n_layers);
        prop_assert_eq!(split.iter().map(Vec::len).sum::<usize>(), b);
    }

    #[test]
    fn selection_is_order_independent(scores in scores_strategy(), b in 1usize..4) {
        let b = b.min(scores.len());
        let mut rev = scores.clone();
        rev.reverse();
        prop_assert_eq!(select_top_b(&scores, b).unwrap(), select_top_b(&rev, b).unwrap());
    }

    #[test]
    fn budget_is_monotone_and_hits_endpoints(
        r0 in 1usize..9, layers in 1usize..4, frac in 0.0f64..=1.0,
        start in 0.0f64..3.0, len in 0.5f64..6.0, interval in 0.1f64..1.0, spe in 1usize..20,
    ) {
        let b_init = r0 * layers;
        let b_final = ((b_init as f64 * frac).round() as usize).max(1);
        let sched = PruneSchedule::new(r0, b_final, start, start + len, interval);
        sched.validate(layers).unwrap();
        let end = sched.end_step(spe);
        let mut prev = b_init;
        for step in 0..=end + 2 {
            let b = budget_at(&sched, layers, step, spe);
            prop_assert!(b <= prev && b >= b_final);
            prev = b;
        }
        prop_assert_eq!(budget_at(&sched, layers, 0, spe), b_init);
        prop_assert_eq!(budget_at(&sched, layers, end, spe), b_final);
    }

    #[test]
    fn rebuild_drift_is_bounded_by_dropped_mass(
        vals in proptest::collection::vec(-2.0f64..2.0, 6 * 5), mask in proptest::collection::vec(any::<bool>(), 5),
    ) {
        let m = Matrix::from_vec(6, 5, vals).unwrap();
        let view = svd_thin(&m).unwrap();
        let mut keep: Vec<usize> = (0..5).filter(|&i| mask[i]).collect();
        if keep.is_empty() {
            keep.push(4);
        }
        let (a, b) = prune_rebuild(&view, &keep).unwrap();
        prop_assert_eq!((a.cols(), b.rows()), (keep.len(), keep.len()));
        let drift = a.matmul(&b).unwrap().sub(&m).unwrap().frobenius_norm();
        let dropped: f64 = (0..5).filter(|i| !keep.contains(i)).map(|i| view.lambda[i].powi(2)).sum::<f64>().sqrt();
        prop_assert!(drift <= dropped + 1e-10, "{drift} > {dropped}");
    }
}

#[test]
fn full_selection_rebuild_is_exact() {
    let m = Matrix::from_fn(7, 4, |i, j| ((i * 3 + j * 5) % 7) as f64 - 3.0);
    let view = svd_thin(&m).unwrap();
    let (a, b) = prune_rebuild(&view, &[0, 1, 2, 3]).unwrap();
    assert!(a.matmul(&b).unwrap().sub(&m).unwrap().max_abs() <= 1e-12);
}

#[test]
fn infeasible_budgets_error() {
    let s = vec![TripletScore { layer_id: 0, triplet_index: 0, value: 1.0, lambda_abs: 1.0 }];
    assert!(select_top_b(&s, 0).is_err());
    assert!(select_top_b(&s, 2).is_err());
    let view = svd_thin(&Matrix::identity(3)).unwrap();
    assert!(prune_rebuild(&view, &[]).is_err());
    assert!(prune_rebuild(&view, &[3]).is_err());
}
