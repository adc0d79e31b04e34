//! Property-based invariants over the numeric kernels.

use glad_core::metrics::harmonic_mean;
use glad_core::optim::{fuse_gradients, project_conflict, sam_perturbation, ProjectionScope};
use glad_core::tape::Tape;
use glad_core::tensor::{dot, l2_norm, Tensor};
use proptest::prelude::*;

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0..50.0f64, len)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(logits in vec_strategy(12)) {
        let mut tape = Tape::new();
        let id = tape.leaf(&Tensor::new(vec![3, 4], logits).unwrap()).unwrap();
        let sm = tape.softmax(id).unwrap();
        let v = tape.value(sm).unwrap();
        for row in v.chunks(4) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_is_log_of_softmax(logits in vec_strategy(8)) {
        let mut tape = Tape::new();
        let id = tape.leaf(&Tensor::new(vec![2, 4], logits).unwrap()).unwrap();
        let sm = tape.softmax(id).unwrap();
        let lsm = tape.log_softmax(id).unwrap();
        let (sv, lv) = (tape.value(sm).unwrap().to_vec(), tape.value(lsm).unwrap());
        for (s, l) in sv.iter().zip(lv) {
            prop_assert!((s.ln() - l).abs() < 1e-10);
        }
    }

    #[test]
    fn perturbation_has_radius_rho_and_aligns_with_gradient(
        g in vec_strategy(32).prop_filter("nonzero", |v| l2_norm(v) > 1e-6),
        rho in 1e-3..10.0f64,
    ) {
        let eps = sam_perturbation(&g, rho).unwrap().unwrap();
        prop_assert!((l2_norm(&eps) - rho).abs() < 1e-9);
        let cos = dot(&eps, &g) / (l2_norm(&eps) * l2_norm(&g));
        prop_assert!((cos - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projection_is_a_contraction_and_kills_conflict(
        g in vec_strategy(16).prop_filter("nonzero", |v| l2_norm(v) > 1e-6),
        gp in vec_strategy(16),
    ) {
        let (out, projected) =
            project_conflict(&g, &gp, 1e-12, ProjectionScope::Global, &[]).unwrap();
        prop_assert!(l2_norm(&out) <= l2_norm(&gp) + 1e-12);
        if dot(&g, &gp) >= 0.0 {
            prop_assert!(!projected);
            prop_assert_eq!(out, gp);
        } else {
            prop_assert!(projected);
            // Residual conflict is bounded by the δ-regularized remainder.
            let bound = 1e-12 * dot(&g, &gp).abs() / (dot(&g, &g) + 1e-12) + 1e-9;
            prop_assert!(dot(&g, &out).abs() <= bound);
        }
    }

    #[test]
    fn fusion_is_exactly_affine(
        g in vec_strategy(8),
        gp in vec_strategy(8),
        alpha in 0.0..=1.0f64,
    ) {
        let fused = fuse_gradients(&g, &gp, alpha).unwrap();
        for ((f, gi), gpi) in fused.iter().zip(&g).zip(&gp) {
            let expect = (1.0 - alpha) * gi + alpha * gpi;
            prop_assert!((f - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn harmonic_mean_bounds(b in 0.0..100.0f64, n in 0.0..100.0f64) {
        prop_assume!(b + n > 0.0);
        let hm = harmonic_mean(b, n).unwrap();
        prop_assert!(hm <= (b + n) / 2.0 + 1e-12);
        prop_assert!(hm <= 2.0 * b.min(n) + 1e-12);
        prop_assert!(hm >= 0.0);
    }
}
