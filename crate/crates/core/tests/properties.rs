use fedlora_dp::dp::{clip_frobenius, ClipThreshold};
use fedlora_dp::lora::{
    adapter_delta, aggregate_stack, forward, global_delta, stacking_equivalence_residual, ClientUpdate, FrozenBase,
    LoraAdapter,
};
use fedlora_dp::{stack_h, stack_v, Matrix};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

fn any_matrix(max: usize) -> impl Strategy<Value = Matrix> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| matrix(r, c))
}

fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
    a.sub(b).unwrap().frobenius_norm() <= tol * (1.0 + a.frobenius_norm().max(b.frobenius_norm()))
}

/// `k` updates sharing `m` and `n`, ranks in `1..=6`.
fn updates(max_k: usize) -> impl Strategy<Value = Vec<ClientUpdate>> {
    (1..=max_k, 1usize..=10, 1usize..=10).prop_flat_map(|(k, m, n)| {
        prop::collection::vec(
            (1usize..=6).prop_flat_map(move |r| (matrix(m, r), matrix(r, n), 0.0f64..2.0)),
            k,
        )
        .prop_map(|parts| {
            parts
                .into_iter()
                .enumerate()
                .map(|(i, (b, a, w))| ClientUpdate::new(i, b, a, w).unwrap())
                .collect()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn stack_h_then_slice_recovers_parts(a in any_matrix(6), extra in 1usize..5) {
        let b = Matrix::from_fn(a.rows(), extra, |i, j| (i * 7 + j) as f64);
        let s = stack_h(&[a.clone(), b.clone()]).unwrap();
        prop_assert_eq!(s.slice_cols(0, a.cols()).unwrap(), a.clone());
        prop_assert_eq!(s.slice_cols(a.cols(), extra).unwrap(), b);
    }

    #[test]
    fn stack_v_then_slice_recovers_parts(a in any_matrix(6), extra in 1usize..5) {
        let b = Matrix::from_fn(extra, a.cols(), |i, j| (i + 3 * j) as f64);
        let s = stack_v(&[a.clone(), b.clone()]).unwrap();
        prop_assert_eq!(s.slice_rows(0, a.rows()).unwrap(), a.clone());
        prop_assert_eq!(s.slice_rows(a.rows(), extra).unwrap(), b);
    }

    #[test]
    fn frobenius_norm_is_absolutely_homogeneous(a in any_matrix(8), c in -100.0f64..100.0) {
        let lhs = a.scale(c).frobenius_norm();
        let rhs = c.abs() * a.frobenius_norm();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs));
    }

    #[test]
    fn matmul_is_associative(
        (a, b, c) in (1usize..6, 1usize..6, 1usize..6, 1usize..6)
            .prop_flat_map(|(p, q, r, s)| (matrix(p, q), matrix(q, r), matrix(r, s)))
    ) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(close(&left, &right, 1e-12));
    }

    #[test]
    fn clip_contract(a in any_matrix(8), frac in 0.01f64..3.0) {
        prop_assume!(a.frobenius_norm() > 0.0);
        let c = ClipThreshold::new(frac * a.frobenius_norm()).unwrap();
        let out = clip_frobenius(&a, c).unwrap();
        prop_assert!(out.frobenius_norm() <= c.value() + 1e-12);
        let cos = out.dot(&a).unwrap() / (out.frobenius_norm() * a.frobenius_norm());
        prop_assert!((cos - 1.0).abs() <= 1e-12);
        if a.frobenius_norm() <= c.value() {
            prop_assert_eq!(&out, &a);
        }
        prop_assert_eq!(clip_frobenius(&out, c).unwrap(), out);
    }

    #[test]
    fn stacked_product_equals_sum_of_products(us in updates(6)) {
        prop_assert!(stacking_equivalence_residual(&us).unwrap() <= 1e-12);
    }

    #[test]
    fn stacking_is_permutation_invariant(us in updates(6), rot in 0usize..6) {
        let mut shuffled = us.clone();
        let len = shuffled.len();
        shuffled.rotate_left(rot % len);
        shuffled.reverse();
        let a = global_delta(&aggregate_stack(&us).unwrap());
        let b = global_delta(&aggregate_stack(&shuffled).unwrap());
        prop_assert!(close(&a, &b, 1e-12));
    }

    #[test]
    fn forward_is_linear_in_inputs(
        (w, b, a, x1, x2) in (1usize..6, 1usize..6, 1usize..4, 1usize..4)
            .prop_flat_map(|(m, n, r, cols)| (matrix(m, n), matrix(m, r), matrix(r, n), matrix(n, cols), matrix(n, cols))),
        c in -5.0f64..5.0,
        scale in 0.5f64..8.0,
    ) {
        let base = FrozenBase::new(w);
        let ad = LoraAdapter::new(b, a, scale).unwrap();
        let mut mixed = x1.clone();
        mixed.axpy(c, &x2).unwrap();
        let lhs = forward(&base, &ad, &mixed).unwrap();
        let mut rhs = forward(&base, &ad, &x1).unwrap();
        rhs.axpy(c, &forward(&base, &ad, &x2).unwrap()).unwrap();
        prop_assert!(close(&lhs, &rhs, 1e-12));

        // and equal to applying the merged weight
        let merged = base.weight().add(&adapter_delta(&ad)).unwrap();
        prop_assert!(close(&lhs, &merged.matmul(&mixed).unwrap(), 1e-12));
    }
}
