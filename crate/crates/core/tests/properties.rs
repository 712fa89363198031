mod common;

use emerge_core::align::apply_coefficients;
use emerge_core::baselines::{merge_task_arithmetic, ties_merge_unit, TAConfig};
use emerge_core::chunked::{
    allocate_counts, apply_chunk_coefficients, chunk_bounds, ChunkCoefficients, ChunkPlan,
};
use emerge_core::LayerCoefficients;
use proptest::prelude::*;

/// Reference TIES: explicit selection loop, then elect and disjoint mean.
fn ties_oracle(deltas: &[Vec<f64>], keep_fraction: f64) -> Vec<f64> {
    let n = deltas[0].len();
    let keep = ((keep_fraction * n as f64).ceil() as usize).max(1).min(n);
    let mut trimmed = Vec::new();
    for d in deltas {
        let mut taken = vec![false; n];
        for _ in 0..keep {
            let mut best: Option<usize> = None;
            for i in 0..n {
                if taken[i] {
                    continue;
                }
                match best {
                    Some(b) if d[i].abs() <= d[b].abs() => {}
                    _ => best = Some(i),
                }
            }
            taken[best.unwrap()] = true;
        }
        trimmed.push(
            (0..n)
                .map(|i| if taken[i] { d[i] } else { 0.0 })
                .collect::<Vec<f64>>(),
        );
    }
    (0..n)
        .map(|i| {
            let column: Vec<f64> = trimmed.iter().map(|t| t[i]).collect();
            let total: f64 = column.iter().sum();
            let sign = if total > 0.0 {
                1.0
            } else if total < 0.0 {
                -1.0
            } else {
                return 0.0;
            };
            let agreeing: Vec<f64> = column.into_iter().filter(|v| *v * sign > 0.0).collect();
            if agreeing.is_empty() {
                0.0
            } else {
                agreeing.iter().sum::<f64>() / agreeing.len() as f64
            }
        })
        .collect()
}

fn importance_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 1..40).prop_filter_map("nonzero total", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-9).then(|| v.iter().map(|x| x / s).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn allocation_respects_budget_and_order(i in importance_vec(), budget in 1.0f64..200.0, kappa in 0.0f64..3.0) {
        let m = allocate_counts(&i, budget, kappa).unwrap();
        prop_assert_eq!(m.len(), i.len());
        prop_assert!(m.iter().sum::<usize>() as f64 <= budget);
        for a in 0..i.len() {
            for b in 0..i.len() {
                if i[a] > i[b] {
                    prop_assert!(m[a] >= m[b], "I={:?} m={:?}", i, m);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn ties_matches_oracle(
        (n, vals) in (1usize..=33).prop_flat_map(|n| (Just(n), prop::collection::vec(-3i32..=3, 3 * n))),
        keep in 0.05f64..=1.0,
    ) {
        let deltas: Vec<Vec<f64>> = vals.chunks(n).map(|c| c.iter().map(|&x| x as f64 * 0.5).collect()).collect();
        let refs: Vec<&[f64]> = deltas.iter().map(Vec::as_slice).collect();
        prop_assert_eq!(ties_merge_unit(&refs, keep), ties_oracle(&deltas, keep));
    }

    #[test]
    fn ties_matches_oracle_on_continuous_values(
        (n, vals) in (1usize..=33).prop_flat_map(|n| (Just(n), prop::collection::vec(-1.0f64..1.0, 3 * n))),
        keep in 0.05f64..=1.0,
    ) {
        let deltas: Vec<Vec<f64>> = vals.chunks(n).map(<[f64]>::to_vec).collect();
        let refs: Vec<&[f64]> = deltas.iter().map(Vec::as_slice).collect();
        prop_assert_eq!(ties_merge_unit(&refs, keep), ties_oracle(&deltas, keep));
    }

    #[test]
    fn chunk_bounds_partition(n in 1usize..500, m in 1usize..50) {
        let m = m.min(n);
        let b = chunk_bounds(n, m);
        prop_assert_eq!(b.len(), m);
        prop_assert_eq!(b[0].0, 0);
        prop_assert_eq!(b[m - 1].1, n);
        for w in b.windows(2) {
            prop_assert_eq!(w[0].1, w[1].0);
        }
        let sizes: Vec<usize> = b.iter().map(|(s, e)| e - s).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn equal_chunks_collapse_to_layer_merge(
        counts in prop::collection::vec(0usize..6, 21),
        alpha in prop::collection::vec(-1.0f64..1.5, 2 * 21),
    ) {
        let f = common::fixture(2, 1);
        let cfg = common::tiny();
        let sizes: Vec<usize> = cfg.units().into_iter().map(|u| cfg.param_count(u).unwrap()).collect();
        let budget = counts.iter().sum::<usize>().max(1) as f64;
        let plan = ChunkPlan::new(budget, 1.2, counts, sizes).unwrap();
        let layer = LayerCoefficients::from_flat(&alpha, vec![0.3, 0.3]);
        let chunks = ChunkCoefficients::from_layer(&plan, &layer).unwrap();
        let a = apply_chunk_coefficients(&f.base, &f.tvs, &plan, &chunks).unwrap();
        let b = apply_coefficients(&f.base, &f.tvs, &layer).unwrap();
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            for (p, q) in x.data().iter().zip(y.data()) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn task_arithmetic_is_linear(l0 in -2.0f64..2.0, l1 in -2.0f64..2.0, s in -3.0f64..3.0) {
        let f = common::fixture(2, 1);
        let one = merge_task_arithmetic(&f.base, &f.tvs, &TAConfig { lambdas: vec![l0, l1] }).unwrap();
        let scaled = merge_task_arithmetic(&f.base, &f.tvs, &TAConfig { lambdas: vec![s * l0, s * l1] }).unwrap();
        for (u, b) in f.base.tensors().iter().enumerate() {
            let (d0, d1) = (f.tvs[0].deltas()[u].data(), f.tvs[1].deltas()[u].data());
            for i in 0..b.numel() {
                let want = b.data()[i] + l0 * d0[i] + l1 * d1[i];
                prop_assert!((one.tensors()[u].data()[i] - want).abs() <= 1e-12);
                let lhs = scaled.tensors()[u].data()[i] - b.data()[i];
                let rhs = s * (one.tensors()[u].data()[i] - b.data()[i]);
                prop_assert!((lhs - rhs).abs() <= 1e-9);
            }
        }
    }
}
