mod common;

use emerge_core::baselines::{dare_preprocess, DareConfig};
use emerge_core::task_vector::compute_task_vector;

#[test]
fn dare_mean_over_seeds_tracks_original() {
    let f = common::fixture(1, 1);
    let mut base = f.base.clone();
    // a few exact zeros in the delta
    base.tensors_mut()[1].data_mut()[0] = f.experts[0].tensors()[1].data()[0];
    base.tensors_mut()[1].data_mut()[3] = f.experts[0].tensors()[1].data()[3];
    let tv = compute_task_vector(&base, &f.experts[0], 0).unwrap();
    let seeds = 1000;
    let mut sums: Vec<Vec<f64>> = tv.deltas().iter().map(|d| vec![0.0; d.numel()]).collect();
    for seed in 0..seeds {
        let d = dare_preprocess(
            &tv,
            &DareConfig {
                drop_prob: 0.5,
                seed,
            },
        )
        .unwrap();
        for (u, t) in d.deltas().iter().enumerate() {
            for (i, x) in t.data().iter().enumerate() {
                let orig = tv.deltas()[u].data()[i];
                if orig == 0.0 {
                    assert_eq!(*x, 0.0);
                }
                sums[u][i] += x;
            }
        }
    }
    // each kept entry is 2 * tau, so the mean over seeds has relative sd 1 / sqrt(seeds)
    let sd = 1.0 / (seeds as f64).sqrt();
    let (mut err2, mut norm2) = (0.0, 0.0);
    for (u, t) in tv.deltas().iter().enumerate() {
        for (i, orig) in t.data().iter().enumerate() {
            if orig.abs() > 1e-6 {
                let mean = sums[u][i] / seeds as f64;
                assert!(
                    (mean - orig).abs() <= 5.0 * sd * orig.abs(),
                    "unit {u} entry {i}"
                );
                err2 += (mean - orig) * (mean - orig);
                norm2 += orig * orig;
            }
        }
    }
    assert!((err2 / norm2).sqrt() <= 0.05);
}
