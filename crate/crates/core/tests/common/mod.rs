#![allow(dead_code)]

use emerge_core::task_vector::compute_task_vector;
use emerge_core::tasks::CalibrationSet;
use emerge_core::{ModelConfig, ModelParams, TaskVector};

pub fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        d_model: 8,
        n_heads: 2,
        n_blocks: 2,
        d_mlp: 12,
        max_seq_len: 8,
    }
}

/// `base` plus a deterministic smooth perturbation of size `scale`.
pub fn perturbed(base: &ModelParams, seed: u64, scale: f64) -> ModelParams {
    let mut p = base.clone();
    for (u, t) in p.tensors_mut().iter_mut().enumerate() {
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            *x += scale * (seed as f64 * 7.13 + i as f64 * 0.37 + u as f64 * 1.31).sin();
        }
    }
    p
}

pub struct Fixture {
    pub base: ModelParams,
    pub experts: Vec<ModelParams>,
    pub tvs: Vec<TaskVector>,
    pub calib: CalibrationSet,
}

pub fn fixture(k: usize, n: usize) -> Fixture {
    let base = ModelParams::init(tiny(), 3).unwrap();
    let experts: Vec<ModelParams> = (0..k)
        .map(|e| perturbed(&base, e as u64 + 1, 0.2))
        .collect();
    let tvs = experts
        .iter()
        .enumerate()
        .map(|(e, x)| compute_task_vector(&base, x, e).unwrap())
        .collect();
    let calib = CalibrationSet {
        tasks: (0..k)
            .map(|e| (0..n).map(|i| vec![12, 1 + e, 2 + i, 10 + e, 3]).collect())
            .collect(),
    };
    Fixture {
        base,
        experts,
        tvs,
        calib,
    }
}
