//! Task vectors `expert - base` and their per-unit statistics.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::model::{ModelConfig, ModelError, ModelParams, UnitId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum TaskVectorError {
    Schema(ModelError),
    /// Every delta is zero, so magnitudes cannot be normalized.
    AllZero,
    Empty,
}

impl fmt::Display for TaskVectorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskVectorError::Schema(e) => write!(f, "{e}"),
            TaskVectorError::AllZero => write!(f, "task vector is identically zero"),
            TaskVectorError::Empty => write!(f, "task vector has no units"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TaskVectorError {}

impl From<ModelError> for TaskVectorError {
    fn from(e: ModelError) -> Self {
        TaskVectorError::Schema(e)
    }
}

/// Per-unit parameter deltas of one expert relative to the base.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub expert: usize,
    config: ModelConfig,
    deltas: Vec<Tensor>,
    pub base_fingerprint: String,
    pub expert_fingerprint: String,
}

impl TaskVector {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Deltas in schema order.
    pub fn deltas(&self) -> &[Tensor] {
        &self.deltas
    }

    pub fn get(&self, unit: UnitId) -> Option<&Tensor> {
        self.config.unit_index(unit).map(|i| &self.deltas[i])
    }

    /// Replaces the deltas (same schema), keeping provenance.
    pub fn with_deltas(&self, deltas: Vec<Tensor>) -> Result<TaskVector, TaskVectorError> {
        if deltas.len() != self.deltas.len()
            || deltas
                .iter()
                .zip(&self.deltas)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(TaskVectorError::Schema(ModelError::SchemaMismatch(
                String::from("replacement deltas do not match task vector schema"),
            )));
        }
        Ok(TaskVector {
            deltas,
            ..self.clone()
        })
    }

    /// `base + delta`, unit by unit.
    pub fn apply_to(&self, base: &ModelParams) -> Result<ModelParams, TaskVectorError> {
        if base.config() != &self.config {
            return Err(ModelError::SchemaMismatch(String::from("config differs")).into());
        }
        let tensors = base
            .tensors()
            .iter()
            .zip(&self.deltas)
            .map(|(b, d)| b.add(d).map_err(ModelError::from))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ModelParams::from_tensors(self.config, tensors)?)
    }
}

pub fn compute_task_vector(
    base: &ModelParams,
    expert: &ModelParams,
    expert_id: usize,
) -> Result<TaskVector, TaskVectorError> {
    base.same_schema(expert)?;
    let deltas = expert
        .tensors()
        .iter()
        .zip(base.tensors())
        .map(|(e, b)| e.sub(b).map_err(ModelError::from))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TaskVector {
        expert: expert_id,
        config: *base.config(),
        deltas,
        base_fingerprint: base.fingerprint(),
        expert_fingerprint: expert.fingerprint(),
    })
}

/// Per-unit magnitude statistics of one task vector.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitStats {
    /// `mean(|delta|)` per unit.
    pub raw: Vec<f64>,
    /// `raw` normalized to sum to one across units.
    pub normalized: Vec<f64>,
    pub param_counts: Vec<usize>,
}

pub fn unit_stats(tv: &TaskVector) -> Result<UnitStats, TaskVectorError> {
    if tv.deltas.is_empty() {
        return Err(TaskVectorError::Empty);
    }
    let mut raw = Vec::with_capacity(tv.deltas.len());
    let mut param_counts = Vec::with_capacity(tv.deltas.len());
    for d in &tv.deltas {
        let n = d.numel();
        let sum: f64 = d.data().iter().map(|x| libm::fabs(*x)).sum();
        raw.push(if n == 0 { 0.0 } else { sum / n as f64 });
        param_counts.push(n);
    }
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(TaskVectorError::AllZero);
    }
    let normalized = raw.iter().map(|r| r / total).collect();
    Ok(UnitStats {
        raw,
        normalized,
        param_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 6,
            d_model: 4,
            n_heads: 2,
            n_blocks: 2,
            d_mlp: 6,
            max_seq_len: 8,
        }
    }

    #[test]
    fn self_difference_is_zero() {
        let base = ModelParams::init(cfg(), 1).unwrap();
        let tv = compute_task_vector(&base, &base, 0).unwrap();
        assert!(tv
            .deltas()
            .iter()
            .all(|d| d.data().iter().all(|&x| x == 0.0)));
        assert_eq!(unit_stats(&tv), Err(TaskVectorError::AllZero));
    }

    #[test]
    fn elementwise_oracle_and_reconstruction() {
        let base = ModelParams::init(cfg(), 1).unwrap();
        let expert = ModelParams::init(cfg(), 2).unwrap();
        let tv = compute_task_vector(&base, &expert, 0).unwrap();
        for ((d, b), e) in tv.deltas().iter().zip(base.tensors()).zip(expert.tensors()) {
            for i in 0..d.numel() {
                assert_eq!(d.data()[i], e.data()[i] - b.data()[i]);
            }
        }
        let back = tv.apply_to(&base).unwrap();
        for (r, e) in back.tensors().iter().zip(expert.tensors()) {
            for (x, y) in r.data().iter().zip(e.data()) {
                assert!((x - y).abs() <= 1e-15 * y.abs().max(1.0));
            }
        }
        assert_eq!(tv.base_fingerprint, base.fingerprint());
        assert_eq!(tv.expert_fingerprint, expert.fingerprint());
    }

    #[test]
    fn schema_mismatch() {
        let a = ModelParams::init(cfg(), 1).unwrap();
        let b = ModelParams::init(
            ModelConfig {
                n_blocks: 1,
                ..cfg()
            },
            1,
        )
        .unwrap();
        assert!(compute_task_vector(&a, &b, 0).is_err());
    }

    fn tv_from(units: Vec<Tensor>) -> TaskVector {
        let base = ModelParams::zeros(cfg()).unwrap();
        let tv = compute_task_vector(&base, &base, 0).unwrap();
        let mut deltas = tv.deltas().to_vec();
        for (i, u) in units.into_iter().enumerate() {
            deltas[i] = u;
        }
        tv.with_deltas(deltas).unwrap()
    }

    #[test]
    fn stats_direct_normalization() {
        let c = cfg();
        let shapes: Vec<_> = c
            .units()
            .iter()
            .map(|&u| c.unit_shape(u).unwrap())
            .collect();
        let mut units: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        units[0] = Tensor::full(&shapes[0], -3.0);
        units[1] = Tensor::full(&shapes[1], 1.0);
        let s = unit_stats(&tv_from(units)).unwrap();
        assert_eq!(s.normalized[0], 0.75);
        assert_eq!(s.normalized[1], 0.25);

        let equal: Vec<Tensor> = shapes.iter().map(|s| Tensor::full(s, 0.5)).collect();
        let s = unit_stats(&tv_from(equal)).unwrap();
        let n = c.unit_count() as f64;
        assert!(s.normalized.iter().all(|&x| (x - 1.0 / n).abs() < 1e-15));
    }

    #[test]
    fn stats_against_brute_force() {
        let base = ModelParams::init(cfg(), 5).unwrap();
        let expert = ModelParams::init(cfg(), 6).unwrap();
        let tv = compute_task_vector(&base, &expert, 0).unwrap();
        let s = unit_stats(&tv).unwrap();
        let mut means = Vec::new();
        for d in tv.deltas() {
            let mut acc = 0.0;
            for &x in d.data() {
                acc += x.abs();
            }
            means.push(acc / d.numel() as f64);
        }
        let total: f64 = means.iter().sum();
        for (i, m) in means.iter().enumerate() {
            assert!((s.normalized[i] - m / total).abs() <= 1e-12 * (m / total));
            assert_eq!(s.param_counts[i], tv.deltas()[i].numel());
        }
        assert!((s.normalized.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}
