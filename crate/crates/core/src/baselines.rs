//! Training-free merging: weight averaging, task arithmetic, DARE and TIES.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{apply_segments, Coefficient, Segment};
use crate::model::{ModelError, ModelParams};
use crate::task_vector::TaskVector;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum MergeError {
    NoTaskVectors,
    CoefficientCount { expected: usize, got: usize },
    InvalidConfig(&'static str),
    Schema(ModelError),
}

impl fmt::Display for MergeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MergeError::NoTaskVectors => write!(f, "at least one task vector is required"),
            MergeError::CoefficientCount { expected, got } => {
                write!(f, "expected {expected} coefficients, got {got}")
            }
            MergeError::InvalidConfig(m) => write!(f, "invalid merge config: {m}"),
            MergeError::Schema(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for MergeError {}

impl From<ModelError> for MergeError {
    fn from(e: ModelError) -> Self {
        MergeError::Schema(e)
    }
}

impl From<crate::tensor::TensorError> for MergeError {
    fn from(e: crate::tensor::TensorError) -> Self {
        MergeError::Schema(ModelError::Tensor(e))
    }
}

/// One scaling factor per expert, shared by every unit.
#[derive(Debug, Clone, PartialEq)]
pub struct TAConfig {
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DareConfig {
    pub drop_prob: f64,
    pub seed: u64,
}

impl Default for DareConfig {
    fn default() -> Self {
        DareConfig {
            drop_prob: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiesConfig {
    /// Fraction of entries kept per unit and task vector, by magnitude.
    pub keep_fraction: f64,
    pub scale: f64,
}

impl Default for TiesConfig {
    fn default() -> Self {
        TiesConfig {
            keep_fraction: 0.2,
            scale: 1.0,
        }
    }
}

pub(crate) fn check_schema(base: &ModelParams, tvs: &[TaskVector]) -> Result<(), MergeError> {
    if tvs.is_empty() {
        return Err(MergeError::NoTaskVectors);
    }
    for tv in tvs {
        if tv.config() != base.config() {
            return Err(MergeError::Schema(ModelError::SchemaMismatch(
                String::from("task vector and base configs differ"),
            )));
        }
    }
    Ok(())
}

/// `base + sum_k lambda_k * tau_k` with whole-unit segments in expert order.
fn scaled_sum(
    base: &ModelParams,
    tvs: &[TaskVector],
    lambdas: &[f64],
) -> Result<ModelParams, MergeError> {
    let mut tensors = Vec::with_capacity(base.tensors().len());
    for (u, b) in base.tensors().iter().enumerate() {
        let deltas: Vec<&Tensor> = tvs.iter().map(|tv| &tv.deltas()[u]).collect();
        let segments: Vec<Segment> = lambdas
            .iter()
            .enumerate()
            .map(|(k, &l)| Segment {
                expert: k,
                start: 0,
                end: b.numel(),
                coefficient: Coefficient::Fixed(l),
            })
            .collect();
        let mut out = b.clone();
        apply_segments(out.data_mut(), &deltas, &segments, |c| match c {
            Coefficient::Fixed(v) => Ok(v),
            Coefficient::Trainable(_) => unreachable!("fixed segments only"),
        })?;
        tensors.push(out);
    }
    Ok(ModelParams::from_tensors(*base.config(), tensors)?)
}

pub fn merge_weight_average(
    base: &ModelParams,
    tvs: &[TaskVector],
) -> Result<ModelParams, MergeError> {
    check_schema(base, tvs)?;
    let w = 1.0 / tvs.len() as f64;
    scaled_sum(base, tvs, &vec![w; tvs.len()])
}

pub fn merge_task_arithmetic(
    base: &ModelParams,
    tvs: &[TaskVector],
    cfg: &TAConfig,
) -> Result<ModelParams, MergeError> {
    check_schema(base, tvs)?;
    if cfg.lambdas.len() != tvs.len() {
        return Err(MergeError::CoefficientCount {
            expected: tvs.len(),
            got: cfg.lambdas.len(),
        });
    }
    if cfg.lambdas.iter().any(|l| !l.is_finite()) {
        return Err(MergeError::InvalidConfig("lambdas must be finite"));
    }
    scaled_sum(base, tvs, &cfg.lambdas)
}

fn unit_seed(seed: u64, expert: usize, unit: usize) -> u64 {
    // splitmix64 over (expert, unit) so streams do not depend on schedule
    let mut z = seed ^ ((expert as u64) << 32 | unit as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Drops each entry with probability `p` and rescales survivors by `1/(1-p)`.
pub fn dare_preprocess(tv: &TaskVector, cfg: &DareConfig) -> Result<TaskVector, MergeError> {
    let p = cfg.drop_prob;
    if !(0.0..1.0).contains(&p) {
        return Err(MergeError::InvalidConfig(
            "drop probability must be in [0, 1)",
        ));
    }
    if p == 0.0 {
        return Ok(tv.clone());
    }
    let rescale = 1.0 / (1.0 - p);
    let deltas = tv
        .deltas()
        .iter()
        .enumerate()
        .map(|(u, d)| {
            let mut rng = ChaCha8Rng::seed_from_u64(unit_seed(cfg.seed, tv.expert, u));
            let mut out = d.clone();
            for x in out.data_mut() {
                let draw: f64 = rng.random();
                *x = if draw < p { 0.0 } else { *x * rescale };
            }
            out
        })
        .collect();
    tv.with_deltas(deltas)
        .map_err(|_| MergeError::InvalidConfig("dare changed the schema"))
}

/// Indices of the `keep` largest-magnitude entries; ties favour lower indices.
fn top_magnitude(values: &[f64], keep: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        libm::fabs(values[b])
            .total_cmp(&libm::fabs(values[a]))
            .then(a.cmp(&b))
    });
    let mut mask = vec![false; values.len()];
    for &i in order.iter().take(keep) {
        mask[i] = true;
    }
    mask
}

pub(crate) fn ties_keep_count(n: usize, keep_fraction: f64) -> usize {
    let k = libm::ceil(keep_fraction * n as f64) as usize;
    k.clamp(usize::from(n > 0), n)
}

/// Trim, elect sign, disjoint merge for one unit's deltas.
pub fn ties_merge_unit(deltas: &[&[f64]], keep_fraction: f64) -> Vec<f64> {
    let n = deltas.first().map_or(0, |d| d.len());
    let keep = ties_keep_count(n, keep_fraction);
    let trimmed: Vec<Vec<f64>> = deltas
        .iter()
        .map(|d| {
            let mask = top_magnitude(d, keep);
            d.iter()
                .zip(&mask)
                .map(|(&v, &m)| if m { v } else { 0.0 })
                .collect()
        })
        .collect();
    let mut merged = vec![0.0; n];
    for (i, slot) in merged.iter_mut().enumerate() {
        let total: f64 = trimmed.iter().map(|t| t[i]).sum();
        if total == 0.0 {
            continue;
        }
        let elected = total > 0.0;
        let (mut sum, mut count) = (0.0, 0usize);
        for t in &trimmed {
            let v = t[i];
            if v != 0.0 && (v > 0.0) == elected {
                sum += v;
                count += 1;
            }
        }
        if count > 0 {
            *slot = sum / count as f64;
        }
    }
    merged
}

pub fn merge_ties(
    base: &ModelParams,
    tvs: &[TaskVector],
    cfg: &TiesConfig,
) -> Result<ModelParams, MergeError> {
    check_schema(base, tvs)?;
    if !(cfg.keep_fraction > 0.0 && cfg.keep_fraction <= 1.0) {
        return Err(MergeError::InvalidConfig("keep fraction must be in (0, 1]"));
    }
    if !cfg.scale.is_finite() {
        return Err(MergeError::InvalidConfig("scale must be finite"));
    }
    let mut tensors = Vec::with_capacity(base.tensors().len());
    for (u, b) in base.tensors().iter().enumerate() {
        let deltas: Vec<&[f64]> = tvs.iter().map(|tv| tv.deltas()[u].data()).collect();
        let merged = ties_merge_unit(&deltas, cfg.keep_fraction);
        let mut out = b.clone();
        for (o, m) in out.data_mut().iter_mut().zip(&merged) {
            *o += cfg.scale * m;
        }
        tensors.push(out);
    }
    Ok(ModelParams::from_tensors(*base.config(), tensors)?)
}
