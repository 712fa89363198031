//! Importance-guided chunk-wise coefficients.
//!
//! Stage-1 layer-wise coefficients are turned into a per-unit importance
//! score, a fixed budget of chunk coefficients is distributed according to
//! that score, and each chunked unit gets one coefficient per contiguous
//! slice of its flattened tensor. Units that receive no chunks keep their
//! stage-1 scalar, frozen.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::align::{
    AlignError, AlignmentProblem, CoefficientLayout, LayerCoefficients, TrainLog, UnitSegment,
};
use crate::autodiff::Coefficient;
use crate::baselines::MergeError;
use crate::model::{BlockUnit, ModelConfig, ModelParams, UnitId};
use crate::task_vector::{unit_stats, TaskVector, TaskVectorError, UnitStats};

#[derive(Debug, Clone, PartialEq)]
pub enum ChunkError {
    /// Every unit has zero raw importance.
    AllZeroImportance,
    InvalidConfig(&'static str),
    PlanMismatch(&'static str),
    TaskVector(TaskVectorError),
    Align(AlignError),
}

impl fmt::Display for ChunkError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChunkError::AllZeroImportance => write!(f, "importance is zero for every unit"),
            ChunkError::InvalidConfig(m) => write!(f, "invalid chunk config: {m}"),
            ChunkError::PlanMismatch(m) => write!(f, "chunk plan mismatch: {m}"),
            ChunkError::TaskVector(e) => write!(f, "{e}"),
            ChunkError::Align(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ChunkError {}

impl From<AlignError> for ChunkError {
    fn from(e: AlignError) -> Self {
        ChunkError::Align(e)
    }
}

impl From<MergeError> for ChunkError {
    fn from(e: MergeError) -> Self {
        ChunkError::Align(AlignError::Merge(e))
    }
}

impl From<TaskVectorError> for ChunkError {
    fn from(e: TaskVectorError) -> Self {
        ChunkError::TaskVector(e)
    }
}

/// Depth bucket of a block: thirds by index, remainder to `Late`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Early,
    Middle,
    Late,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Early, Stage::Middle, Stage::Late];

    pub fn of(block: usize, n_blocks: usize) -> Stage {
        let third = n_blocks / 3;
        if block < third {
            Stage::Early
        } else if block < 2 * third {
            Stage::Middle
        } else {
            Stage::Late
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Early => "early",
            Stage::Middle => "middle",
            Stage::Late => "late",
        }
    }
}

/// Grouping key for per-kind aggregates: block submodules plus the three
/// model-level units.
pub fn kind_name(unit: UnitId) -> &'static str {
    match unit {
        UnitId::Embed => "embed",
        UnitId::FinalNorm => "final_norm",
        UnitId::Head => "head",
        UnitId::Block { kind, .. } => kind.name(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    pub config: ModelConfig,
    /// Normalized importance per unit, schema order.
    pub importance: Vec<f64>,
    /// `sum_k |alpha_k| s_k n` before normalization.
    pub raw: Vec<f64>,
    /// `|alpha_k| s_k` per expert and unit.
    pub factors: Vec<Vec<f64>>,
    pub param_counts: Vec<usize>,
}

impl ImportanceReport {
    pub fn units(&self) -> Vec<UnitId> {
        self.config.units()
    }

    /// Summed importance per kind, in first-appearance schema order.
    pub fn by_kind(&self) -> Vec<(&'static str, f64)> {
        let mut out: Vec<(&'static str, f64)> = Vec::new();
        for (unit, &i) in self.units().into_iter().zip(&self.importance) {
            let name = kind_name(unit);
            match out.iter_mut().find(|(n, _)| *n == name) {
                Some(entry) => entry.1 += i,
                None => out.push((name, i)),
            }
        }
        out
    }

    /// Summed importance of block units per stage (model-level units excluded).
    pub fn by_stage(&self) -> Vec<(Stage, f64)> {
        let mut out: Vec<(Stage, f64)> = Stage::ALL.iter().map(|&s| (s, 0.0)).collect();
        for (unit, &i) in self.units().into_iter().zip(&self.importance) {
            if let Some(b) = unit.block() {
                let s = Stage::of(b, self.config.n_blocks);
                out[s as usize].1 += i;
            }
        }
        out
    }

    /// `grid[stage][kind]` over block units, renormalized to sum to one.
    pub fn stage_kind_grid(&self) -> [[f64; 9]; 3] {
        let mut grid = [[0.0; 9]; 3];
        let mut total = 0.0;
        for (unit, &i) in self.units().into_iter().zip(&self.importance) {
            if let UnitId::Block { index, kind } = unit {
                let s = Stage::of(index, self.config.n_blocks) as usize;
                let k = BlockUnit::ALL.iter().position(|&x| x == kind).unwrap_or(0);
                grid[s][k] += i;
                total += i;
            }
        }
        if total > 0.0 {
            for row in grid.iter_mut() {
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
        }
        grid
    }
}

/// Importance of each unit from stage-1 coefficients and task-vector statistics.
pub fn compute_importance(
    config: &ModelConfig,
    coeffs: &LayerCoefficients,
    stats: &[UnitStats],
) -> Result<ImportanceReport, ChunkError> {
    let units = config.unit_count();
    if coeffs.experts() != stats.len() || stats.is_empty() {
        return Err(ChunkError::PlanMismatch(
            "one stats entry per expert required",
        ));
    }
    if coeffs.alpha.iter().any(|a| a.len() != units)
        || stats
            .iter()
            .any(|s| s.normalized.len() != units || s.param_counts.len() != units)
    {
        return Err(ChunkError::PlanMismatch(
            "coefficients and stats disagree on units",
        ));
    }
    let param_counts = stats[0].param_counts.clone();
    let mut factors = vec![vec![0.0; units]; stats.len()];
    let mut raw = vec![0.0; units];
    for (k, s) in stats.iter().enumerate() {
        for u in 0..units {
            let f = libm::fabs(coeffs.alpha[k][u]) * s.normalized[u];
            factors[k][u] = f;
            raw[u] += f * param_counts[u] as f64;
        }
    }
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(ChunkError::AllZeroImportance);
    }
    Ok(ImportanceReport {
        config: *config,
        importance: raw.iter().map(|r| r / total).collect(),
        raw,
        factors,
        param_counts,
    })
}

/// `floor(budget * w_l / sum_j w_j)` with `w = I^kappa` and `0^0 = 1`.
pub fn allocate_counts(
    importance: &[f64],
    budget: f64,
    kappa: f64,
) -> Result<Vec<usize>, ChunkError> {
    if !(budget > 0.0) || !budget.is_finite() {
        return Err(ChunkError::InvalidConfig("budget must be positive"));
    }
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return Err(ChunkError::InvalidConfig("kappa must be nonnegative"));
    }
    if importance.iter().any(|&i| !(i >= 0.0) || !i.is_finite()) {
        return Err(ChunkError::InvalidConfig("importance must be nonnegative"));
    }
    let weights: Vec<f64> = importance
        .iter()
        .map(|&i| {
            if kappa == 0.0 {
                1.0
            } else {
                libm::pow(i, kappa)
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(ChunkError::AllZeroImportance);
    }
    Ok(weights
        .iter()
        .map(|w| libm::floor(budget * w / total) as usize)
        .collect())
}

/// Chunk counts and contiguous boundaries for every unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkPlan {
    pub budget: f64,
    pub kappa: f64,
    /// Chunks per unit; zero means frozen.
    pub counts: Vec<usize>,
    pub unit_sizes: Vec<usize>,
}

impl ChunkPlan {
    /// Counts are capped at the unit size so no chunk is empty.
    pub fn new(
        budget: f64,
        kappa: f64,
        counts: Vec<usize>,
        unit_sizes: Vec<usize>,
    ) -> Result<Self, ChunkError> {
        if counts.len() != unit_sizes.len() {
            return Err(ChunkError::PlanMismatch(
                "counts and unit sizes differ in length",
            ));
        }
        let counts = counts
            .iter()
            .zip(&unit_sizes)
            .map(|(&m, &n)| m.min(n))
            .collect();
        Ok(ChunkPlan {
            budget,
            kappa,
            counts,
            unit_sizes,
        })
    }

    /// Every unit split into `chunks` pieces (capped at its size).
    pub fn uniform(chunks: usize, unit_sizes: Vec<usize>) -> Result<Self, ChunkError> {
        if chunks == 0 {
            return Err(ChunkError::InvalidConfig("chunk count must be positive"));
        }
        let counts = vec![chunks; unit_sizes.len()];
        let budget = (chunks * unit_sizes.len()) as f64;
        ChunkPlan::new(budget, 0.0, counts, unit_sizes)
    }

    pub fn units(&self) -> usize {
        self.counts.len()
    }

    pub fn is_frozen(&self, unit: usize) -> bool {
        self.counts[unit] == 0
    }

    pub fn trainable_per_expert(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `[start, end)` ranges; the first `n % m` chunks are one longer.
    pub fn boundaries(&self, unit: usize) -> Vec<(usize, usize)> {
        chunk_bounds(self.unit_sizes[unit], self.counts[unit])
    }
}

pub fn chunk_bounds(n: usize, m: usize) -> Vec<(usize, usize)> {
    if m == 0 {
        return Vec::new();
    }
    let (base, extra) = (n / m, n % m);
    let mut out = Vec::with_capacity(m);
    let mut start = 0;
    for s in 0..m {
        let len = base + usize::from(s < extra);
        out.push((start, start + len));
        start += len;
    }
    out
}

pub fn allocate_chunks(
    report: &ImportanceReport,
    budget: f64,
    kappa: f64,
) -> Result<ChunkPlan, ChunkError> {
    let counts = allocate_counts(&report.importance, budget, kappa)?;
    ChunkPlan::new(budget, kappa, counts, report.param_counts.clone())
}

/// Ragged chunk coefficients plus frozen scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkCoefficients {
    /// `chunks[k][u][s]`; empty for frozen units.
    pub chunks: Vec<Vec<Vec<f64>>>,
    /// `frozen[k][u]`: the scalar used when unit `u` has no chunks.
    pub frozen: Vec<Vec<f64>>,
    pub prior: Vec<f64>,
}

impl ChunkCoefficients {
    /// Every chunk of a unit starts at that unit's layer-wise value.
    pub fn from_layer(plan: &ChunkPlan, layer: &LayerCoefficients) -> Result<Self, ChunkError> {
        if layer.units() != plan.units() || layer.alpha.iter().any(|a| a.len() != plan.units()) {
            return Err(ChunkError::PlanMismatch(
                "layer coefficients do not match plan",
            ));
        }
        let chunks = layer
            .alpha
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&plan.counts)
                    .map(|(&a, &m)| vec![a; m])
                    .collect()
            })
            .collect();
        Ok(ChunkCoefficients {
            chunks,
            frozen: layer.alpha.clone(),
            prior: layer.prior.clone(),
        })
    }

    pub fn experts(&self) -> usize {
        self.frozen.len()
    }

    pub fn check(&self, plan: &ChunkPlan) -> Result<(), ChunkError> {
        if self.chunks.len() != self.frozen.len() || self.prior.len() != self.frozen.len() {
            return Err(ChunkError::PlanMismatch(
                "expert count differs across fields",
            ));
        }
        for (row, frozen) in self.chunks.iter().zip(&self.frozen) {
            if row.len() != plan.units() || frozen.len() != plan.units() {
                return Err(ChunkError::PlanMismatch("unit count differs from plan"));
            }
            if row.iter().zip(&plan.counts).any(|(c, &m)| c.len() != m) {
                return Err(ChunkError::PlanMismatch("chunk count differs from plan"));
            }
        }
        if self
            .chunks
            .iter()
            .flatten()
            .flatten()
            .chain(self.frozen.iter().flatten())
            .any(|x| !x.is_finite())
        {
            return Err(ChunkError::PlanMismatch("non-finite coefficient"));
        }
        Ok(())
    }

    /// Trainable entries in `k, unit, chunk` order.
    pub fn flatten(&self) -> Vec<f64> {
        self.chunks.iter().flatten().flatten().copied().collect()
    }

    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let mut out = self.clone();
        let mut it = flat.iter();
        for c in out.chunks.iter_mut().flatten().flatten() {
            *c = *it.next().expect("flat length matches chunk count");
        }
        out
    }

    pub fn layout(&self, plan: &ChunkPlan) -> CoefficientLayout {
        let k_count = self.experts();
        let mut offsets = vec![vec![0usize; plan.units()]; k_count];
        let mut next = 0;
        let mut anchors = Vec::new();
        for k in 0..k_count {
            for u in 0..plan.units() {
                offsets[k][u] = next;
                next += plan.counts[u];
                anchors.extend(core::iter::repeat(self.prior[k]).take(plan.counts[u]));
            }
        }
        let segments = (0..plan.units())
            .map(|u| {
                let bounds = plan.boundaries(u);
                let mut segs = Vec::new();
                for k in 0..k_count {
                    if bounds.is_empty() {
                        segs.push(UnitSegment {
                            expert: k,
                            range: None,
                            coefficient: Coefficient::Fixed(self.frozen[k][u]),
                        });
                    }
                    for (s, &(start, end)) in bounds.iter().enumerate() {
                        segs.push(UnitSegment {
                            expert: k,
                            range: Some((start, end)),
                            coefficient: Coefficient::Trainable(offsets[k][u] + s),
                        });
                    }
                }
                segs
            })
            .collect();
        let budget = if plan.budget > 0.0 { plan.budget } else { 1.0 };
        CoefficientLayout {
            segments,
            anchors,
            reg_scale: 1.0 / (budget * k_count.max(1) as f64),
        }
    }
}

/// Merge with one coefficient per chunk (or the frozen scalar).
pub fn apply_chunk_coefficients(
    base: &ModelParams,
    tvs: &[TaskVector],
    plan: &ChunkPlan,
    coeffs: &ChunkCoefficients,
) -> Result<ModelParams, ChunkError> {
    coeffs.check(plan)?;
    if plan.units() != base.config().unit_count()
        || plan
            .unit_sizes
            .iter()
            .zip(base.tensors())
            .any(|(&n, t)| n != t.numel())
    {
        return Err(ChunkError::PlanMismatch("plan does not match model schema"));
    }
    if coeffs.experts() != tvs.len() {
        return Err(ChunkError::PlanMismatch(
            "coefficient experts differ from task vectors",
        ));
    }
    Ok(coeffs.layout(plan).apply(base, tvs, &coeffs.flatten())?)
}

/// Settings for the chunk-wise stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanConfig {
    /// Budget as a multiple of the number of units.
    pub budget_factor: f64,
    pub kappa: f64,
    /// Ablation: give every unit this many chunks instead of allocating.
    pub chunk_all: Option<usize>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            budget_factor: 1.1,
            kappa: 1.2,
            chunk_all: None,
        }
    }
}

impl PlanConfig {
    pub fn plan(&self, report: &ImportanceReport) -> Result<ChunkPlan, ChunkError> {
        match self.chunk_all {
            Some(n) => ChunkPlan::uniform(n, report.param_counts.clone()),
            None => {
                let budget = self.budget_factor * report.importance.len() as f64;
                allocate_chunks(report, budget, self.kappa)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpResult {
    pub report: ImportanceReport,
    pub plan: ChunkPlan,
    pub coefficients: ChunkCoefficients,
    pub log: TrainLog,
}

/// Importance, allocation and chunk-wise refinement starting from `stage1`.
pub fn fit_pp(
    base: &ModelParams,
    tvs: &[TaskVector],
    experts: &[ModelParams],
    calib: &crate::tasks::CalibrationSet,
    cfg: &crate::align::AlignConfig,
    stage1: &LayerCoefficients,
    plan_cfg: &PlanConfig,
) -> Result<PpResult, ChunkError> {
    let problem = AlignmentProblem::new(base, tvs, experts, calib, cfg.clone())?;
    fit_pp_problem(&problem, stage1, plan_cfg)
}

pub fn fit_pp_problem(
    problem: &AlignmentProblem<'_>,
    stage1: &LayerCoefficients,
    plan_cfg: &PlanConfig,
) -> Result<PpResult, ChunkError> {
    let stats = problem
        .task_vectors
        .iter()
        .map(unit_stats)
        .collect::<Result<Vec<_>, _>>()?;
    let report = compute_importance(problem.base.config(), stage1, &stats)?;
    let plan = plan_cfg.plan(&report)?;
    let init = ChunkCoefficients::from_layer(&plan, stage1)?;
    let layout = init.layout(&plan);
    let (values, log) = problem.optimize(&layout, &init.flatten())?;
    Ok(PpResult {
        report,
        plan,
        coefficients: init.with_flat(&values),
        log,
    })
}

/// Label like `"blocks.2.mlp.up"` for unit `u`.
pub fn unit_label(config: &ModelConfig, u: usize) -> String {
    config.units()[u].name()
}
