//! Layer-wise merging coefficients learned by aligning the merged model with
//! each expert on unlabeled calibration inputs.
//!
//! For expert `k` and calibration inputs `D_k` the objective is
//!
//! ```text
//! sum_k beta_k * (L_hid(k) + L_logit(k)) + gamma * R(alpha)
//! L_hid(k)   = sum over supervised blocks l of mean_x sq_l2(h_l(x; merged), h_l(x; expert k)) / d_model
//! L_logit(k) = T^2 * mean_x KL(softmax(z_k(x)/T) || softmax(z(x; merged)/T))
//! R(alpha)   = mean over (k, unit) of |alpha - prior_k|
//! ```
//!
//! `sq_l2` averages over token positions and sums over the hidden dimension,
//! so `L_hid` is a mean over samples, positions and hidden units. The KL term
//! averages over token positions. Only coefficients are trained:
//! base weights and task vectors enter the tape as borrowed constants and the
//! expert-side targets are computed once.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::autodiff::{Coefficient, Segment, Tape, Var};
use crate::baselines::{check_schema, MergeError};
use crate::model::{forward, forward_on_tape, ModelError, ModelParams};
use crate::optim::{Adam, AdamConfig, Schedule};
use crate::task_vector::TaskVector;
use crate::tasks::CalibrationSet;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub enum AlignError {
    EmptyCalibration,
    ExpertCount {
        task_vectors: usize,
        other: usize,
        what: &'static str,
    },
    InvalidConfig(&'static str),
    /// A loss term became NaN or infinite during optimization.
    NonFinite {
        step: usize,
        term: &'static str,
    },
    Model(ModelError),
    Merge(MergeError),
}

impl fmt::Display for AlignError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlignError::EmptyCalibration => write!(f, "calibration set has an empty task"),
            AlignError::ExpertCount {
                task_vectors,
                other,
                what,
            } => {
                write!(f, "{task_vectors} task vectors but {other} {what}")
            }
            AlignError::InvalidConfig(m) => write!(f, "invalid alignment config: {m}"),
            AlignError::NonFinite { step, term } => {
                write!(f, "non-finite {term} at step {step}")
            }
            AlignError::Model(e) => write!(f, "{e}"),
            AlignError::Merge(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for AlignError {}

impl From<ModelError> for AlignError {
    fn from(e: ModelError) -> Self {
        AlignError::Model(e)
    }
}

impl From<TensorError> for AlignError {
    fn from(e: TensorError) -> Self {
        AlignError::Model(ModelError::Tensor(e))
    }
}

impl From<MergeError> for AlignError {
    fn from(e: MergeError) -> Self {
        AlignError::Merge(e)
    }
}

/// One coefficient per (expert, unit), plus a prior per expert.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCoefficients {
    /// `alpha[k][u]` for expert `k` and unit `u` in schema order.
    pub alpha: Vec<Vec<f64>>,
    pub prior: Vec<f64>,
}

impl LayerCoefficients {
    /// Every unit of expert `k` set to `values[k]`, which is also the prior.
    pub fn constant(values: &[f64], units: usize) -> Self {
        LayerCoefficients {
            alpha: values.iter().map(|&v| vec![v; units]).collect(),
            prior: values.to_vec(),
        }
    }

    pub fn experts(&self) -> usize {
        self.alpha.len()
    }

    pub fn units(&self) -> usize {
        self.alpha.first().map_or(0, Vec::len)
    }

    pub fn is_finite(&self) -> bool {
        self.alpha
            .iter()
            .flatten()
            .chain(&self.prior)
            .all(|x| x.is_finite())
    }

    /// Flat `k * units + u` layout.
    pub fn flatten(&self) -> Vec<f64> {
        self.alpha.iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64], prior: Vec<f64>) -> Self {
        let k = prior.len();
        let units = if k == 0 { 0 } else { flat.len() / k };
        LayerCoefficients {
            alpha: flat.chunks(units.max(1)).map(<[f64]>::to_vec).collect(),
            prior,
        }
    }

    pub fn layout(&self) -> CoefficientLayout {
        let (k, units) = (self.experts(), self.units());
        let segments = (0..units)
            .map(|u| {
                (0..k)
                    .map(|e| UnitSegment {
                        expert: e,
                        range: None,
                        coefficient: Coefficient::Trainable(e * units + u),
                    })
                    .collect()
            })
            .collect();
        let anchors = (0..k).flat_map(|e| vec![self.prior[e]; units]).collect();
        CoefficientLayout {
            segments,
            anchors,
            reg_scale: 1.0 / (k * units).max(1) as f64,
        }
    }
}

/// A segment description independent of tensor sizes; `range: None` covers the unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitSegment {
    pub expert: usize,
    pub range: Option<(usize, usize)>,
    pub coefficient: Coefficient,
}

/// How a flat trainable vector maps onto merged parameters and the regularizer.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientLayout {
    /// Per unit, the segments applied in order.
    pub segments: Vec<Vec<UnitSegment>>,
    /// Regularizer anchor for each trainable entry.
    pub anchors: Vec<f64>,
    /// Multiplier applied to the summed absolute deviations.
    pub reg_scale: f64,
}

impl CoefficientLayout {
    pub fn trainable(&self) -> usize {
        self.anchors.len()
    }

    fn unit_segments(&self, u: usize, numel: usize) -> Vec<Segment> {
        self.segments[u]
            .iter()
            .map(|s| {
                let (start, end) = s.range.unwrap_or((0, numel));
                Segment {
                    expert: s.expert,
                    start,
                    end,
                    coefficient: s.coefficient,
                }
            })
            .collect()
    }

    /// Merged parameters for the given trainable values.
    pub fn apply(
        &self,
        base: &ModelParams,
        tvs: &[TaskVector],
        values: &[f64],
    ) -> Result<ModelParams, MergeError> {
        check_schema(base, tvs)?;
        if self.segments.len() != base.tensors().len() {
            return Err(MergeError::CoefficientCount {
                expected: base.tensors().len(),
                got: self.segments.len(),
            });
        }
        if values.len() != self.trainable() {
            return Err(MergeError::CoefficientCount {
                expected: self.trainable(),
                got: values.len(),
            });
        }
        let mut tensors = Vec::with_capacity(base.tensors().len());
        for (u, b) in base.tensors().iter().enumerate() {
            let deltas: Vec<&Tensor> = tvs.iter().map(|tv| &tv.deltas()[u]).collect();
            let segs = self.unit_segments(u, b.numel());
            let mut out = b.clone();
            crate::autodiff::apply_segments(out.data_mut(), &deltas, &segs, |c| match c {
                Coefficient::Fixed(v) => Ok(v),
                Coefficient::Trainable(i) => Ok(values[i]),
            })?;
            tensors.push(out);
        }
        Ok(ModelParams::from_tensors(*base.config(), tensors)?)
    }
}

/// `base + sum_k alpha[k][u] * tau_k[u]` for every unit `u`.
pub fn apply_coefficients(
    base: &ModelParams,
    tvs: &[TaskVector],
    coeffs: &LayerCoefficients,
) -> Result<ModelParams, MergeError> {
    if coeffs.experts() != tvs.len() {
        return Err(MergeError::CoefficientCount {
            expected: tvs.len(),
            got: coeffs.experts(),
        });
    }
    if coeffs.units() != base.config().unit_count()
        || coeffs.alpha.iter().any(|a| a.len() != coeffs.units())
    {
        return Err(MergeError::CoefficientCount {
            expected: base.config().unit_count(),
            got: coeffs.units(),
        });
    }
    coeffs.layout().apply(base, tvs, &coeffs.flatten())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignConfig {
    pub temperature: f64,
    /// Blocks whose output hidden states are aligned.
    pub hidden_layers: Vec<usize>,
    /// One nonnegative weight per task; empty means all ones.
    pub task_weights: Vec<f64>,
    pub gamma: f64,
    pub lr: f64,
    pub steps: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub use_hidden: bool,
    pub use_logit: bool,
    pub use_regularizer: bool,
    /// Coefficient snapshots are logged every this many steps (0 disables).
    pub snapshot_interval: usize,
}

impl AlignConfig {
    /// Reference settings for a model with `n_blocks` blocks.
    pub fn for_blocks(n_blocks: usize) -> Self {
        AlignConfig {
            temperature: 1.0,
            hidden_layers: vec![n_blocks / 2],
            task_weights: Vec::new(),
            gamma: 0.8,
            lr: 1e-2,
            steps: 200,
            schedule: Schedule::Cosine,
            seed: 0,
            use_hidden: true,
            use_logit: true,
            use_regularizer: true,
            snapshot_interval: 50,
        }
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.task_weights.get(k).copied().unwrap_or(1.0)
    }

    fn validate(&self, n_blocks: usize, experts: usize) -> Result<(), AlignError> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(AlignError::InvalidConfig("temperature must be positive"));
        }
        if self.hidden_layers.iter().any(|&l| l >= n_blocks) {
            return Err(AlignError::InvalidConfig("hidden layer index out of range"));
        }
        if !self.task_weights.is_empty() && self.task_weights.len() != experts {
            return Err(AlignError::InvalidConfig(
                "one task weight per expert required",
            ));
        }
        if self
            .task_weights
            .iter()
            .any(|&b| !(b >= 0.0) || !b.is_finite())
        {
            return Err(AlignError::InvalidConfig(
                "task weights must be nonnegative",
            ));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(AlignError::InvalidConfig("gamma must be nonnegative"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(AlignError::InvalidConfig("learning rate must be positive"));
        }
        if !self.use_hidden && !self.use_logit {
            return Err(AlignError::InvalidConfig(
                "at least one alignment term is required",
            ));
        }
        Ok(())
    }
}

/// Expert hidden states (at the supervised blocks) and logits per calibration input.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertTargets {
    pub hidden_layers: Vec<usize>,
    /// `samples[k][i]` for task `k`, input `i`.
    pub samples: Vec<Vec<SampleTarget>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleTarget {
    pub hidden: Vec<Tensor>,
    pub logits: Tensor,
}

impl ExpertTargets {
    pub fn compute(
        experts: &[ModelParams],
        calib: &CalibrationSet,
        hidden_layers: &[usize],
    ) -> Result<Self, AlignError> {
        if experts.len() != calib.tasks.len() {
            return Err(AlignError::ExpertCount {
                task_vectors: experts.len(),
                other: calib.tasks.len(),
                what: "calibration tasks",
            });
        }
        let mut samples = Vec::with_capacity(experts.len());
        for (expert, inputs) in experts.iter().zip(&calib.tasks) {
            if inputs.is_empty() {
                return Err(AlignError::EmptyCalibration);
            }
            let mut per_task = Vec::with_capacity(inputs.len());
            for tokens in inputs {
                let trace = forward(expert, tokens)?;
                per_task.push(SampleTarget {
                    hidden: hidden_layers
                        .iter()
                        .map(|&l| trace.hidden_states[l].clone())
                        .collect(),
                    logits: trace.logits,
                });
            }
            samples.push(per_task);
        }
        Ok(ExpertTargets {
            hidden_layers: hidden_layers.to_vec(),
            samples,
        })
    }
}

/// Loss terms of one evaluation; `hidden[k]`/`logit[k]` exclude `beta_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub alignment: f64,
    pub hidden: Vec<f64>,
    pub logit: Vec<f64>,
    pub regularizer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    pub gradient: Vec<f64>,
}

/// Frozen inputs of the alignment objective.
pub struct AlignmentProblem<'a> {
    pub base: &'a ModelParams,
    pub task_vectors: &'a [TaskVector],
    pub calib: &'a CalibrationSet,
    pub targets: ExpertTargets,
    pub cfg: AlignConfig,
}

impl<'a> AlignmentProblem<'a> {
    pub fn new(
        base: &'a ModelParams,
        task_vectors: &'a [TaskVector],
        experts: &[ModelParams],
        calib: &'a CalibrationSet,
        cfg: AlignConfig,
    ) -> Result<Self, AlignError> {
        check_schema(base, task_vectors)?;
        if experts.len() != task_vectors.len() {
            return Err(AlignError::ExpertCount {
                task_vectors: task_vectors.len(),
                other: experts.len(),
                what: "experts",
            });
        }
        if calib.tasks.len() != task_vectors.len() {
            return Err(AlignError::ExpertCount {
                task_vectors: task_vectors.len(),
                other: calib.tasks.len(),
                what: "calibration tasks",
            });
        }
        if calib.tasks.iter().any(Vec::is_empty) {
            return Err(AlignError::EmptyCalibration);
        }
        cfg.validate(base.config().n_blocks, task_vectors.len())?;
        let targets = ExpertTargets::compute(experts, calib, &cfg.hidden_layers)?;
        Ok(AlignmentProblem {
            base,
            task_vectors,
            calib,
            targets,
            cfg,
        })
    }

    pub fn experts(&self) -> usize {
        self.task_vectors.len()
    }

    /// Loss and gradient with respect to the trainable entries of `layout`.
    pub fn evaluate(
        &self,
        layout: &CoefficientLayout,
        values: &[f64],
        include_regularizer: bool,
    ) -> Result<Evaluation, AlignError> {
        if values.len() != layout.trainable() || layout.segments.len() != self.base.tensors().len()
        {
            return Err(AlignError::Merge(MergeError::CoefficientCount {
                expected: layout.trainable(),
                got: values.len(),
            }));
        }
        let cfg = &self.cfg;
        let mut tape = Tape::new();
        let coeffs = tape.leaf(Tensor::from_vec(values.to_vec()));
        let mut merged: Vec<Var> = Vec::with_capacity(self.base.tensors().len());
        for (u, b) in self.base.tensors().iter().enumerate() {
            let deltas: Vec<&Tensor> = self.task_vectors.iter().map(|tv| &tv.deltas()[u]).collect();
            let segs = layout.unit_segments(u, b.numel());
            merged.push(tape.merge(b, deltas, Some(coeffs), segs)?);
        }

        let k_count = self.experts();
        let mut hidden = vec![0.0; k_count];
        let mut logit = vec![0.0; k_count];
        let mut task_terms = Vec::with_capacity(k_count);
        for k in 0..k_count {
            let inputs = &self.calib.tasks[k];
            let n = inputs.len() as f64;
            let mut hid_terms = Vec::new();
            let mut logit_terms = Vec::new();
            for (tokens, target) in inputs.iter().zip(&self.targets.samples[k]) {
                let trace = forward_on_tape(&mut tape, self.base.config(), &merged, tokens)?;
                if cfg.use_hidden {
                    for (&l, h) in self.targets.hidden_layers.iter().zip(&target.hidden) {
                        hid_terms.push(tape.sq_l2_distance(trace.hidden_states[l], h)?);
                    }
                }
                if cfg.use_logit {
                    logit_terms.push(tape.softmax_kl(
                        &target.logits,
                        trace.logits,
                        cfg.temperature,
                    )?);
                }
            }
            let mut parts = Vec::new();
            if cfg.use_hidden {
                let s = tape.sum(&hid_terms)?;
                let s = tape.scale(s, 1.0 / (n * self.base.config().d_model as f64))?;
                hidden[k] = tape.scalar_value(s);
                parts.push(s);
            }
            if cfg.use_logit {
                let s = tape.sum(&logit_terms)?;
                let s = tape.scale(s, 1.0 / n)?;
                logit[k] = tape.scalar_value(s);
                parts.push(s);
            }
            let both = tape.sum(&parts)?;
            task_terms.push(tape.scale(both, cfg.beta(k))?);
        }
        let alignment = tape.sum(&task_terms)?;
        let alignment_value = tape.scalar_value(alignment);
        let use_reg = include_regularizer && cfg.use_regularizer;
        let (total, regularizer) = if use_reg {
            let r = tape.abs_deviation(coeffs, &layout.anchors, layout.reg_scale)?;
            let reg_value = tape.scalar_value(r);
            let weighted = tape.scale(r, cfg.gamma)?;
            (tape.add(alignment, weighted)?, reg_value)
        } else {
            (alignment, 0.0)
        };
        let out = tape.differentiate(total)?;
        let gradient = out
            .gradients
            .get(coeffs)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; values.len()]);
        Ok(Evaluation {
            loss: LossBreakdown {
                total: out.value,
                alignment: alignment_value,
                hidden,
                logit,
                regularizer,
            },
            gradient,
        })
    }

    /// Adam on the trainable entries of `layout`, starting from `init`.
    pub fn optimize(
        &self,
        layout: &CoefficientLayout,
        init: &[f64],
    ) -> Result<(Vec<f64>, TrainLog), AlignError> {
        if init.iter().any(|x| !x.is_finite()) {
            return Err(AlignError::InvalidConfig(
                "initial coefficients must be finite",
            ));
        }
        let cfg = &self.cfg;
        let adam_cfg = AdamConfig {
            lr: cfg.lr,
            schedule: cfg.schedule,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(adam_cfg, init.len());
        let mut values = init.to_vec();
        let mut log = TrainLog {
            records: Vec::with_capacity(cfg.steps),
            final_record: StepRecord::default(),
            snapshot_interval: cfg.snapshot_interval,
            snapshots: Vec::new(),
        };
        for step in 0..cfg.steps {
            if cfg.snapshot_interval > 0 && step % cfg.snapshot_interval == 0 {
                log.snapshots.push((step, values.clone()));
            }
            let eval = self
                .evaluate(layout, &values, true)
                .map_err(|e| non_finite_at(e, step))?;
            check_terms(&eval.loss, step)?;
            log.records.push(StepRecord::from(&eval.loss));
            opt.step(&mut values, &eval.gradient, adam_cfg.rate(step, cfg.steps));
            if values.iter().any(|x| !x.is_finite()) {
                return Err(AlignError::NonFinite {
                    step,
                    term: "coefficients",
                });
            }
        }
        let last = self
            .evaluate(layout, &values, true)
            .map_err(|e| non_finite_at(e, cfg.steps))?;
        check_terms(&last.loss, cfg.steps)?;
        log.final_record = StepRecord::from(&last.loss);
        log.snapshots.push((cfg.steps, values.clone()));
        Ok((values, log))
    }
}

fn non_finite_at(e: AlignError, step: usize) -> AlignError {
    match e {
        AlignError::Model(ModelError::Tensor(TensorError::NonFinite { op })) => {
            AlignError::NonFinite { step, term: op }
        }
        other => other,
    }
}

fn check_terms(loss: &LossBreakdown, step: usize) -> Result<(), AlignError> {
    if loss.hidden.iter().any(|x| !x.is_finite()) {
        return Err(AlignError::NonFinite {
            step,
            term: "hidden loss",
        });
    }
    if loss.logit.iter().any(|x| !x.is_finite()) {
        return Err(AlignError::NonFinite {
            step,
            term: "logit loss",
        });
    }
    if !loss.regularizer.is_finite() {
        return Err(AlignError::NonFinite {
            step,
            term: "regularizer",
        });
    }
    if !loss.total.is_finite() {
        return Err(AlignError::NonFinite {
            step,
            term: "total loss",
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepRecord {
    pub total: f64,
    pub hidden: Vec<f64>,
    pub logit: Vec<f64>,
    pub regularizer: f64,
}

impl From<&LossBreakdown> for StepRecord {
    fn from(l: &LossBreakdown) -> Self {
        StepRecord {
            total: l.total,
            hidden: l.hidden.clone(),
            logit: l.logit.clone(),
            regularizer: l.regularizer,
        }
    }
}

/// Per-step losses (evaluated before each update) plus the final state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub final_record: StepRecord,
    pub snapshot_interval: usize,
    /// `(step, flat coefficients)`; always ends with the final coefficients.
    pub snapshots: Vec<(usize, Vec<f64>)>,
}

impl TrainLog {
    /// Objective at the starting point.
    pub fn initial_total(&self) -> f64 {
        self.records
            .first()
            .map_or(self.final_record.total, |r| r.total)
    }
}

/// Objective value and coefficient gradient for layer-wise coefficients.
pub fn alignment_loss(
    coeffs: &LayerCoefficients,
    base: &ModelParams,
    tvs: &[TaskVector],
    experts: &[ModelParams],
    calib: &CalibrationSet,
    cfg: &AlignConfig,
) -> Result<Evaluation, AlignError> {
    let problem = AlignmentProblem::new(base, tvs, experts, calib, cfg.clone())?;
    check_layer_shape(coeffs, &problem)?;
    problem.evaluate(&coeffs.layout(), &coeffs.flatten(), true)
}

fn check_layer_shape(
    coeffs: &LayerCoefficients,
    p: &AlignmentProblem<'_>,
) -> Result<(), AlignError> {
    if coeffs.experts() != p.experts() || coeffs.prior.len() != p.experts() {
        return Err(AlignError::ExpertCount {
            task_vectors: p.experts(),
            other: coeffs.experts(),
            what: "coefficient rows",
        });
    }
    let units = p.base.config().unit_count();
    if coeffs.alpha.iter().any(|a| a.len() != units) {
        return Err(AlignError::Merge(MergeError::CoefficientCount {
            expected: units,
            got: coeffs.units(),
        }));
    }
    Ok(())
}

/// Learns layer-wise coefficients starting from `init`.
pub fn fit(
    base: &ModelParams,
    tvs: &[TaskVector],
    experts: &[ModelParams],
    calib: &CalibrationSet,
    cfg: &AlignConfig,
    init: &LayerCoefficients,
) -> Result<(LayerCoefficients, TrainLog), AlignError> {
    let problem = AlignmentProblem::new(base, tvs, experts, calib, cfg.clone())?;
    fit_problem(&problem, init)
}

pub fn fit_problem(
    problem: &AlignmentProblem<'_>,
    init: &LayerCoefficients,
) -> Result<(LayerCoefficients, TrainLog), AlignError> {
    check_layer_shape(init, problem)?;
    if !init.is_finite() {
        return Err(AlignError::InvalidConfig(
            "initial coefficients must be finite",
        ));
    }
    let (values, log) = problem.optimize(&init.layout(), &init.flatten())?;
    Ok((
        LayerCoefficients::from_flat(&values, init.prior.clone()),
        log,
    ))
}

/// Result of scanning uniform coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSearch {
    pub coefficients: LayerCoefficients,
    pub best_lambda: f64,
    /// `(lambda, alignment loss)` in grid order.
    pub table: Vec<(f64, f64)>,
}

/// Picks the uniform coefficient from `grid` with the lowest alignment loss
/// (regularizer excluded); ties keep the earliest grid entry.
pub fn ta_grid_init(
    base: &ModelParams,
    tvs: &[TaskVector],
    experts: &[ModelParams],
    calib: &CalibrationSet,
    cfg: &AlignConfig,
    grid: &[f64],
) -> Result<GridSearch, AlignError> {
    let problem = AlignmentProblem::new(base, tvs, experts, calib, cfg.clone())?;
    ta_grid_problem(&problem, grid)
}

pub fn ta_grid_problem(
    problem: &AlignmentProblem<'_>,
    grid: &[f64],
) -> Result<GridSearch, AlignError> {
    if grid.is_empty() {
        return Err(AlignError::InvalidConfig("lambda grid is empty"));
    }
    if grid.iter().any(|l| !l.is_finite()) {
        return Err(AlignError::InvalidConfig("lambda grid must be finite"));
    }
    let units = problem.base.config().unit_count();
    let k = problem.experts();
    let mut table = Vec::with_capacity(grid.len());
    let mut best = (grid[0], f64::INFINITY);
    for &lambda in grid {
        let c = LayerCoefficients::constant(&vec![lambda; k], units);
        let loss = problem
            .evaluate(&c.layout(), &c.flatten(), false)?
            .loss
            .alignment;
        table.push((lambda, loss));
        if loss < best.1 {
            best = (lambda, loss);
        }
    }
    Ok(GridSearch {
        coefficients: LayerCoefficients::constant(&vec![best.0; k], units),
        best_lambda: best.0,
        table,
    })
}

/// Short human-readable label for a set of hidden layers, e.g. `"2"` or `"1,3"`.
pub fn hidden_layers_label(layers: &[usize]) -> String {
    let mut s = String::new();
    for (i, l) in layers.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&alloc::format!("{l}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::relative_error;
    use crate::baselines::{merge_task_arithmetic, TAConfig};
    use crate::model::ModelConfig;
    use crate::task_vector::compute_task_vector;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            d_model: 8,
            n_heads: 2,
            n_blocks: 2,
            d_mlp: 12,
            max_seq_len: 8,
        }
    }

    fn perturbed(base: &ModelParams, seed: u64, scale: f64) -> ModelParams {
        let mut p = base.clone();
        for (u, t) in p.tensors_mut().iter_mut().enumerate() {
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                *x += scale * libm::sin(seed as f64 * 7.13 + i as f64 * 0.37 + u as f64 * 1.31);
            }
        }
        p
    }

    struct Fixture {
        base: ModelParams,
        experts: Vec<ModelParams>,
        tvs: Vec<TaskVector>,
        calib: CalibrationSet,
    }

    fn fixture(k: usize, n: usize) -> Fixture {
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

    fn config(k: usize) -> AlignConfig {
        AlignConfig {
            steps: 30,
            task_weights: vec![1.0; k],
            ..AlignConfig::for_blocks(2)
        }
    }

    fn kl_rows(p_logits: &Tensor, q_logits: &Tensor, t: f64) -> f64 {
        let p = p_logits.scale(1.0 / t).unwrap().softmax_rows();
        let q = q_logits.scale(1.0 / t).unwrap().softmax_rows();
        let mut total = 0.0;
        for r in 0..p.rows() {
            for (a, b) in p.row(r).iter().zip(q.row(r)) {
                if *a > 0.0 {
                    total += a * (a / b).ln();
                }
            }
        }
        total / p.rows() as f64
    }

    #[test]
    fn loss_matches_direct_computation() {
        let f = fixture(2, 3);
        let mut cfg = config(2);
        cfg.temperature = 2.0;
        cfg.task_weights = vec![0.5, 2.0];
        let coeffs = LayerCoefficients {
            alpha: vec![
                vec![0.4; 21],
                (0..21).map(|u| 0.1 * u as f64 / 21.0).collect(),
            ],
            prior: vec![0.3, 0.3],
        };
        let eval = alignment_loss(&coeffs, &f.base, &f.tvs, &f.experts, &f.calib, &cfg).unwrap();

        let merged = apply_coefficients(&f.base, &f.tvs, &coeffs).unwrap();
        let d = tiny().d_model as f64;
        let mut expected = 0.0;
        for k in 0..2 {
            let (mut hid, mut logit) = (0.0, 0.0);
            for tokens in &f.calib.tasks[k] {
                let m = forward(&merged, tokens).unwrap();
                let e = forward(&f.experts[k], tokens).unwrap();
                let (a, b) = (&m.hidden_states[1], &e.hidden_states[1]);
                let sq: f64 = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                hid += sq / (a.rows() as f64 * d);
                logit += 4.0 * kl_rows(&e.logits, &m.logits, 2.0);
            }
            expected += cfg.task_weights[k] * (hid + logit) / 3.0;
        }
        let reg: f64 = coeffs
            .flatten()
            .iter()
            .map(|a| (a - 0.3).abs())
            .sum::<f64>()
            / 42.0;
        expected += cfg.gamma * reg;
        assert!(
            relative_error(eval.loss.total, expected) < 1e-12,
            "{} vs {expected}",
            eval.loss.total
        );
        assert!((eval.loss.regularizer - reg).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let f = fixture(2, 2);
        let cfg = config(2);
        let problem = AlignmentProblem::new(&f.base, &f.tvs, &f.experts, &f.calib, cfg).unwrap();
        let units = tiny().unit_count();
        let c = LayerCoefficients {
            alpha: (0..2)
                .map(|k| {
                    (0..units)
                        .map(|u| 0.2 + 0.03 * (u + 5 * k) as f64)
                        .collect()
                })
                .collect(),
            prior: vec![0.3, 0.3],
        };
        let layout = c.layout();
        let x = c.flatten();
        let g = problem.evaluate(&layout, &x, true).unwrap().gradient;
        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let (mut plus, mut minus) = (x.clone(), x.clone());
            plus[i] += eps;
            minus[i] -= eps;
            let fp = problem.evaluate(&layout, &plus, true).unwrap().loss.total;
            let fm = problem.evaluate(&layout, &minus, true).unwrap().loss.total;
            worst = worst.max(relative_error(g[i], (fp - fm) / (2.0 * eps)));
        }
        assert!(worst <= 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn regularizer_vanishes_at_prior() {
        let f = fixture(2, 2);
        let c = LayerCoefficients::constant(&[0.3, 0.7], tiny().unit_count());
        let e = alignment_loss(&c, &f.base, &f.tvs, &f.experts, &f.calib, &config(2)).unwrap();
        assert_eq!(e.loss.regularizer, 0.0);
        assert_eq!(e.loss.total, e.loss.alignment);
    }

    #[test]
    fn single_expert_with_unit_coefficients_is_the_expert() {
        let f = fixture(1, 1);
        let c = LayerCoefficients::constant(&[1.0], tiny().unit_count());
        let merged = apply_coefficients(&f.base, &f.tvs, &c).unwrap();
        let tokens = [12, 4, 10, 5, 11];
        let a = forward(&merged, &tokens).unwrap().logits;
        let b = forward(&f.experts[0], &tokens).unwrap().logits;
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_coefficients_give_the_base_and_constants_give_ta() {
        let f = fixture(3, 1);
        let units = tiny().unit_count();
        let zero = apply_coefficients(
            &f.base,
            &f.tvs,
            &LayerCoefficients::constant(&[0.0; 3], units),
        )
        .unwrap();
        assert_eq!(zero, f.base);
        let lambdas = [0.3, -0.5, 1.25];
        let ours = apply_coefficients(
            &f.base,
            &f.tvs,
            &LayerCoefficients::constant(&lambdas, units),
        )
        .unwrap();
        let ta = merge_task_arithmetic(
            &f.base,
            &f.tvs,
            &TAConfig {
                lambdas: lambdas.to_vec(),
            },
        )
        .unwrap();
        assert_eq!(ours, ta);
    }

    #[test]
    fn fit_descends_and_strong_regularizer_pins_prior() {
        let f = fixture(2, 2);
        let units = tiny().unit_count();
        let init = LayerCoefficients::constant(&[0.3, 0.3], units);
        let (_, log) = fit(&f.base, &f.tvs, &f.experts, &f.calib, &config(2), &init).unwrap();
        assert!(log.final_record.total <= log.initial_total());
        assert_eq!(log.records.len(), 30);
        assert_eq!(log.snapshots.last().unwrap().0, 30);

        let cfg = AlignConfig {
            gamma: 1e6,
            steps: 200,
            ..config(2)
        };
        let (fitted, _) = fit(&f.base, &f.tvs, &f.experts, &f.calib, &cfg, &init).unwrap();
        for a in fitted.alpha.iter().flatten() {
            assert!((a - 0.3).abs() <= 1e-3, "{a}");
        }
    }

    #[test]
    fn grid_picks_lowest_alignment_loss() {
        let f = fixture(2, 2);
        let problem =
            AlignmentProblem::new(&f.base, &f.tvs, &f.experts, &f.calib, config(2)).unwrap();
        let g = ta_grid_problem(&problem, &[0.0, 0.5, 1.0]).unwrap();
        let best = g.table.iter().fold(f64::INFINITY, |m, (_, v)| m.min(*v));
        let (l, v) = g.table.iter().find(|(_, v)| *v == best).unwrap();
        assert_eq!(g.best_lambda, *l);
        assert_eq!(*v, best);
        assert!(g
            .coefficients
            .alpha
            .iter()
            .flatten()
            .all(|a| *a == g.best_lambda));
        assert!(ta_grid_problem(&problem, &[]).is_err());
    }

    #[test]
    fn flat_round_trip_and_config_checks() {
        let c = LayerCoefficients {
            alpha: vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            prior: vec![0.1, 0.2],
        };
        assert_eq!(
            LayerCoefficients::from_flat(&c.flatten(), c.prior.clone()),
            c
        );
        let layout = c.layout();
        assert_eq!(layout.anchors, vec![0.1, 0.1, 0.2, 0.2]);
        assert_eq!(layout.reg_scale, 0.25);
        let f = fixture(2, 1);
        let bad = AlignConfig {
            hidden_layers: vec![5],
            ..config(2)
        };
        assert!(AlignmentProblem::new(&f.base, &f.tvs, &f.experts, &f.calib, bad).is_err());
        let empty = CalibrationSet {
            tasks: vec![vec![], vec![]],
        };
        assert!(matches!(
            AlignmentProblem::new(&f.base, &f.tvs, &f.experts, &empty, config(2)),
            Err(AlignError::EmptyCalibration)
        ));
    }
}
