//! Synthetic tasks, training of base/expert/mixture models, and exact-match
//! evaluation.
//!
//! Token map: `0..=9` digits, `10` plus, `11` equals, `12` BOS, `13` reversal
//! marker, `14` parity marker, `15` odd, `16` even, `17..=24` letters `a..h`,
//! `25..=31` filler used only by base pretraining noise.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::model::{forward_on_tape, logits, ModelConfig, ModelError, ModelParams};
use crate::optim::{Adam, AdamConfig, Schedule};
use crate::tensor::{argmax, Tensor};

pub const PLUS: usize = 10;
pub const EQUALS: usize = 11;
pub const BOS: usize = 12;
pub const REV: usize = 13;
pub const PAR: usize = 14;
pub const ODD: usize = 15;
pub const EVEN: usize = 16;
pub const LETTER_A: usize = 17;
pub const FILLER: usize = 25;
/// Smallest vocabulary that covers every token above.
pub const MIN_VOCAB: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum TaskError {
    InvalidSpec(&'static str),
    PromptOverflow {
        len: usize,
        max: usize,
    },
    EmptyCorpus,
    /// Training loss became non-finite.
    Diverged {
        step: usize,
    },
    Threshold {
        task: String,
        accuracy: f64,
        threshold: f64,
    },
    Model(ModelError),
}

impl fmt::Display for TaskError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskError::InvalidSpec(m) => write!(f, "invalid task spec: {m}"),
            TaskError::PromptOverflow { len, max } => {
                write!(
                    f,
                    "example of length {len} exceeds max sequence length {max}"
                )
            }
            TaskError::EmptyCorpus => write!(f, "no tasks given"),
            TaskError::Diverged { step } => write!(f, "training loss non-finite at step {step}"),
            TaskError::Threshold {
                task,
                accuracy,
                threshold,
            } => write!(
                f,
                "expert for {task} reached accuracy {accuracy:.4} below threshold {threshold}"
            ),
            TaskError::Model(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TaskError {}

impl From<ModelError> for TaskError {
    fn from(e: ModelError) -> Self {
        TaskError::Model(e)
    }
}

impl From<crate::tensor::TensorError> for TaskError {
    fn from(e: crate::tensor::TensorError) -> Self {
        TaskError::Model(ModelError::Tensor(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskKind {
    /// `a + b mod modulus`, single answer digit.
    ModAdd { modulus: usize },
    /// Reverse a string of `len` letters drawn from the first `alphabet` letters.
    Reverse { len: usize, alphabet: usize },
    /// Odd/even count of ones in `width` bits.
    Parity { width: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

impl TaskSpec {
    pub fn mod_add(modulus: usize) -> Self {
        TaskSpec {
            name: String::from("modadd"),
            kind: TaskKind::ModAdd { modulus },
        }
    }

    pub fn reverse(len: usize, alphabet: usize) -> Self {
        TaskSpec {
            name: String::from("reverse"),
            kind: TaskKind::Reverse { len, alphabet },
        }
    }

    pub fn parity(width: usize) -> Self {
        TaskSpec {
            name: String::from("parity"),
            kind: TaskKind::Parity { width },
        }
    }

    /// Modular addition (m = 7), reversal of 3 letters from 4, parity of 4 bits.
    pub fn default_suite() -> Vec<TaskSpec> {
        vec![
            TaskSpec::mod_add(7),
            TaskSpec::reverse(3, 4),
            TaskSpec::parity(4),
        ]
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        match self.kind {
            TaskKind::ModAdd { modulus } if !(2..=10).contains(&modulus) => {
                Err(TaskError::InvalidSpec("modulus must be in 2..=10"))
            }
            TaskKind::Reverse { len, alphabet } if len == 0 || !(1..=8).contains(&alphabet) => Err(
                TaskError::InvalidSpec("reversal needs len >= 1 and alphabet in 1..=8"),
            ),
            TaskKind::Parity { width } if width == 0 => {
                Err(TaskError::InvalidSpec("parity width must be positive"))
            }
            _ => Ok(()),
        }
    }

    pub fn prompt_len(&self) -> usize {
        match self.kind {
            TaskKind::ModAdd { .. } => 5,
            TaskKind::Reverse { len, .. } => len + 3,
            TaskKind::Parity { width } => width + 3,
        }
    }

    pub fn answer_len(&self) -> usize {
        match self.kind {
            TaskKind::Reverse { len, .. } => len,
            _ => 1,
        }
    }

    /// Sequence length seen in training: prompt plus all but the last answer token.
    pub fn train_len(&self) -> usize {
        self.prompt_len() + self.answer_len() - 1
    }

    pub fn check_fits(&self, max_seq_len: usize) -> Result<(), TaskError> {
        self.validate()?;
        let len = self.train_len();
        if len > max_seq_len {
            return Err(TaskError::PromptOverflow {
                len,
                max: max_seq_len,
            });
        }
        Ok(())
    }

    /// Answer for the given operands (task-specific meaning).
    fn solve(&self, input: &[usize]) -> Vec<usize> {
        match self.kind {
            TaskKind::ModAdd { modulus } => vec![(input[0] + input[1]) % modulus],
            TaskKind::Reverse { .. } => input.iter().rev().copied().collect(),
            TaskKind::Parity { .. } => {
                let ones = input.iter().filter(|&&b| b == 1).count();
                vec![if ones % 2 == 1 { ODD } else { EVEN }]
            }
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Example {
        match self.kind {
            TaskKind::ModAdd { modulus } => {
                let a = rng.random_range(0..modulus);
                let b = rng.random_range(0..modulus);
                Example {
                    prompt: vec![BOS, a, PLUS, b, EQUALS],
                    answer: self.solve(&[a, b]),
                }
            }
            TaskKind::Reverse { len, alphabet } => {
                let s: Vec<usize> = (0..len)
                    .map(|_| LETTER_A + rng.random_range(0..alphabet))
                    .collect();
                let mut prompt = vec![BOS, REV];
                prompt.extend(&s);
                prompt.push(EQUALS);
                Example {
                    prompt,
                    answer: self.solve(&s),
                }
            }
            TaskKind::Parity { width } => {
                let bits: Vec<usize> = (0..width).map(|_| rng.random_range(0..2)).collect();
                let mut prompt = vec![BOS, PAR];
                prompt.extend(&bits);
                prompt.push(EQUALS);
                Example {
                    prompt,
                    answer: self.solve(&bits),
                }
            }
        }
    }
}

/// Derives an independent stream seed from a base seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for b in label.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    splitmix(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn task_rng(spec: &TaskSpec, seed: u64, purpose: &str) -> ChaCha8Rng {
    let mut label = String::from(purpose);
    label.push('/');
    label.push_str(&spec.name);
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &label))
}

/// `n` reproducible labeled examples.
pub fn gen_dataset(spec: &TaskSpec, n: usize, seed: u64) -> Result<Vec<Example>, TaskError> {
    spec.validate()?;
    if n == 0 {
        return Err(TaskError::InvalidSpec("dataset size must be positive"));
    }
    let mut rng = task_rng(spec, seed, "data");
    Ok((0..n).map(|_| spec.sample(&mut rng)).collect())
}

/// Unlabeled prompts per task, in task order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibrationSet {
    pub tasks: Vec<Vec<Vec<usize>>>,
}

impl CalibrationSet {
    /// `n` prompts (without answers) per task.
    pub fn generate(specs: &[TaskSpec], n: usize, seed: u64) -> Result<Self, TaskError> {
        if specs.is_empty() {
            return Err(TaskError::EmptyCorpus);
        }
        if n == 0 {
            return Err(TaskError::InvalidSpec("calibration size must be positive"));
        }
        let mut tasks = Vec::with_capacity(specs.len());
        for spec in specs {
            spec.validate()?;
            let mut rng = task_rng(spec, seed, "calibration");
            tasks.push((0..n).map(|_| spec.sample(&mut rng).prompt).collect());
        }
        Ok(CalibrationSet { tasks })
    }

    pub fn samples_per_task(&self) -> Vec<usize> {
        self.tasks.iter().map(Vec::len).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn base_default() -> Self {
        TrainConfig {
            steps: 500,
            batch: 16,
            lr: 3e-3,
            seed: 0,
        }
    }

    pub fn expert_default() -> Self {
        TrainConfig {
            steps: 1500,
            batch: 16,
            lr: 1e-3,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<(), TaskError> {
        if self.batch == 0 {
            return Err(TaskError::InvalidSpec("batch must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TaskError::InvalidSpec("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Tokens plus the per-position next-token target (`None` = no loss).
pub type TrainSequence = (Vec<usize>, Vec<Option<usize>>);

/// Mean loss per step, recorded before each update.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainCurve {
    pub losses: Vec<f64>,
}

/// Supervised sequence for one labeled example, loss on answer tokens only.
pub fn answer_sequence(ex: &Example) -> TrainSequence {
    let mut tokens = ex.prompt.clone();
    tokens.extend(&ex.answer[..ex.answer.len() - 1]);
    let mut targets = vec![None; tokens.len()];
    for (j, &a) in ex.answer.iter().enumerate() {
        targets[ex.prompt.len() - 1 + j] = Some(a);
    }
    (tokens, targets)
}

/// Next-token targets at every position.
pub fn lm_sequence(tokens: Vec<usize>) -> TrainSequence {
    let mut targets: Vec<Option<usize>> = tokens[1..].iter().map(|&t| Some(t)).collect();
    targets.push(None);
    (tokens, targets)
}

/// Mean batch loss and its gradient per unit.
pub fn batch_loss_grad(
    params: &ModelParams,
    batch: &[TrainSequence],
) -> Result<(f64, Vec<Tensor>), TaskError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .tensors()
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect();
    let mut terms = Vec::with_capacity(batch.len());
    for (tokens, targets) in batch {
        let trace = forward_on_tape(&mut tape, params.config(), &vars, tokens)?;
        terms.push(tape.cross_entropy(trace.logits, targets)?);
    }
    let total = tape.sum(&terms)?;
    let mean = tape.scale(total, 1.0 / batch.len() as f64)?;
    let out = tape.differentiate(mean)?;
    let grads = vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| {
            out.gradients
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    Ok((out.value, grads))
}

/// Adam over all weights with cosine decay; `make_batch` draws each step's data.
pub fn train_loop<F>(
    init: &ModelParams,
    cfg: &TrainConfig,
    mut make_batch: F,
) -> Result<(ModelParams, TrainCurve), TaskError>
where
    F: FnMut(&mut ChaCha8Rng) -> Vec<TrainSequence>,
{
    cfg.validate()?;
    let mut params = init.clone();
    let sizes: Vec<usize> = params.tensors().iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        schedule: Schedule::Cosine,
        ..AdamConfig::default()
    };
    let mut opt = Adam::new(adam_cfg, total);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train"));
    let mut flat: Vec<f64> = params
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = make_batch(&mut rng);
        let (loss, grads) = batch_loss_grad(&params, &batch).map_err(|e| match e {
            TaskError::Model(ModelError::Tensor(_)) => TaskError::Diverged { step },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(TaskError::Diverged { step });
        }
        losses.push(loss);
        let g: Vec<f64> = grads
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        opt.step(&mut flat, &g, adam_cfg.rate(step, cfg.steps));
        if flat.iter().any(|x| !x.is_finite()) {
            return Err(TaskError::Diverged { step });
        }
        let mut offset = 0;
        for (t, &n) in params.tensors_mut().iter_mut().zip(&sizes) {
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }
    Ok((params, TrainCurve { losses }))
}

fn random_sequence(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = rng.random_range(4..=config.max_seq_len.clamp(4, 12));
    let mut tokens = vec![BOS];
    tokens.extend((1..len).map(|_| rng.random_range(0..config.vocab_size)));
    tokens
}

fn check_suite(config: &ModelConfig, specs: &[TaskSpec]) -> Result<(), TaskError> {
    config.validate()?;
    if specs.is_empty() {
        return Err(TaskError::EmptyCorpus);
    }
    if config.vocab_size < MIN_VOCAB {
        return Err(TaskError::InvalidSpec(
            "vocabulary smaller than the task token map",
        ));
    }
    for s in specs {
        s.check_fits(config.max_seq_len)?;
    }
    Ok(())
}

/// Language-model pretraining on task prompts (never answers) mixed with
/// random token sequences.
pub fn train_base(
    config: ModelConfig,
    specs: &[TaskSpec],
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<(ModelParams, TrainCurve), TaskError> {
    check_suite(&config, specs)?;
    let init = ModelParams::init(config, init_seed)?;
    train_loop(&init, cfg, |rng| {
        (0..cfg.batch)
            .map(|i| {
                if i % 4 == 3 {
                    lm_sequence(random_sequence(&config, rng))
                } else {
                    let spec = &specs[rng.random_range(0..specs.len())];
                    lm_sequence(spec.sample(rng).prompt)
                }
            })
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertConfig {
    pub train: TrainConfig,
    /// Minimum own-task accuracy; training fails below it.
    pub threshold: f64,
    pub eval_samples: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            train: TrainConfig::expert_default(),
            threshold: 0.9,
            eval_samples: 200,
        }
    }
}

/// Fine-tunes all weights on one task (loss on answer tokens only).
pub fn train_expert(
    base: &ModelParams,
    spec: &TaskSpec,
    cfg: &ExpertConfig,
) -> Result<(ModelParams, TrainCurve, f64), TaskError> {
    train_supervised(base, core::slice::from_ref(spec), cfg)
}

/// Fine-tunes on the union of all tasks; the threshold applies to the macro average.
pub fn train_mixture(
    base: &ModelParams,
    specs: &[TaskSpec],
    cfg: &ExpertConfig,
) -> Result<(ModelParams, TrainCurve, f64), TaskError> {
    train_supervised(base, specs, cfg)
}

fn train_supervised(
    base: &ModelParams,
    specs: &[TaskSpec],
    cfg: &ExpertConfig,
) -> Result<(ModelParams, TrainCurve, f64), TaskError> {
    check_suite(base.config(), specs)?;
    let (params, curve) = train_loop(base, &cfg.train, |rng| {
        (0..cfg.train.batch)
            .map(|_| {
                let spec = &specs[rng.random_range(0..specs.len())];
                answer_sequence(&spec.sample(rng))
            })
            .collect()
    })?;
    let eval = evaluate(&params, specs, cfg.eval_samples, cfg.train.seed)?;
    if eval.macro_avg < cfg.threshold {
        let mut task = String::new();
        for (i, s) in specs.iter().enumerate() {
            if i > 0 {
                task.push('+');
            }
            task.push_str(&s.name);
        }
        return Err(TaskError::Threshold {
            task,
            accuracy: eval.macro_avg,
            threshold: cfg.threshold,
        });
    }
    Ok((params, curve, eval.macro_avg))
}

/// Greedy decoding of `n` answer tokens after `prompt`.
pub fn greedy_decode(
    params: &ModelParams,
    prompt: &[usize],
    n: usize,
) -> Result<Vec<usize>, TaskError> {
    let mut tokens = prompt.to_vec();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let z = logits(params, &tokens)?;
        let next = argmax(z.row(z.rows() - 1));
        out.push(next);
        tokens.push(next);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskAccuracy {
    pub task: String,
    pub accuracy: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub tasks: Vec<TaskAccuracy>,
    pub macro_avg: f64,
}

impl EvalResult {
    pub fn from_tasks(tasks: Vec<TaskAccuracy>) -> Self {
        let macro_avg = if tasks.is_empty() {
            0.0
        } else {
            tasks.iter().map(|t| t.accuracy).sum::<f64>() / tasks.len() as f64
        };
        EvalResult { tasks, macro_avg }
    }

    pub fn accuracy(&self, task: &str) -> Option<f64> {
        self.tasks
            .iter()
            .find(|t| t.task == task)
            .map(|t| t.accuracy)
    }
}

/// Exact-match accuracy on `n` fresh examples per task.
pub fn evaluate(
    params: &ModelParams,
    specs: &[TaskSpec],
    n: usize,
    seed: u64,
) -> Result<EvalResult, TaskError> {
    if specs.is_empty() {
        return Err(TaskError::EmptyCorpus);
    }
    let mut tasks = Vec::with_capacity(specs.len());
    for spec in specs {
        spec.check_fits(params.config().max_seq_len)?;
        let mut rng = task_rng(spec, seed, "eval");
        let mut correct = 0;
        for _ in 0..n {
            let ex = spec.sample(&mut rng);
            if greedy_decode(params, &ex.prompt, ex.answer.len())? == ex.answer {
                correct += 1;
            }
        }
        tasks.push(TaskAccuracy {
            task: spec.name.clone(),
            accuracy: if n == 0 {
                0.0
            } else {
                correct as f64 / n as f64
            },
            samples: n,
        });
    }
    Ok(EvalResult::from_tasks(tasks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_match_definitions() {
        let add = TaskSpec::mod_add(7);
        assert_eq!(add.solve(&[3, 5]), vec![1]);
        let rev = TaskSpec::reverse(3, 3);
        let abc = [LETTER_A, LETTER_A + 1, LETTER_A + 2];
        assert_eq!(rev.solve(&abc), vec![LETTER_A + 2, LETTER_A + 1, LETTER_A]);
        let par = TaskSpec::parity(4);
        assert_eq!(par.solve(&[1, 0, 1, 1]), vec![ODD]);
        assert_eq!(par.solve(&[1, 0, 0, 1]), vec![EVEN]);
    }

    #[test]
    fn datasets_are_reproducible_and_fit() {
        for spec in TaskSpec::default_suite() {
            let a = gen_dataset(&spec, 20, 3).unwrap();
            assert_eq!(a, gen_dataset(&spec, 20, 3).unwrap());
            assert_ne!(a, gen_dataset(&spec, 20, 4).unwrap());
            for ex in &a {
                assert_eq!(ex.prompt.len(), spec.prompt_len());
                assert_eq!(ex.answer, spec.solve(&operands(&spec, &ex.prompt)));
            }
        }
        let long = TaskSpec::reverse(30, 4);
        assert_eq!(
            long.check_fits(24),
            Err(TaskError::PromptOverflow { len: 62, max: 24 })
        );
    }

    fn operands(spec: &TaskSpec, prompt: &[usize]) -> Vec<usize> {
        match spec.kind {
            TaskKind::ModAdd { .. } => vec![prompt[1], prompt[3]],
            _ => prompt[2..prompt.len() - 1].to_vec(),
        }
    }

    #[test]
    fn calibration_has_no_answers() {
        let specs = TaskSpec::default_suite();
        let c = CalibrationSet::generate(&specs, 5, 1).unwrap();
        assert_eq!(c.samples_per_task(), vec![5, 5, 5]);
        for (spec, prompts) in specs.iter().zip(&c.tasks) {
            for p in prompts {
                assert_eq!(p.len(), spec.prompt_len());
                assert_eq!(*p.last().unwrap(), EQUALS);
            }
        }
    }

    #[test]
    fn answer_sequence_targets_answer_only() {
        let ex = Example {
            prompt: vec![BOS, REV, 17, 18, EQUALS],
            answer: vec![18, 17],
        };
        let (tokens, targets) = answer_sequence(&ex);
        assert_eq!(tokens, vec![BOS, REV, 17, 18, EQUALS, 18]);
        assert_eq!(targets, vec![None, None, None, None, Some(18), Some(17)]);
    }

    #[test]
    fn zero_steps_returns_init() {
        let cfg = ModelConfig::default();
        let tc = TrainConfig {
            steps: 0,
            ..TrainConfig::base_default()
        };
        let (p, curve) = train_base(cfg, &TaskSpec::default_suite(), &tc, 7).unwrap();
        assert_eq!(p, ModelParams::init(cfg, 7).unwrap());
        assert!(curve.losses.is_empty());
    }

    #[test]
    fn eval_macro_average_is_mean() {
        let r = EvalResult::from_tasks(vec![
            TaskAccuracy {
                task: "a".into(),
                accuracy: 0.5,
                samples: 2,
            },
            TaskAccuracy {
                task: "b".into(),
                accuracy: 1.0,
                samples: 2,
            },
        ]);
        assert_eq!(r.macro_avg, 0.75);
    }
}
