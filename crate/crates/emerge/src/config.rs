//! Declarative run configuration (TOML).

use std::path::{Path, PathBuf};

use emerge_core::align::AlignConfig;
use emerge_core::baselines::{DareConfig, TiesConfig};
use emerge_core::chunked::PlanConfig;
use emerge_core::optim::Schedule;
use emerge_core::tasks::{ExpertConfig, TaskSpec, TrainConfig};
use emerge_core::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::ConfigHeader;
use crate::error::{CliError, ErrorClass};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TasksSection {
    pub modulus: usize,
    pub reverse_len: usize,
    pub reverse_alphabet: usize,
    pub parity_width: usize,
}

impl Default for TasksSection {
    fn default() -> Self {
        TasksSection {
            modulus: 7,
            reverse_len: 3,
            reverse_alphabet: 4,
            parity_width: 4,
        }
    }
}

impl TasksSection {
    pub fn specs(&self) -> Vec<TaskSpec> {
        vec![
            TaskSpec::mod_add(self.modulus),
            TaskSpec::reverse(self.reverse_len, self.reverse_alphabet),
            TaskSpec::parity(self.parity_width),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Minimum accuracy for supervised stages (ignored for the base).
    pub threshold: f64,
    pub eval_samples: usize,
}

impl TrainSection {
    fn base() -> Self {
        let t = TrainConfig::base_default();
        TrainSection {
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            threshold: 0.0,
            eval_samples: 200,
        }
    }

    fn expert() -> Self {
        let e = ExpertConfig::default();
        TrainSection {
            steps: e.train.steps,
            batch: e.train.batch,
            lr: e.train.lr,
            threshold: e.threshold,
            eval_samples: e.eval_samples,
        }
    }

    fn mixture() -> Self {
        TrainSection {
            threshold: 0.0,
            ..TrainSection::expert()
        }
    }

    pub fn train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            seed,
        }
    }

    pub fn expert_config(&self, seed: u64) -> ExpertConfig {
        ExpertConfig {
            train: self.train(seed),
            threshold: self.threshold,
            eval_samples: self.eval_samples,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection::expert()
    }
}

/// Partially specified training section, filled from the stage preset.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainPatch {
    steps: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    threshold: Option<f64>,
    eval_samples: Option<usize>,
}

impl TrainPatch {
    fn over(self, preset: TrainSection) -> TrainSection {
        TrainSection {
            steps: self.steps.unwrap_or(preset.steps),
            batch: self.batch.unwrap_or(preset.batch),
            lr: self.lr.unwrap_or(preset.lr),
            threshold: self.threshold.unwrap_or(preset.threshold),
            eval_samples: self.eval_samples.unwrap_or(preset.eval_samples),
        }
    }
}

fn base_section<'de, D: serde::Deserializer<'de>>(d: D) -> Result<TrainSection, D::Error> {
    TrainPatch::deserialize(d).map(|p| p.over(TrainSection::base()))
}

fn expert_section<'de, D: serde::Deserializer<'de>>(d: D) -> Result<TrainSection, D::Error> {
    TrainPatch::deserialize(d).map(|p| p.over(TrainSection::expert()))
}

fn mixture_section<'de, D: serde::Deserializer<'de>>(d: D) -> Result<TrainSection, D::Error> {
    TrainPatch::deserialize(d).map(|p| p.over(TrainSection::mixture()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Every coefficient starts at the prior.
    #[default]
    Prior,
    /// The prior is the grid value with the lowest alignment loss.
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeSection {
    pub lambda_grid: Vec<f64>,
    pub gamma: f64,
    pub temperature: f64,
    /// Per-task weights; empty means one for every task.
    pub betas: Vec<f64>,
    pub samples: usize,
    pub steps: usize,
    pub lr: f64,
    /// Supervised blocks; empty means the middle block.
    pub hidden_layers: Vec<usize>,
    pub prior: f64,
    pub init: InitMode,
    pub hidden_loss: bool,
    pub logit_loss: bool,
    pub regularizer: bool,
    pub budget_factor: f64,
    pub kappa: f64,
    /// Give every unit this many chunks (0 disables).
    pub chunk_all: usize,
    pub ties_keep: f64,
    pub dare_drop: f64,
    pub snapshot_interval: usize,
}

impl Default for MergeSection {
    fn default() -> Self {
        let a = AlignConfig::for_blocks(4);
        let p = PlanConfig::default();
        MergeSection {
            lambda_grid: vec![0.1, 0.3, 0.5, 1.0],
            gamma: a.gamma,
            temperature: a.temperature,
            betas: Vec::new(),
            samples: 5,
            steps: a.steps,
            lr: a.lr,
            hidden_layers: Vec::new(),
            prior: 0.3,
            init: InitMode::Prior,
            hidden_loss: true,
            logit_loss: true,
            regularizer: true,
            budget_factor: p.budget_factor,
            kappa: p.kappa,
            chunk_all: 0,
            ties_keep: TiesConfig::default().keep_fraction,
            dare_drop: DareConfig::default().drop_prob,
            snapshot_interval: a.snapshot_interval,
        }
    }
}

impl MergeSection {
    pub fn align_config(&self, n_blocks: usize, seed: u64) -> AlignConfig {
        let base = AlignConfig::for_blocks(n_blocks);
        AlignConfig {
            temperature: self.temperature,
            hidden_layers: if self.hidden_layers.is_empty() {
                base.hidden_layers
            } else {
                self.hidden_layers.clone()
            },
            task_weights: self.betas.clone(),
            gamma: self.gamma,
            lr: self.lr,
            steps: self.steps,
            schedule: Schedule::Cosine,
            seed,
            use_hidden: self.hidden_loss,
            use_logit: self.logit_loss,
            use_regularizer: self.regularizer,
            snapshot_interval: self.snapshot_interval,
        }
    }

    pub fn plan_config(&self) -> PlanConfig {
        PlanConfig {
            budget_factor: self.budget_factor,
            kappa: self.kappa,
            chunk_all: (self.chunk_all > 0).then_some(self.chunk_all),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { samples: 200 }
    }
}

pub const ALL_METHODS: [&str; 9] = [
    "average",
    "ta",
    "ties",
    "dare-ta",
    "dare-ties",
    "expert",
    "expert-pp",
    "expert-noreg",
    "mixture",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub methods: Vec<String>,
    /// Full-precision numbers in reports.
    pub raw: bool,
    pub model: ConfigHeader,
    pub tasks: TasksSection,
    #[serde(deserialize_with = "base_section")]
    pub base: TrainSection,
    #[serde(deserialize_with = "expert_section")]
    pub expert: TrainSection,
    #[serde(deserialize_with = "mixture_section")]
    pub mixture: TrainSection,
    pub merge: MergeSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs/default"),
            seeds: vec![0, 1, 2],
            methods: ALL_METHODS.iter().map(|s| s.to_string()).collect(),
            raw: false,
            model: ModelConfig::default().into(),
            tasks: TasksSection::default(),
            base: TrainSection::base(),
            expert: TrainSection::expert(),
            mixture: TrainSection::mixture(),
            merge: MergeSection::default(),
            eval: EvalSection::default(),
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::new(ErrorClass::Config, msg)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new(ErrorClass::Io, format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| cfg_err(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.into()
    }

    /// Checks every field before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let mc = self.model_config();
        mc.validate().map_err(|e| cfg_err(e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(cfg_err("at least one seed is required"));
        }
        let specs = self.tasks.specs();
        for s in &specs {
            s.check_fits(mc.max_seq_len)
                .map_err(|e| cfg_err(e.to_string()))?;
        }
        if mc.vocab_size < emerge_core::tasks::MIN_VOCAB {
            return Err(cfg_err(
                "model.vocab_size must cover the task token map (32)",
            ));
        }
        for m in &self.methods {
            if !ALL_METHODS.contains(&m.as_str()) {
                return Err(cfg_err(format!("unknown method {m}")));
            }
        }
        for (name, t) in [
            ("base", &self.base),
            ("expert", &self.expert),
            ("mixture", &self.mixture),
        ] {
            if t.batch == 0 || !(t.lr > 0.0) || !t.lr.is_finite() {
                return Err(cfg_err(format!("{name}: batch and lr must be positive")));
            }
            if !(0.0..=1.0).contains(&t.threshold) {
                return Err(cfg_err(format!("{name}: threshold must be in [0, 1]")));
            }
        }
        let m = &self.merge;
        if m.lambda_grid.is_empty() || m.lambda_grid.iter().any(|l| !l.is_finite()) {
            return Err(cfg_err("merge.lambda_grid must be nonempty and finite"));
        }
        if m.samples == 0 {
            return Err(cfg_err("merge.samples must be positive"));
        }
        if !(m.temperature > 0.0) {
            return Err(cfg_err("merge.temperature must be positive"));
        }
        if !(m.gamma >= 0.0) || !m.gamma.is_finite() {
            return Err(cfg_err("merge.gamma must be nonnegative"));
        }
        if !(m.lr > 0.0) {
            return Err(cfg_err("merge.lr must be positive"));
        }
        if !m.betas.is_empty() && m.betas.len() != specs.len() {
            return Err(cfg_err("merge.betas needs one weight per task"));
        }
        if m.betas.iter().any(|b| !(*b >= 0.0)) {
            return Err(cfg_err("merge.betas must be nonnegative"));
        }
        if m.hidden_layers.iter().any(|&l| l >= mc.n_blocks) {
            return Err(cfg_err("merge.hidden_layers out of range"));
        }
        if !m.hidden_loss && !m.logit_loss {
            return Err(cfg_err(
                "at least one of merge.hidden_loss and merge.logit_loss is required",
            ));
        }
        if !(m.budget_factor > 0.0) || !(m.kappa >= 0.0) {
            return Err(cfg_err(
                "merge.budget_factor must be positive and merge.kappa nonnegative",
            ));
        }
        if !(m.ties_keep > 0.0 && m.ties_keep <= 1.0) {
            return Err(cfg_err("merge.ties_keep must be in (0, 1]"));
        }
        if !(m.dare_drop >= 0.0 && m.dare_drop < 1.0) {
            return Err(cfg_err("merge.dare_drop must be in [0, 1)"));
        }
        if !m.prior.is_finite() {
            return Err(cfg_err("merge.prior must be finite"));
        }
        Ok(())
    }
}

/// Short hex digest of any serializable value.
pub fn hash_of<T: Serialize>(value: &T) -> String {
    let bytes = crate::checkpoint::canonical_json(value);
    let digest = Sha256::digest(&bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let back = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::parse("seeds = [4]\n[merge]\ngamma = 2.0\n").unwrap();
        assert_eq!(c.seeds, vec![4]);
        assert_eq!(c.merge.gamma, 2.0);
        assert_eq!(c.merge.kappa, 1.2);
        let c = RunConfig::parse("[mixture]\nsteps = 7\n[base]\nlr = 0.5\n").unwrap();
        let d = RunConfig::default();
        assert_eq!(c.mixture.steps, 7);
        assert_eq!(c.mixture.threshold, d.mixture.threshold);
        assert_eq!(c.mixture.lr, d.mixture.lr);
        assert_eq!(c.base.lr, 0.5);
        assert_eq!(c.base.steps, d.base.steps);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            "seeds = []",
            "[merge]\ntemperature = 0.0",
            "[merge]\nhidden_layers = [9]",
            "methods = [\"nope\"]",
            "unknown = 1",
            "[tasks]\nreverse_len = 40",
        ] {
            let e = RunConfig::parse(text).unwrap_err();
            assert_eq!(e.class, ErrorClass::Config, "{text}");
        }
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(hash_of(&a), hash_of(&b));
        b.merge.gamma = 0.5;
        assert_ne!(hash_of(&a), hash_of(&b));
    }
}
