//! Command-line interface.
//!
//! Values are resolved in order: built-in defaults, then the `--config` file,
//! then explicit flags. The resolved config is written as `config.toml` next
//! to every output.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use emerge_core::align::{self, AlignmentProblem};
use emerge_core::chunked::{apply_chunk_coefficients, compute_importance, fit_pp_problem};
use emerge_core::task_vector::unit_stats;
use emerge_core::tasks::{
    derive_seed, evaluate, gen_dataset, train_base, train_expert, train_mixture, CalibrationSet,
    EvalResult, TaskKind, TaskSpec,
};
use emerge_core::ModelParams;
use serde_json::json;

use crate::checkpoint::{self, write_atomic};
use crate::config::{InitMode, RunConfig};
use crate::error::{CliError, ErrorClass};
use crate::pipeline::{self, read_records, write_curve, write_records, EvalRecord};
use crate::report::{self, Precision, Table};

#[derive(Debug, Parser)]
#[command(
    name = "emerge",
    version,
    about = "Train tiny transformer experts and merge them"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run config (TOML); explicit flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Experiment seed [default: first entry of `seeds`, 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print numbers at full precision instead of 6 significant digits
    #[arg(long, global = true)]
    pub raw: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the task specs and a preview of each seeded dataset
    GenTasks(GenTasksArgs),
    /// Pretrain the shared base model
    TrainBase(TrainArgs),
    /// Fine-tune one expert from the base
    TrainExpert(TrainExpertArgs),
    /// Fine-tune one model on every task (upper reference)
    TrainMixture(TrainMixtureArgs),
    /// Merge experts into one model
    Merge(MergeArgs),
    /// Per-unit importance from layer-wise coefficients
    AnalyzeImportance(ImportanceArgs),
    /// Greedy-decoding accuracy of a model checkpoint
    Eval(EvalArgs),
    /// Combine saved results into one table
    Report(ReportArgs),
    /// Run every stage for every seed, skipping up-to-date stages
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct GenTasksArgs {
    /// Output directory
    #[arg(long, default_value = "tasks")]
    pub out: PathBuf,
    /// Examples previewed per task
    #[arg(long, default_value_t = 8)]
    pub preview: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Output checkpoint
    #[arg(long, default_value = "base.emck")]
    pub out: PathBuf,
    /// Optimizer steps [default: 500]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Adam learning rate [default: 0.003]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Sequences per step [default: 16]
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainExpertArgs {
    /// Task name (modadd, reverse, parity)
    #[arg(long)]
    pub task: String,
    /// Base checkpoint
    #[arg(long, default_value = "base.emck")]
    pub base: PathBuf,
    /// Output checkpoint [default: expert-<task>.emck]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optimizer steps [default: 1500]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Minimum held-out accuracy [default: 0.9]
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainMixtureArgs {
    /// Base checkpoint
    #[arg(long, default_value = "base.emck")]
    pub base: PathBuf,
    /// Output checkpoint
    #[arg(long, default_value = "mixture.emck")]
    pub out: PathBuf,
    /// Optimizer steps [default: 1500]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct Inputs {
    /// Base checkpoint
    #[arg(long, default_value = "base.emck")]
    pub base: PathBuf,
    /// Expert checkpoints in task order [default: expert-<task>.emck per task]
    #[arg(long, value_delimiter = ',')]
    pub experts: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// average, ta, ties, dare-ta, dare-ties, expert or expert-pp
    #[arg(long, value_parser = ["average", "ta", "ties", "dare-ta", "dare-ties", "expert", "expert-pp"])]
    pub method: String,
    #[command(flatten)]
    pub inputs: Inputs,
    /// Output root; results go to <out>/<method>
    #[arg(long, default_value = "merges")]
    pub out: PathBuf,
    /// TA coefficients (one shared or one per expert) or the TIES scale;
    /// omitted means the best of the grid by held-out accuracy
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub lambda: Vec<f64>,
    /// Grid searched when --lambda is omitted [default: 0.1,0.3,0.5,1.0]
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Vec<f64>,
    /// TIES keep fraction [default: 0.2]
    #[arg(long)]
    pub keep: Option<f64>,
    /// DARE drop probability [default: 0.5]
    #[arg(long)]
    pub drop: Option<f64>,
    /// Coefficient regularizer weight [default: 0.8]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Logit distillation temperature [default: 1]
    #[arg(long)]
    pub temp: Option<f64>,
    /// Per-task weights as task=weight (name or index) [default: 1 each]
    #[arg(long, value_delimiter = ',')]
    pub beta: Vec<String>,
    /// Calibration prompts per task [default: 5]
    #[arg(long)]
    pub samples: Option<usize>,
    /// Coefficient optimizer steps [default: 200]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Coefficient learning rate [default: 0.01]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Blocks whose hidden states are aligned, 0-based [default: middle block]
    #[arg(long, value_delimiter = ',')]
    pub hidden_layers: Vec<usize>,
    /// Prior coefficient value [default: 0.3]
    #[arg(long)]
    pub prior: Option<f64>,
    /// Initialization of layer-wise coefficients [default: prior]
    #[arg(long, value_enum)]
    pub init: Option<InitMode>,
    /// Drop the hidden-state alignment term
    #[arg(long)]
    pub no_hidden_loss: bool,
    /// Drop the logit alignment term
    #[arg(long)]
    pub no_logit_loss: bool,
    /// Drop the coefficient regularizer
    #[arg(long)]
    pub no_regularizer: bool,
    /// Chunk budget as a multiple of the unit count [default: 1.1]
    #[arg(long)]
    pub budget_factor: Option<f64>,
    /// Importance exponent in the chunk allocation [default: 1.2]
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Give every unit N chunks instead of importance allocation
    #[arg(long, value_name = "N")]
    pub chunk_all: Option<usize>,
    /// Stage-1 coefficients for expert-pp [default: <out>/expert/coefficients.emck]
    #[arg(long)]
    pub stage1: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ImportanceArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    /// Layer-wise coefficient checkpoint
    #[arg(long, default_value = "merges/expert/coefficients.emck")]
    pub coefficients: PathBuf,
    /// Output directory
    #[arg(long, default_value = "importance")]
    pub out: PathBuf,
    /// Chunk budget as a multiple of the unit count [default: 1.1]
    #[arg(long)]
    pub budget_factor: Option<f64>,
    /// Importance exponent in the chunk allocation [default: 1.2]
    #[arg(long)]
    pub kappa: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model checkpoint
    #[arg(long)]
    pub model: PathBuf,
    /// Tasks to evaluate [default: every task]
    #[arg(long, value_delimiter = ',')]
    pub tasks: Vec<String>,
    /// Held-out prompts per task [default: 200]
    #[arg(long)]
    pub samples: Option<usize>,
    /// Also write results.{json,csv,txt} into this directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run roots, seed directories or eval output directories
    #[arg(long, value_delimiter = ',', required = true)]
    pub runs: Vec<PathBuf>,
    /// Also write results.csv and results.txt into this directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Output directory [default: runs/default]
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Seeds to run [default: 0,1,2]
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::new(ErrorClass::Config, msg)
}

fn base_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if common.raw {
        cfg.raw = true;
    }
    Ok(cfg)
}

fn seed_of(common: &Common, cfg: &RunConfig) -> u64 {
    common
        .seed
        .unwrap_or_else(|| cfg.seeds.first().copied().unwrap_or(0))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn save_config(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Writes a model checkpoint with its training curve and config beside it.
fn save_trained(
    path: &Path,
    stem: &str,
    m: &ModelParams,
    curve: &emerge_core::tasks::TrainCurve,
    cfg: &RunConfig,
) -> Result<(), CliError> {
    checkpoint::save_model(m, path)?;
    let dir = parent_dir(path);
    write_curve(
        &dir.join(format!("{stem}.curve.csv")),
        curve,
        pipeline::precision(cfg),
    )?;
    save_config(&dir, cfg)
}

fn load_inputs(
    cfg: &RunConfig,
    inputs: &Inputs,
) -> Result<(ModelParams, Vec<ModelParams>), CliError> {
    let specs = cfg.tasks.specs();
    let paths: Vec<PathBuf> = if inputs.experts.is_empty() {
        specs
            .iter()
            .map(|s| PathBuf::from(format!("expert-{}.emck", s.name)))
            .collect()
    } else {
        inputs.experts.clone()
    };
    if paths.len() != specs.len() {
        return Err(cfg_err(format!(
            "{} experts given for {} tasks; pass one per task in task order",
            paths.len(),
            specs.len()
        )));
    }
    let base = checkpoint::load_model(&inputs.base)?;
    let experts = paths
        .iter()
        .map(|p| checkpoint::load_model(p).map_err(CliError::from))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((base, experts))
}

fn parse_betas(entries: &[String], specs: &[TaskSpec]) -> Result<Vec<f64>, CliError> {
    let mut betas = vec![1.0; specs.len()];
    for e in entries {
        let (k, v) = e
            .split_once('=')
            .ok_or_else(|| cfg_err(format!("--beta expects task=weight, got {e}")))?;
        let idx = match k.parse::<usize>() {
            Ok(i) => i,
            Err(_) => specs
                .iter()
                .position(|s| s.name == k)
                .ok_or_else(|| cfg_err(format!("--beta: unknown task {k}")))?,
        };
        if idx >= specs.len() {
            return Err(cfg_err(format!("--beta: task index {idx} out of range")));
        }
        betas[idx] = v
            .parse()
            .map_err(|_| cfg_err(format!("--beta: {v} is not a number")))?;
    }
    Ok(betas)
}

fn apply_merge_flags(cfg: &mut RunConfig, a: &MergeArgs) -> Result<(), CliError> {
    let m = &mut cfg.merge;
    if !a.lambda_grid.is_empty() {
        m.lambda_grid = a.lambda_grid.clone();
    }
    set(&mut m.ties_keep, a.keep);
    set(&mut m.dare_drop, a.drop);
    set(&mut m.gamma, a.gamma);
    set(&mut m.temperature, a.temp);
    set(&mut m.samples, a.samples);
    set(&mut m.steps, a.steps);
    set(&mut m.lr, a.lr);
    set(&mut m.prior, a.prior);
    set(&mut m.init, a.init);
    set(&mut m.budget_factor, a.budget_factor);
    set(&mut m.kappa, a.kappa);
    set(&mut m.chunk_all, a.chunk_all);
    if !a.hidden_layers.is_empty() {
        m.hidden_layers = a.hidden_layers.clone();
    }
    if !a.beta.is_empty() {
        m.betas = parse_betas(&a.beta, &cfg.tasks.specs())?;
    }
    let m = &mut cfg.merge;
    m.hidden_loss &= !a.no_hidden_loss;
    m.logit_loss &= !a.no_logit_loss;
    m.regularizer &= !a.no_regularizer;
    Ok(())
}

fn print_results(rows: &[EvalRecord], p: Precision) -> String {
    let results: Vec<(String, EvalResult)> =
        rows.iter().map(|r| (r.name.clone(), r.result())).collect();
    report::results_table(&results, p).to_text()
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let common = cli.common;
    let mut cfg = base_config(&common)?;
    match cli.command {
        Command::GenTasks(a) => {
            cfg.validate()?;
            gen_tasks(&cfg, seed_of(&common, &cfg), &a)
        }
        Command::TrainBase(a) => {
            set(&mut cfg.base.steps, a.steps);
            set(&mut cfg.base.lr, a.lr);
            set(&mut cfg.base.batch, a.batch);
            cfg.validate()?;
            let seed = seed_of(&common, &cfg);
            let tc = cfg.base.train(derive_seed(seed, "base"));
            let (m, curve) = train_base(
                cfg.model_config(),
                &cfg.tasks.specs(),
                &tc,
                derive_seed(seed, "init"),
            )?;
            save_trained(&a.out, "base", &m, &curve, &cfg)?;
            println!(
                "base: final loss {}",
                pipeline::precision(&cfg).fmt(*curve.losses.last().unwrap_or(&f64::NAN))
            );
            Ok(())
        }
        Command::TrainExpert(a) => {
            set(&mut cfg.expert.steps, a.steps);
            set(&mut cfg.expert.lr, a.lr);
            set(&mut cfg.expert.threshold, a.threshold);
            cfg.validate()?;
            let seed = seed_of(&common, &cfg);
            let spec = pipeline::spec_by_name(&cfg, &a.task)?;
            let base = checkpoint::load_model(&a.base)?;
            let ec = cfg
                .expert
                .expert_config(derive_seed(seed, &format!("expert/{}", spec.name)));
            let (m, curve, acc) = train_expert(&base, &spec, &ec)?;
            let out = a
                .out
                .unwrap_or_else(|| PathBuf::from(format!("expert-{}.emck", spec.name)));
            save_trained(&out, &format!("expert-{}", spec.name), &m, &curve, &cfg)?;
            println!(
                "expert {}: accuracy {}",
                spec.name,
                pipeline::precision(&cfg).fmt(acc)
            );
            Ok(())
        }
        Command::TrainMixture(a) => {
            set(&mut cfg.mixture.steps, a.steps);
            set(&mut cfg.mixture.lr, a.lr);
            cfg.validate()?;
            let seed = seed_of(&common, &cfg);
            let base = checkpoint::load_model(&a.base)?;
            let ec = cfg.mixture.expert_config(derive_seed(seed, "mixture"));
            let (m, curve, acc) = train_mixture(&base, &cfg.tasks.specs(), &ec)?;
            save_trained(&a.out, "mixture", &m, &curve, &cfg)?;
            println!(
                "mixture: macro accuracy {}",
                pipeline::precision(&cfg).fmt(acc)
            );
            Ok(())
        }
        Command::Merge(a) => {
            apply_merge_flags(&mut cfg, &a)?;
            cfg.validate()?;
            merge(&cfg, seed_of(&common, &cfg), &a)
        }
        Command::AnalyzeImportance(a) => {
            set(&mut cfg.merge.budget_factor, a.budget_factor);
            set(&mut cfg.merge.kappa, a.kappa);
            cfg.validate()?;
            analyze(&cfg, &a)
        }
        Command::Eval(a) => {
            set(&mut cfg.eval.samples, a.samples);
            cfg.validate()?;
            eval(&cfg, seed_of(&common, &cfg), &a)
        }
        Command::Report(a) => compose_report(&cfg, &a),
        Command::Run(a) => {
            set(&mut cfg.out_dir, a.out_dir);
            if !a.seeds.is_empty() {
                cfg.seeds = a.seeds;
            } else if let Some(s) = common.seed {
                cfg.seeds = vec![s];
            }
            cfg.validate()?;
            let summary = pipeline::run_pipeline(&cfg, &mut |msg| eprintln!("{msg}"))?;
            print!("{}", summary.summary_text);
            Ok(())
        }
    }
}

fn kind_json(spec: &TaskSpec) -> serde_json::Value {
    match spec.kind {
        TaskKind::ModAdd { modulus } => json!({ "type": "modadd", "modulus": modulus }),
        TaskKind::Reverse { len, alphabet } => {
            json!({ "type": "reverse", "len": len, "alphabet": alphabet })
        }
        TaskKind::Parity { width } => json!({ "type": "parity", "width": width }),
    }
}

fn join_tokens(t: &[usize]) -> String {
    t.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn gen_tasks(cfg: &RunConfig, seed: u64, a: &GenTasksArgs) -> Result<(), CliError> {
    let specs = cfg.tasks.specs();
    let purposes = ["data", "calibration", "eval"];
    let doc = json!({
        "seed": seed,
        "tasks": specs.iter().map(|s| json!({
            "name": s.name,
            "kind": kind_json(s),
            "prompt_len": s.prompt_len(),
            "answer_len": s.answer_len(),
        })).collect::<Vec<_>>(),
        "streams": purposes,
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("json value");
    text.push('\n');
    write_atomic(&a.out.join("tasks.json"), text.as_bytes())?;
    for s in &specs {
        let mut t = Table::new(vec!["prompt".into(), "answer".into()]);
        if a.preview > 0 {
            for ex in gen_dataset(s, a.preview, derive_seed(seed, "eval"))? {
                t.rows
                    .push(vec![join_tokens(&ex.prompt), join_tokens(&ex.answer)]);
            }
        }
        report::write_table(&a.out.join(format!("{}.preview.csv", s.name)), &t)?;
        println!(
            "{}: prompt {} tokens, answer {} tokens",
            s.name,
            s.prompt_len(),
            s.answer_len()
        );
    }
    save_config(&a.out, cfg)
}

fn merge(cfg: &RunConfig, seed: u64, a: &MergeArgs) -> Result<(), CliError> {
    let (base, experts) = load_inputs(cfg, &a.inputs)?;
    let tvs = pipeline::task_vectors(&base, &experts)?;
    let dir = a.out.join(&a.method);
    let p = pipeline::precision(cfg);
    let mc = cfg.model_config();
    let specs = cfg.tasks.specs();
    match a.method.as_str() {
        "expert" | "expert-pp" => {
            let calib = CalibrationSet::generate(
                &specs,
                cfg.merge.samples,
                derive_seed(seed, "calibration"),
            )?;
            let problem = AlignmentProblem::new(
                &base,
                &tvs,
                &experts,
                &calib,
                cfg.merge.align_config(mc.n_blocks, seed),
            )?;
            if a.method == "expert" {
                let fit = pipeline::fit_expert(&problem, &cfg.merge)?;
                let merged = align::apply_coefficients(&base, &tvs, &fit.coefficients)?;
                pipeline::write_expert_outputs(&dir, mc, &fit, &merged, p)?;
                println!(
                    "expert: loss {} -> {}",
                    p.fmt(fit.log.initial_total()),
                    p.fmt(fit.log.final_record.total)
                );
            } else {
                let stage1_path = a
                    .stage1
                    .clone()
                    .unwrap_or_else(|| a.out.join("expert").join("coefficients.emck"));
                if !stage1_path.exists() {
                    return Err(cfg_err(format!(
                        "stage-1 coefficients {} not found; run merge --method expert first or pass --stage1",
                        stage1_path.display()
                    )));
                }
                let (_, stage1) = checkpoint::load_layer(&stage1_path)?;
                let pp = fit_pp_problem(&problem, &stage1, &cfg.merge.plan_config())?;
                let merged = apply_chunk_coefficients(&base, &tvs, &pp.plan, &pp.coefficients)?;
                pipeline::write_pp_outputs(&dir, mc, &pp, &merged, p)?;
                println!(
                    "expert-pp: {} chunks, loss {} -> {}",
                    pp.plan.budget,
                    p.fmt(pp.log.initial_total()),
                    p.fmt(pp.log.final_record.total)
                );
            }
        }
        method => {
            let dare_seed = derive_seed(seed, "dare");
            let merged = if !a.lambda.is_empty() || method == "average" {
                pipeline::merge_baseline(method, &base, &tvs, &a.lambda, &cfg.merge, dare_seed)?
            } else {
                let eval_seed = derive_seed(seed, "eval");
                let mut best: Option<(f64, ModelParams)> = None;
                let mut rows = Vec::new();
                for &l in &cfg.merge.lambda_grid {
                    let m =
                        pipeline::merge_baseline(method, &base, &tvs, &[l], &cfg.merge, dare_seed)?;
                    let r = evaluate(&m, &specs, cfg.eval.samples, eval_seed)?;
                    rows.push(EvalRecord::new(&format!("{method}@{}", p.fmt(l)), &r));
                    if best.as_ref().is_none_or(|(b, _)| r.macro_avg > *b) {
                        best = Some((r.macro_avg, m));
                    }
                }
                write_records(&dir.join("grid.json"), &rows)?;
                print!("{}", print_results(&rows, p));
                best.expect("nonempty grid").1
            };
            checkpoint::save_model(&merged, &dir.join("model.emck"))?;
            println!("{method}: wrote {}", dir.join("model.emck").display());
        }
    }
    save_config(&dir, cfg)
}

fn analyze(cfg: &RunConfig, a: &ImportanceArgs) -> Result<(), CliError> {
    let (base, experts) = load_inputs(cfg, &a.inputs)?;
    let tvs = pipeline::task_vectors(&base, &experts)?;
    let (_, coeffs) = checkpoint::load_layer(&a.coefficients)?;
    let stats = tvs
        .iter()
        .map(|tv| unit_stats(tv).map_err(CliError::from))
        .collect::<Result<Vec<_>, _>>()?;
    let rep = compute_importance(base.config(), &coeffs, &stats)?;
    let plan = cfg.merge.plan_config().plan(&rep)?;
    let p = pipeline::precision(cfg);
    report::emit_importance_tables(&rep, &a.out, p)?;
    checkpoint::save_importance(&rep, &a.out.join("importance.emck"))?;
    let mut t = Table::new(vec!["unit".into(), "importance".into(), "chunks".into()]);
    for (u, unit) in base.config().units().into_iter().enumerate() {
        t.rows.push(vec![
            unit.name(),
            p.fmt(rep.importance[u]),
            plan.counts[u].to_string(),
        ]);
    }
    report::write_table(&a.out.join("chunk_plan.csv"), &t)?;
    print!("{}", report::stage_kind_table(&rep, p).to_text());
    save_config(&a.out, cfg)
}

fn eval(cfg: &RunConfig, seed: u64, a: &EvalArgs) -> Result<(), CliError> {
    let model = checkpoint::load_model(&a.model)?;
    let specs = if a.tasks.is_empty() {
        cfg.tasks.specs()
    } else {
        a.tasks
            .iter()
            .map(|t| pipeline::spec_by_name(cfg, t))
            .collect::<Result<Vec<_>, _>>()?
    };
    let r = evaluate(&model, &specs, cfg.eval.samples, derive_seed(seed, "eval"))?;
    let name = a
        .model
        .file_stem()
        .map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned());
    let rows = vec![EvalRecord::new(&name, &r)];
    let p = pipeline::precision(cfg);
    print!("{}", print_results(&rows, p));
    if let Some(out) = &a.out {
        write_records(&out.join("results.json"), &rows)?;
        let results: Vec<(String, EvalResult)> = vec![(name, r)];
        report::emit_results_table(&results, out, p)?;
        save_config(out, cfg)?;
    }
    Ok(())
}

/// Result files beneath a run root, a seed directory or an eval directory.
fn result_sources(dir: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    let direct = dir.join("results.json");
    if direct.exists() {
        return Ok(vec![(String::new(), direct)]);
    }
    let seeded = dir.join("report").join("results.json");
    if seeded.exists() {
        return Ok(vec![(String::new(), seeded)]);
    }
    let mut out = Vec::new();
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::new(ErrorClass::Io, format!("{}: {e}", dir.display())))?;
    let mut names: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    names.sort();
    for p in names {
        let f = p.join("report").join("results.json");
        if f.exists() {
            let label = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            out.push((label, f));
        }
    }
    if out.is_empty() {
        return Err(CliError::new(
            ErrorClass::Io,
            format!("no results found under {}", dir.display()),
        ));
    }
    Ok(out)
}

fn compose_report(cfg: &RunConfig, a: &ReportArgs) -> Result<(), CliError> {
    let p = pipeline::precision(cfg);
    let multi = a.runs.len() > 1;
    let mut results: Vec<(String, EvalResult)> = Vec::new();
    for run in &a.runs {
        for (label, path) in result_sources(run)? {
            let mut prefix = Vec::new();
            if multi {
                prefix.push(run.display().to_string());
            }
            if !label.is_empty() {
                prefix.push(label);
            }
            for r in read_records(&path)? {
                let name = if prefix.is_empty() {
                    r.name.clone()
                } else {
                    format!("{}/{}", prefix.join("/"), r.name)
                };
                results.push((name, r.result()));
            }
        }
    }
    let text = report::results_table(&results, p).to_text();
    print!("{text}");
    if let Some(out) = &a.out {
        report::emit_results_table(&results, out, p)?;
        save_config(out, cfg)?;
    }
    Ok(())
}
