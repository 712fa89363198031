//! Staged experiment pipeline with config-hash caching.
//!
//! Every stage writes into its own directory together with `config.toml`
//! (the full run config) and a `stage.hash` stamp. A stage whose stamp
//! matches is loaded instead of recomputed. While a stage runs its
//! directory carries a `PARTIAL` marker, removed only on success.

use std::fs;
use std::path::{Path, PathBuf};

use emerge_core::align::{
    fit_problem, ta_grid_problem, AlignmentProblem, GridSearch, LayerCoefficients, TrainLog,
};
use emerge_core::baselines::{
    dare_preprocess, merge_task_arithmetic, merge_ties, merge_weight_average, DareConfig, TAConfig,
    TiesConfig,
};
use emerge_core::chunked::{apply_chunk_coefficients, fit_pp_problem, PpResult};
use emerge_core::task_vector::{compute_task_vector, TaskVector};
use emerge_core::tasks::{
    derive_seed, evaluate, train_base, train_expert, train_mixture, CalibrationSet, EvalResult,
    TaskAccuracy, TaskSpec, TrainCurve,
};
use emerge_core::{align, ModelConfig, ModelParams};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, write_atomic};
use crate::config::{hash_of, InitMode, MergeSection, RunConfig};
use crate::error::{CliError, ErrorClass};
use crate::report::{self, Precision, Table};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: String,
    pub accuracy: f64,
    pub samples: usize,
}

/// Serializable evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub name: String,
    pub tasks: Vec<TaskRow>,
    pub macro_avg: f64,
}

impl EvalRecord {
    pub fn new(name: &str, r: &EvalResult) -> Self {
        EvalRecord {
            name: name.to_string(),
            tasks: r
                .tasks
                .iter()
                .map(|t| TaskRow {
                    task: t.task.clone(),
                    accuracy: t.accuracy,
                    samples: t.samples,
                })
                .collect(),
            macro_avg: r.macro_avg,
        }
    }

    pub fn result(&self) -> EvalResult {
        EvalResult::from_tasks(
            self.tasks
                .iter()
                .map(|t| TaskAccuracy {
                    task: t.task.clone(),
                    accuracy: t.accuracy,
                    samples: t.samples,
                })
                .collect(),
        )
    }
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(records).expect("records serialize");
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::new(ErrorClass::Io, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::new(ErrorClass::Io, format!("{}: {e}", path.display())))
}

fn write_string(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn write_curve(path: &Path, curve: &TrainCurve, p: Precision) -> Result<(), CliError> {
    let mut t = Table::new(vec!["step".into(), "loss".into()]);
    for (i, l) in curve.losses.iter().enumerate() {
        t.rows.push(vec![i.to_string(), p.fmt(*l)]);
    }
    report::write_table(path, &t)?;
    Ok(())
}

pub fn task_vectors(
    base: &ModelParams,
    experts: &[ModelParams],
) -> Result<Vec<TaskVector>, CliError> {
    experts
        .iter()
        .enumerate()
        .map(|(k, e)| compute_task_vector(base, e, k).map_err(CliError::from))
        .collect()
}

/// Training-free merge for `average`, `ta`, `ties`, `dare-ta`, `dare-ties`.
/// `lambda` is the TA coefficient (shared) or the TIES scale.
pub fn merge_baseline(
    method: &str,
    base: &ModelParams,
    tvs: &[TaskVector],
    lambdas: &[f64],
    merge: &MergeSection,
    dare_seed: u64,
) -> Result<ModelParams, CliError> {
    let dare = |tvs: &[TaskVector]| -> Result<Vec<TaskVector>, CliError> {
        let cfg = DareConfig {
            drop_prob: merge.dare_drop,
            seed: dare_seed,
        };
        tvs.iter()
            .map(|tv| dare_preprocess(tv, &cfg).map_err(CliError::from))
            .collect()
    };
    let ta = |tvs: &[TaskVector]| {
        let lambdas = if lambdas.len() == 1 {
            vec![lambdas[0]; tvs.len()]
        } else {
            lambdas.to_vec()
        };
        merge_task_arithmetic(base, tvs, &TAConfig { lambdas }).map_err(CliError::from)
    };
    let ties = |tvs: &[TaskVector]| {
        let cfg = TiesConfig {
            keep_fraction: merge.ties_keep,
            scale: lambdas.first().copied().unwrap_or(1.0),
        };
        merge_ties(base, tvs, &cfg).map_err(CliError::from)
    };
    match method {
        "average" => Ok(merge_weight_average(base, tvs)?),
        "ta" => ta(tvs),
        "ties" => ties(tvs),
        "dare-ta" => ta(&dare(tvs)?),
        "dare-ties" => ties(&dare(tvs)?),
        other => Err(CliError::new(
            ErrorClass::Config,
            format!("{other} is not a training-free method"),
        )),
    }
}

pub struct ExpertFit {
    pub coefficients: LayerCoefficients,
    pub log: TrainLog,
    pub grid: Option<GridSearch>,
}

/// Layer-wise fit with the configured initialization.
pub fn fit_expert(
    problem: &AlignmentProblem<'_>,
    merge: &MergeSection,
) -> Result<ExpertFit, CliError> {
    let units = problem.base.config().unit_count();
    let k = problem.experts();
    let (init, grid) = match merge.init {
        InitMode::Prior => (
            LayerCoefficients::constant(&vec![merge.prior; k], units),
            None,
        ),
        InitMode::Grid => {
            let g = ta_grid_problem(problem, &merge.lambda_grid)?;
            (g.coefficients.clone(), Some(g))
        }
    };
    let (coefficients, log) = fit_problem(problem, &init)?;
    Ok(ExpertFit {
        coefficients,
        log,
        grid,
    })
}

/// Initial and final objective of a coefficient fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Descent {
    pub initial: f64,
    pub last: f64,
}

impl Descent {
    pub fn of(log: &TrainLog) -> Self {
        Descent {
            initial: log.initial_total(),
            last: log.final_record.total,
        }
    }
}

pub fn write_expert_outputs(
    dir: &Path,
    config: ModelConfig,
    fit: &ExpertFit,
    merged: &ModelParams,
    p: Precision,
) -> Result<(), CliError> {
    checkpoint::save_model(merged, &dir.join("model.emck"))?;
    checkpoint::save_layer(config, &fit.coefficients, &dir.join("coefficients.emck"))?;
    report::write_table(
        &dir.join("coefficients.csv"),
        &report::layer_coefficient_table(&config, &fit.coefficients, p),
    )?;
    report::write_table(
        &dir.join("train_log.csv"),
        &report::train_log_table(&fit.log, p),
    )?;
    report::write_table(
        &dir.join("snapshots.csv"),
        &report::snapshot_table(&fit.log, p),
    )?;
    if let Some(g) = &fit.grid {
        let mut t = Table::new(vec!["lambda".into(), "alignment_loss".into()]);
        for (l, v) in &g.table {
            t.rows.push(vec![p.fmt(*l), p.fmt(*v)]);
        }
        report::write_table(&dir.join("grid.csv"), &t)?;
    }
    write_string(
        &dir.join("descent.json"),
        &serde_json::to_string(&Descent::of(&fit.log)).expect("serializable"),
    )
}

pub fn write_pp_outputs(
    dir: &Path,
    config: ModelConfig,
    pp: &PpResult,
    merged: &ModelParams,
    p: Precision,
) -> Result<(), CliError> {
    checkpoint::save_model(merged, &dir.join("model.emck"))?;
    checkpoint::save_chunk(
        config,
        &pp.plan,
        &pp.coefficients,
        &dir.join("chunk_coefficients.emck"),
    )?;
    checkpoint::save_importance(&pp.report, &dir.join("importance.emck"))?;
    report::emit_importance_tables(&pp.report, dir, p)?;
    let mut plan = Table::new(vec!["unit".into(), "params".into(), "chunks".into()]);
    for (u, unit) in config.units().into_iter().enumerate() {
        plan.rows.push(vec![
            unit.name(),
            pp.plan.unit_sizes[u].to_string(),
            pp.plan.counts[u].to_string(),
        ]);
    }
    report::write_table(&dir.join("chunk_plan.csv"), &plan)?;
    report::write_table(
        &dir.join("train_log.csv"),
        &report::train_log_table(&pp.log, p),
    )?;
    write_string(
        &dir.join("descent.json"),
        &serde_json::to_string(&Descent::of(&pp.log)).expect("serializable"),
    )
}

pub fn read_descent(dir: &Path) -> Result<Descent, CliError> {
    let path = dir.join("descent.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::new(ErrorClass::Io, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::new(ErrorClass::Io, e.to_string()))
}

/// Runs `compute` unless `dir` holds a matching stamp and `load` succeeds.
fn stage<T>(
    cfg: &RunConfig,
    dir: &Path,
    hash: &str,
    progress: &mut dyn FnMut(&str),
    load: impl FnOnce(&Path) -> Result<T, CliError>,
    compute: impl FnOnce(&Path) -> Result<T, CliError>,
) -> Result<T, CliError> {
    let stamp = dir.join("stage.hash");
    let label = dir.display().to_string();
    if fs::read_to_string(&stamp).ok().as_deref() == Some(hash) && !dir.join("PARTIAL").exists() {
        if let Ok(v) = load(dir) {
            progress(&format!("skip {label} (up to date)"));
            return Ok(v);
        }
    }
    progress(&format!("run  {label}"));
    fs::create_dir_all(dir)?;
    if stamp.exists() {
        fs::remove_file(&stamp)?;
    }
    write_string(&dir.join("PARTIAL"), "stage did not finish\n")?;
    let v = compute(dir)?;
    write_string(&dir.join("config.toml"), &cfg.to_toml())?;
    fs::remove_file(dir.join("PARTIAL"))?;
    write_string(&stamp, hash)?;
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedSummary {
    pub seed: u64,
    pub records: Vec<EvalRecord>,
    pub expert_descent: Option<Descent>,
    pub pp_descent: Option<Descent>,
    pub dir: PathBuf,
}

impl SeedSummary {
    pub fn macro_of(&self, name: &str) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .map(|r| r.macro_avg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seeds: Vec<SeedSummary>,
    pub summary_text: String,
}

impl RunSummary {
    pub fn mean_of(&self, name: &str) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.seeds.iter().map(|s| s.macro_of(name)).collect();
        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn model_stage(
    cfg: &RunConfig,
    dir: &Path,
    hash: &str,
    progress: &mut dyn FnMut(&str),
    train: impl FnOnce() -> Result<(ModelParams, TrainCurve), CliError>,
) -> Result<ModelParams, CliError> {
    let p = precision(cfg);
    stage(
        cfg,
        dir,
        hash,
        progress,
        |d| Ok(checkpoint::load_model(&d.join("model.emck"))?),
        |d| {
            let (m, curve) = train()?;
            checkpoint::save_model(&m, &d.join("model.emck"))?;
            write_curve(&d.join("curve.csv"), &curve, p)?;
            Ok(m)
        },
    )
}

pub fn precision(cfg: &RunConfig) -> Precision {
    if cfg.raw {
        Precision::Raw
    } else {
        Precision::Short
    }
}

fn wants(cfg: &RunConfig, m: &str) -> bool {
    cfg.methods.iter().any(|x| x == m)
}

/// Best entry of a grid by macro accuracy (earliest wins ties).
fn best_of(rows: &[EvalRecord]) -> Option<&EvalRecord> {
    rows.iter()
        .fold(None, |best: Option<&EvalRecord>, r| match best {
            Some(b) if b.macro_avg >= r.macro_avg => Some(b),
            _ => Some(r),
        })
}

pub fn run_seed(
    cfg: &RunConfig,
    seed: u64,
    progress: &mut dyn FnMut(&str),
) -> Result<SeedSummary, CliError> {
    let root = cfg.out_dir.join(format!("seed-{seed}"));
    let mc = cfg.model_config();
    let specs = cfg.tasks.specs();
    let p = precision(cfg);
    let eval_seed = derive_seed(seed, "eval");
    let eval = |m: &ModelParams, name: &str| -> Result<EvalRecord, CliError> {
        let r = evaluate(m, &specs, cfg.eval.samples, eval_seed)?;
        Ok(EvalRecord::new(name, &r))
    };

    let base_hash = hash_of(&("base", seed, &cfg.model, &cfg.tasks, &cfg.base));
    let base = model_stage(cfg, &root.join("base"), &base_hash, progress, || {
        let tc = cfg.base.train(derive_seed(seed, "base"));
        Ok(train_base(mc, &specs, &tc, derive_seed(seed, "init"))?)
    })?;

    let mut experts = Vec::with_capacity(specs.len());
    let mut expert_hashes = Vec::with_capacity(specs.len());
    for spec in &specs {
        let h = hash_of(&("expert", seed, &base_hash, &spec.name, &cfg.expert));
        let mut label = String::from("expert/");
        label.push_str(&spec.name);
        let e = model_stage(
            cfg,
            &root.join("experts").join(&spec.name),
            &h,
            progress,
            || {
                let ec = cfg.expert.expert_config(derive_seed(seed, &label));
                let (m, curve, _) = train_expert(&base, spec, &ec)?;
                Ok((m, curve))
            },
        )?;
        experts.push(e);
        expert_hashes.push(h);
    }
    let tvs = task_vectors(&base, &experts)?;
    let merge_hash = |method: &str| {
        hash_of(&(
            "merge",
            method,
            seed,
            &base_hash,
            &expert_hashes,
            &cfg.merge,
            &cfg.eval,
        ))
    };

    let mut records = vec![eval(&base, "base")?];
    for (spec, e) in specs.iter().zip(&experts) {
        records.push(eval(e, &format!("expert:{}", spec.name))?);
    }

    for method in ["average", "ta", "ties", "dare-ta", "dare-ties"] {
        if !wants(cfg, method) {
            continue;
        }
        let rows = stage(
            cfg,
            &root.join("merges").join(method),
            &merge_hash(method),
            progress,
            |d| read_records(&d.join("results.json")),
            |d| {
                let grid: Vec<f64> = if method == "average" {
                    vec![1.0]
                } else {
                    cfg.merge.lambda_grid.clone()
                };
                let mut rows = Vec::new();
                for &l in &grid {
                    let m = merge_baseline(
                        method,
                        &base,
                        &tvs,
                        &[l],
                        &cfg.merge,
                        derive_seed(seed, "dare"),
                    )?;
                    let name = if method == "average" {
                        method.to_string()
                    } else {
                        format!("{method}@{}", p.fmt(l))
                    };
                    rows.push(eval(&m, &name)?);
                }
                write_records(&d.join("results.json"), &rows)?;
                Ok(rows)
            },
        )?;
        if method != "average" {
            if let Some(best) = best_of(&rows) {
                let mut b = best.clone();
                b.name = method.to_string();
                records.extend(rows.iter().cloned());
                records.push(b);
                continue;
            }
        }
        records.extend(rows);
    }

    let calib =
        CalibrationSet::generate(&specs, cfg.merge.samples, derive_seed(seed, "calibration"))?;
    let align_cfg = cfg.merge.align_config(mc.n_blocks, seed);
    let needs_expert = wants(cfg, "expert") || wants(cfg, "expert-pp");
    let mut expert_descent = None;
    let mut pp_descent = None;
    if needs_expert {
        let problem = AlignmentProblem::new(&base, &tvs, &experts, &calib, align_cfg.clone())?;
        let dir = root.join("merges").join("expert");
        let (stage1, rec, descent) = stage(
            cfg,
            &dir,
            &merge_hash("expert"),
            progress,
            |d| {
                let (_, c) = checkpoint::load_layer(&d.join("coefficients.emck"))?;
                let rec = read_records(&d.join("results.json"))?;
                Ok((c, rec, read_descent(d)?))
            },
            |d| {
                let fit = fit_expert(&problem, &cfg.merge)?;
                let merged = align::apply_coefficients(&base, &tvs, &fit.coefficients)?;
                write_expert_outputs(d, mc, &fit, &merged, p)?;
                let rec = vec![eval(&merged, "expert")?];
                write_records(&d.join("results.json"), &rec)?;
                Ok((fit.coefficients, rec, Descent::of(&fit.log)))
            },
        )?;
        expert_descent = Some(descent);
        if wants(cfg, "expert") {
            records.extend(rec);
        }
        if wants(cfg, "expert-pp") {
            let (rec, descent) = stage(
                cfg,
                &root.join("merges").join("expert-pp"),
                &merge_hash("expert-pp"),
                progress,
                |d| Ok((read_records(&d.join("results.json"))?, read_descent(d)?)),
                |d| {
                    let pp = fit_pp_problem(&problem, &stage1, &cfg.merge.plan_config())?;
                    let merged = apply_chunk_coefficients(&base, &tvs, &pp.plan, &pp.coefficients)?;
                    write_pp_outputs(d, mc, &pp, &merged, p)?;
                    let rec = vec![eval(&merged, "expert-pp")?];
                    write_records(&d.join("results.json"), &rec)?;
                    Ok((rec, Descent::of(&pp.log)))
                },
            )?;
            pp_descent = Some(descent);
            records.extend(rec);
        }
    }
    if wants(cfg, "expert-noreg") {
        let nr_cfg = align::AlignConfig {
            use_regularizer: false,
            ..align_cfg.clone()
        };
        let rec = stage(
            cfg,
            &root.join("merges").join("expert-noreg"),
            &merge_hash("expert-noreg"),
            progress,
            |d| read_records(&d.join("results.json")),
            |d| {
                let problem = AlignmentProblem::new(&base, &tvs, &experts, &calib, nr_cfg)?;
                let fit = fit_expert(&problem, &cfg.merge)?;
                let merged = align::apply_coefficients(&base, &tvs, &fit.coefficients)?;
                write_expert_outputs(d, mc, &fit, &merged, p)?;
                let rec = vec![eval(&merged, "expert-noreg")?];
                write_records(&d.join("results.json"), &rec)?;
                Ok(rec)
            },
        )?;
        records.extend(rec);
    }
    if wants(cfg, "mixture") {
        let h = hash_of(&("mixture", seed, &base_hash, &cfg.mixture));
        let m = model_stage(cfg, &root.join("mixture"), &h, progress, || {
            let ec = cfg.mixture.expert_config(derive_seed(seed, "mixture"));
            let (m, curve, _) = train_mixture(&base, &specs, &ec)?;
            Ok((m, curve))
        })?;
        records.push(eval(&m, "mixture")?);
    }

    let report_dir = root.join("report");
    let results: Vec<(String, EvalResult)> = records
        .iter()
        .map(|r| (r.name.clone(), r.result()))
        .collect();
    report::emit_results_table(&results, &report_dir, p)?;
    write_records(&report_dir.join("results.json"), &records)?;
    write_string(&report_dir.join("config.toml"), &cfg.to_toml())?;
    Ok(SeedSummary {
        seed,
        records,
        expert_descent,
        pp_descent,
        dir: root,
    })
}

/// Macro accuracy per method (rows) and seed (columns) with the mean.
pub fn summary_table(seeds: &[SeedSummary], p: Precision) -> Table {
    let mut header = vec!["method".to_string()];
    header.extend(seeds.iter().map(|s| format!("seed-{}", s.seed)));
    header.push("mean".into());
    let mut t = Table::new(header);
    let Some(first) = seeds.first() else {
        return t;
    };
    for r in &first.records {
        let vals: Vec<Option<f64>> = seeds.iter().map(|s| s.macro_of(&r.name)).collect();
        let mut row = vec![r.name.clone()];
        row.extend(vals.iter().map(|v| v.map_or("-".to_string(), |x| p.fmt(x))));
        let present: Vec<f64> = vals.iter().flatten().copied().collect();
        let mean = present.iter().sum::<f64>() / present.len().max(1) as f64;
        row.push(p.fmt(mean));
        t.rows.push(row);
    }
    t
}

pub fn run_pipeline(
    cfg: &RunConfig,
    progress: &mut dyn FnMut(&str),
) -> Result<RunSummary, CliError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    write_string(&cfg.out_dir.join("config.toml"), &cfg.to_toml())?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        seeds.push(run_seed(cfg, seed, progress)?);
    }
    let p = precision(cfg);
    let table = summary_table(&seeds, p);
    report::write_table(&cfg.out_dir.join("summary.csv"), &table)?;
    let text = table.to_text();
    write_string(&cfg.out_dir.join("summary.txt"), &text)?;
    Ok(RunSummary {
        seeds,
        summary_text: text,
    })
}

/// Specs of the configured suite, by name.
pub fn spec_by_name(cfg: &RunConfig, name: &str) -> Result<TaskSpec, CliError> {
    cfg.tasks
        .specs()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| CliError::new(ErrorClass::Config, format!("unknown task {name}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        let values = [
            0.015000000000000001,
            1.0 / 3.0,
            0.1 + 0.2,
            5e-324,
            0.49833333333333335,
        ];
        let records: Vec<EvalRecord> = values
            .iter()
            .map(|&v| EvalRecord {
                name: format!("{v}"),
                tasks: vec![TaskRow {
                    task: "t".into(),
                    accuracy: v,
                    samples: 3,
                }],
                macro_avg: v,
            })
            .collect();
        write_records(&p, &records).unwrap();
        let back = read_records(&p).unwrap();
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(a.macro_avg.to_bits(), b.macro_avg.to_bits());
            assert_eq!(a.tasks[0].accuracy.to_bits(), b.tasks[0].accuracy.to_bits());
        }
    }
}
