use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const FAST: &str = r#"
seeds = [0]
out_dir = "run"
[base]
steps = 20
[expert]
steps = 20
threshold = 0.0
[mixture]
steps = 20
[merge]
steps = 4
samples = 2
[eval]
samples = 12
"#;

fn emerge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emerge"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = emerge(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = emerge(dir, args);
    assert_eq!(out.status.code(), Some(1), "{args:?} should fail");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(
        err.trim_end().lines().count(),
        1,
        "single-line error, got {err:?}"
    );
    err.trim_end().to_string()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("fast.toml"), FAST).unwrap();
    dir
}

/// Accuracy columns of the single data row of an eval table.
fn accuracies(table: &str) -> Vec<String> {
    let row = table.lines().nth(2).expect("data row");
    row.split_whitespace().skip(1).map(str::to_string).collect()
}

#[test]
fn help_lists_flags_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    for sub in [
        "gen-tasks",
        "train-base",
        "train-expert",
        "train-mixture",
        "merge",
        "analyze-importance",
        "eval",
        "report",
        "run",
    ] {
        let text = ok(dir.path(), &[sub, "--help"]);
        assert!(text.contains("--config"), "{sub}");
        assert!(text.contains("default"), "{sub}");
    }
    let merge = ok(dir.path(), &["merge", "--help"]);
    for flag in [
        "--gamma",
        "--temp",
        "--beta",
        "--samples",
        "--steps",
        "--lr",
        "--seed",
        "--hidden-layers",
        "--no-hidden-loss",
        "--no-logit-loss",
        "--no-regularizer",
        "--budget-factor",
        "--kappa",
        "--chunk-all",
        "--lambda",
        "--keep",
        "--drop",
    ] {
        assert!(merge.contains(flag), "merge --help lacks {flag}");
    }
    assert!(merge.contains("[default: 0.8]"));
    assert!(merge.contains("[default: 1.2]"));
}

#[test]
fn step_by_step_workflow() {
    let ws = workspace();
    let d = ws.path();
    let c = ["--config", "fast.toml"];
    let with =
        |args: &[&str]| -> Vec<String> { c.iter().chain(args).map(|s| s.to_string()).collect() };
    let run = |args: &[&str]| {
        let a = with(args);
        ok(d, &a.iter().map(String::as_str).collect::<Vec<_>>())
    };

    run(&["gen-tasks"]);
    assert!(d.join("tasks/tasks.json").exists());
    assert!(d.join("tasks/config.toml").exists());
    run(&["train-base"]);
    for t in ["modadd", "reverse", "parity"] {
        run(&["train-expert", "--task", t]);
    }
    assert!(d.join("config.toml").exists());

    run(&[
        "merge", "--method", "ta", "--lambda", "0,0,0", "--out", "zero",
    ]);
    let merged = run(&["eval", "--model", "zero/ta/model.emck"]);
    let base = run(&["eval", "--model", "base.emck"]);
    assert_eq!(accuracies(&merged), accuracies(&base));

    run(&["merge", "--method", "ta"]);
    assert!(d.join("merges/ta/grid.json").exists());
    run(&[
        "merge",
        "--method",
        "expert",
        "--gamma",
        "2",
        "--beta",
        "modadd=2,parity=0.5",
    ]);
    assert!(d.join("merges/expert/coefficients.emck").exists());
    let cfg = fs::read_to_string(d.join("merges/expert/config.toml")).unwrap();
    assert!(cfg.contains("gamma = 2.0"), "{cfg}");
    assert!(cfg.contains("betas = [2.0, 1.0, 0.5]"), "{cfg}");
    let pp = run(&["merge", "--method", "expert-pp"]);
    assert!(pp.contains("expert-pp"));
    assert!(d.join("merges/expert-pp/chunk_coefficients.emck").exists());
    assert!(d
        .join("merges/expert-pp/importance_stage_kind.csv")
        .exists());
    run(&[
        "merge",
        "--method",
        "expert-pp",
        "--chunk-all",
        "2",
        "--out",
        "all2",
    ]
    .iter()
    .copied()
    .chain(["--stage1", "merges/expert/coefficients.emck"])
    .collect::<Vec<_>>());
    run(&["analyze-importance", "--out", "imp"]);
    assert!(d.join("imp/importance_units.csv").exists());
    run(&["eval", "--model", "merges/expert/model.emck", "--out", "ev"]);
    let rep = run(&["report", "--runs", "ev"]);
    assert!(rep.contains("model"));
}

#[test]
fn expert_pp_without_stage_one_is_a_config_error() {
    let ws = workspace();
    let d = ws.path();
    ok(d, &["--config", "fast.toml", "train-base"]);
    for t in ["modadd", "reverse", "parity"] {
        ok(d, &["--config", "fast.toml", "train-expert", "--task", t]);
    }
    let e = fails(
        d,
        &[
            "--config",
            "fast.toml",
            "merge",
            "--method",
            "expert-pp",
            "--out",
            "nowhere",
        ],
    );
    assert!(e.starts_with("CONFIG: "), "{e}");
}

#[test]
fn errors_are_single_classified_lines() {
    let ws = workspace();
    let d = ws.path();
    fs::write(d.join("bad.toml"), "[merge]\ngamma = -1.0\n").unwrap();
    assert!(fails(d, &["--config", "bad.toml", "run"]).starts_with("CONFIG: "));
    fs::write(d.join("typo.toml"), "[merge]\ngama = 1.0\n").unwrap();
    assert!(fails(d, &["--config", "typo.toml", "run"]).starts_with("CONFIG: "));
    assert!(fails(d, &["--config", "missing.toml", "run"]).starts_with("IO: "));
    assert!(fails(
        d,
        &["--config", "fast.toml", "train-expert", "--task", "sorting"]
    )
    .starts_with("CONFIG: "));

    fs::write(d.join("junk.emck"), b"EMCK\x01garbage").unwrap();
    let e = fails(
        d,
        &[
            "--config",
            "fast.toml",
            "eval",
            "--model",
            "junk.emck",
            "--out",
            "ev",
        ],
    );
    assert!(e.starts_with("IO: "), "{e}");
    assert!(!d.join("ev").exists());

    ok(d, &["--config", "fast.toml", "train-base", "--steps", "1"]);
    let e = fails(
        d,
        &[
            "--config",
            "fast.toml",
            "train-expert",
            "--task",
            "parity",
            "--steps",
            "1",
            "--threshold",
            "1.0",
        ],
    );
    assert!(e.starts_with("THRESHOLD: "), "{e}");
}

fn reports(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for name in ["summary.csv", "summary.txt"] {
        out.push((name.to_string(), fs::read(root.join(name)).unwrap()));
    }
    for name in ["results.csv", "results.txt", "results.json"] {
        let p = root.join("seed-0/report").join(name);
        out.push((p.display().to_string(), fs::read(p).unwrap()));
    }
    out
}

fn stage_dirs(root: &Path, out: &mut Vec<std::path::PathBuf>) {
    for e in fs::read_dir(root).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            if p.join("stage.hash").exists() {
                out.push(p.clone());
            }
            stage_dirs(&p, out);
        }
    }
}

#[test]
fn pipeline_caches_stages_and_reproduces_reports() {
    let ws = workspace();
    let d = ws.path();
    let first = emerge(d, &["--config", "fast.toml", "run"]);
    assert!(
        first.status.success(),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let before = reports(&d.join("run"));

    let mut dirs = Vec::new();
    stage_dirs(&d.join("run"), &mut dirs);
    assert!(dirs.len() >= 12);
    for s in &dirs {
        assert!(s.join("config.toml").exists(), "{}", s.display());
        assert!(!s.join("PARTIAL").exists());
    }
    assert!(d.join("run/seed-0/report/config.toml").exists());

    let second = emerge(d, &["--config", "fast.toml", "run"]);
    let log = String::from_utf8(second.stderr).unwrap();
    assert!(log.lines().all(|l| l.starts_with("skip")), "{log}");
    assert_eq!(reports(&d.join("run")), before);

    // a changed merge setting reruns only the merges
    let third = emerge(d, &["--config", "fast.toml", "run", "--out-dir", "run"]);
    assert!(third.status.success());
    fs::write(
        d.join("changed.toml"),
        FAST.replace("steps = 4", "steps = 5"),
    )
    .unwrap();
    let fourth = emerge(d, &["--config", "changed.toml", "run"]);
    let log = String::from_utf8(fourth.stderr).unwrap();
    assert!(log.contains("skip run/seed-0/base"), "{log}");
    assert!(log.contains("run  run/seed-0/merges/expert"), "{log}");

    // an interrupted stage is recomputed
    fs::write(d.join("run/seed-0/merges/ta/PARTIAL"), "").unwrap();
    let fifth = emerge(d, &["--config", "changed.toml", "run"]);
    let log = String::from_utf8(fifth.stderr).unwrap();
    assert!(log.contains("run  run/seed-0/merges/ta"), "{log}");
}
