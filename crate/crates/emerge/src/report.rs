//! CSV and aligned-text tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use emerge_core::align::TrainLog;
use emerge_core::chunked::{kind_name, ImportanceReport, Stage};
use emerge_core::tasks::EvalResult;
use emerge_core::{BlockUnit, LayerCoefficients, ModelConfig};

use crate::checkpoint::{write_atomic, CheckpointError};

/// Number formatting for every emitted table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// Six significant digits.
    #[default]
    Short,
    /// Shortest representation that round-trips.
    Raw,
}

impl Precision {
    pub fn fmt(self, x: f64) -> String {
        match self {
            Precision::Raw => format!("{x}"),
            Precision::Short => sig6(x),
        }
    }
}

/// `%g`-style formatting with six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// In-memory table rendered as CSV or aligned text.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: Vec<String>) -> Self {
        Table {
            header,
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }

    pub fn to_text(&self) -> String {
        let cols = self.header.len();
        let mut widths = vec![0; cols];
        for r in std::iter::once(&self.header).chain(&self.rows) {
            for (i, c) in r.iter().enumerate() {
                widths[i] = widths[i].max(c.chars().count());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, r: &[String]| {
            for (i, c) in r.iter().enumerate() {
                if i == 0 {
                    let _ = write!(out, "{c:<w$}", w = widths[i]);
                } else {
                    let _ = write!(out, "  {c:>w$}", w = widths[i]);
                }
            }
            out.push('\n');
        };
        line(&mut out, &self.header);
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        line(&mut out, &rule);
        for r in &self.rows {
            line(&mut out, r);
        }
        out
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CheckpointError> {
    write_atomic(path, text.as_bytes())
}

/// Block-unit importance per stage (rows) and kind (columns), normalized to sum to one.
pub fn stage_kind_table(report: &ImportanceReport, p: Precision) -> Table {
    let grid = report.stage_kind_grid();
    let mut header = vec!["stage".to_string()];
    header.extend(BlockUnit::ALL.iter().map(|k| k.name().to_string()));
    header.push("total".into());
    let mut t = Table::new(header);
    let mut col_totals = [0.0; 9];
    for (s, stage) in Stage::ALL.iter().enumerate() {
        let mut row = vec![stage.name().to_string()];
        for (k, v) in grid[s].iter().enumerate() {
            row.push(p.fmt(*v));
            col_totals[k] += v;
        }
        row.push(p.fmt(grid[s].iter().sum()));
        t.rows.push(row);
    }
    let mut total = vec!["total".to_string()];
    total.extend(col_totals.iter().map(|v| p.fmt(*v)));
    total.push(p.fmt(col_totals.iter().sum()));
    t.rows.push(total);
    t
}

/// For each kind, the share of its block importance held by each stage.
pub fn kind_stage_share_table(report: &ImportanceReport, p: Precision) -> Table {
    let grid = report.stage_kind_grid();
    let mut header = vec!["kind".to_string()];
    header.extend(Stage::ALL.iter().map(|s| s.name().to_string()));
    let mut t = Table::new(header);
    for (k, kind) in BlockUnit::ALL.iter().enumerate() {
        let col: f64 = (0..3).map(|s| grid[s][k]).sum();
        let mut row = vec![kind.name().to_string()];
        for s in 0..3 {
            row.push(p.fmt(if col > 0.0 { grid[s][k] / col } else { 0.0 }));
        }
        t.rows.push(row);
    }
    t
}

/// One row per unit with importance, its factors and parameter count.
pub fn unit_importance_table(report: &ImportanceReport, p: Precision) -> Table {
    let mut header: Vec<String> = ["unit", "kind", "stage", "params", "importance", "raw"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for k in 0..report.factors.len() {
        header.push(format!("factor_{k}"));
    }
    let mut t = Table::new(header);
    for (u, unit) in report.units().into_iter().enumerate() {
        let stage = unit
            .block()
            .map_or("-", |b| Stage::of(b, report.config.n_blocks).name());
        let mut row = vec![
            unit.name(),
            kind_name(unit).to_string(),
            stage.to_string(),
            report.param_counts[u].to_string(),
            p.fmt(report.importance[u]),
            p.fmt(report.raw[u]),
        ];
        for f in &report.factors {
            row.push(p.fmt(f[u]));
        }
        t.rows.push(row);
    }
    t
}

/// Writes the importance CSVs into `dir` and returns their paths.
pub fn emit_importance_tables(
    report: &ImportanceReport,
    dir: &Path,
    p: Precision,
) -> Result<Vec<PathBuf>, CheckpointError> {
    let files = [
        ("importance_stage_kind.csv", stage_kind_table(report, p)),
        (
            "importance_kind_stage_share.csv",
            kind_stage_share_table(report, p),
        ),
        ("importance_units.csv", unit_importance_table(report, p)),
    ];
    let mut out = Vec::new();
    for (name, table) in files {
        let path = dir.join(name);
        write_text(&path, &table.to_csv())?;
        out.push(path);
    }
    Ok(out)
}

/// Methods as rows, tasks plus macro average as columns.
pub fn results_table(results: &[(String, EvalResult)], p: Precision) -> Table {
    let mut header = vec!["method".to_string()];
    if let Some((_, first)) = results.first() {
        header.extend(first.tasks.iter().map(|t| t.task.clone()));
    }
    header.push("avg".into());
    let mut t = Table::new(header);
    for (method, r) in results {
        let mut row = vec![method.clone()];
        row.extend(r.tasks.iter().map(|x| p.fmt(x.accuracy)));
        row.push(p.fmt(r.macro_avg));
        t.rows.push(row);
    }
    t
}

/// Writes `results.csv` and `results.txt`; returns the text table.
pub fn emit_results_table(
    results: &[(String, EvalResult)],
    dir: &Path,
    p: Precision,
) -> Result<String, CheckpointError> {
    let t = results_table(results, p);
    write_text(&dir.join("results.csv"), &t.to_csv())?;
    let text = t.to_text();
    write_text(&dir.join("results.txt"), &text)?;
    Ok(text)
}

/// Per-step losses of a coefficient fit.
pub fn train_log_table(log: &TrainLog, p: Precision) -> Table {
    let k = log.final_record.hidden.len();
    let mut header = vec!["step".to_string(), "total".to_string()];
    header.extend((0..k).map(|i| format!("hidden_{i}")));
    header.extend((0..k).map(|i| format!("logit_{i}")));
    header.push("regularizer".into());
    let mut t = Table::new(header);
    let records = log.records.iter().chain(std::iter::once(&log.final_record));
    for (step, r) in records.enumerate() {
        let mut row = vec![step.to_string(), p.fmt(r.total)];
        row.extend(r.hidden.iter().map(|x| p.fmt(*x)));
        row.extend(r.logit.iter().map(|x| p.fmt(*x)));
        row.push(p.fmt(r.regularizer));
        t.rows.push(row);
    }
    t
}

/// Coefficient snapshots, one row per (step, entry).
pub fn snapshot_table(log: &TrainLog, p: Precision) -> Table {
    let mut t = Table::new(vec!["step".into(), "index".into(), "value".into()]);
    for (step, values) in &log.snapshots {
        for (i, v) in values.iter().enumerate() {
            t.rows
                .push(vec![step.to_string(), i.to_string(), p.fmt(*v)]);
        }
    }
    t
}

/// Layer-wise coefficients, one row per unit and one column per expert.
pub fn layer_coefficient_table(
    config: &ModelConfig,
    coeffs: &LayerCoefficients,
    p: Precision,
) -> Table {
    let mut header = vec!["unit".to_string()];
    header.extend((0..coeffs.experts()).map(|k| format!("alpha_{k}")));
    let mut t = Table::new(header);
    for (u, unit) in config.units().into_iter().enumerate() {
        let mut row = vec![unit.name()];
        row.extend(coeffs.alpha.iter().map(|a| p.fmt(a[u])));
        t.rows.push(row);
    }
    t
}

pub fn write_table(path: &Path, table: &Table) -> Result<(), CheckpointError> {
    write_text(path, &table.to_csv())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(1.0), "1");
        assert_eq!(sig6(0.123456789), "0.123457");
        assert_eq!(sig6(123456.7), "123457");
        assert_eq!(sig6(1234567.0), "1.23457e6");
        assert_eq!(sig6(-0.000012345678), "-1.23457e-5");
        assert_eq!(sig6(0.25), "0.25");
        assert_eq!(Precision::Raw.fmt(0.1), "0.1");
    }

    #[test]
    fn text_table_aligns_columns() {
        let mut t = Table::new(vec!["method".into(), "a".into()]);
        t.rows.push(vec!["ta".into(), "0.5".into()]);
        let text = t.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines.iter().all(|l| l.len() == lines[0].len()));
    }

    #[test]
    fn csv_uses_newlines() {
        let mut t = Table::new(vec!["x".into(), "y".into()]);
        t.rows.push(vec!["1".into(), "2".into()]);
        assert_eq!(t.to_csv(), "x,y\n1,2\n");
    }
}
