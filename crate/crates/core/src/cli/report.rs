use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{CliResult, Failure, RunInfo, METRICS, SUMMARY};
use crate::error::{Error, Result};
use crate::models::LossKind;
use crate::pipeline::{normalized_metric, read_metrics, Method, RunRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub dir: PathBuf,
    pub run: String,
    pub method: Method,
    pub metrics: BTreeMap<String, f64>,
    /// Relative to the STL run of the task, when one was given.
    pub normalized: BTreeMap<String, f64>,
    /// Mean of the normalized metrics; `None` unless every task has one.
    pub average: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    /// Task columns in order of first appearance.
    pub tasks: Vec<String>,
    pub rows: Vec<ReportRow>,
    /// Per-epoch rows of every run, in CSV.
    pub curves: Vec<u8>,
}

fn read_run(dir: &Path) -> Result<(RunInfo, RunRecord)> {
    fn ctx(file: &'static str) -> impl Fn(Error) -> Error {
        move |e| Error::Format(format!("{file}: {e}"))
    }
    let text = fs::read_to_string(dir.join(SUMMARY)).map_err(|e| ctx(SUMMARY)(e.into()))?;
    let info: RunInfo = serde_json::from_str(&text).map_err(|e| ctx(SUMMARY)(e.into()))?;
    let record = read_metrics(&dir.join(METRICS)).map_err(ctx(METRICS))?;
    for t in &info.tasks {
        if !info.summary.tasks.contains_key(&t.id) || record.task_rows(&t.id).next().is_none() {
            return Err(Error::Format(format!("no results for task `{}`", t.id)));
        }
    }
    Ok((info, record))
}

fn run_label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Reads every run directory, skipping (and reporting through `warn`) the
/// ones that are incomplete. Fails when none is usable.
pub fn build_report(dirs: &[PathBuf], mut warn: impl FnMut(String)) -> CliResult<Report> {
    let mut runs = Vec::new();
    for dir in dirs {
        match read_run(dir) {
            Ok(r) => runs.push((dir.clone(), r)),
            Err(e) => warn(format!("skipping {}: {e}", dir.display())),
        }
    }
    if runs.is_empty() {
        return Err(Failure::data("no usable run directory".into()));
    }

    let mut tasks: Vec<String> = Vec::new();
    let mut kinds: BTreeMap<String, LossKind> = BTreeMap::new();
    let mut stl: BTreeMap<String, f64> = BTreeMap::new();
    for (dir, (info, _)) in &runs {
        for t in &info.tasks {
            if !tasks.contains(&t.id) {
                tasks.push(t.id.clone());
                kinds.insert(t.id.clone(), t.loss);
            }
        }
        if info.method == Method::Stl {
            if let [t] = info.tasks.as_slice() {
                if stl.contains_key(&t.id) {
                    warn(format!("{}: an earlier STL run for `{}` is the reference", dir.display(), t.id));
                } else {
                    stl.insert(t.id.clone(), info.summary.tasks[&t.id].final_metric);
                }
            }
        }
    }

    let mut rows = Vec::new();
    let mut curves = csv::Writer::from_writer(Vec::new());
    curves
        .write_record([
            "run",
            "method",
            "epoch",
            "task",
            "task_loss",
            "distill_loss",
            "val_metric",
            "weight",
        ])
        .map_err(Error::from)?;
    for (dir, (info, record)) in &runs {
        let run = run_label(dir);
        let metrics: BTreeMap<String, f64> = info
            .summary
            .tasks
            .iter()
            .map(|(t, s)| (t.clone(), s.final_metric))
            .collect();
        let normalized: BTreeMap<String, f64> = metrics
            .iter()
            .filter_map(|(t, &m)| stl.get(t).map(|&s| (t.clone(), normalized_metric(kinds[t], m, s))))
            .collect();
        let average = (normalized.len() == metrics.len() && !metrics.is_empty())
            .then(|| normalized.values().sum::<f64>() / normalized.len() as f64);
        for r in &record.rows {
            let distill = r
                .distill_loss
                .as_ref()
                .map(|d| format!("{:?}", d.iter().sum::<f64>()))
                .unwrap_or_default();
            curves
                .write_record([
                    run.clone(),
                    info.method.to_string(),
                    r.epoch.to_string(),
                    r.task.clone(),
                    format!("{:?}", r.task_loss),
                    distill,
                    format!("{:?}", r.val_metric),
                    format!("{:?}", r.weight),
                ])
                .map_err(Error::from)?;
        }
        rows.push(ReportRow {
            dir: dir.clone(),
            run,
            method: info.method,
            metrics,
            normalized,
            average,
        });
    }
    let curves = curves.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(Report { tasks, rows, curves })
}

impl Report {
    fn header(&self) -> Vec<String> {
        let mut h = vec!["run".to_string(), "method".into()];
        h.extend(self.tasks.iter().cloned());
        h.extend(self.tasks.iter().map(|t| format!("{t}_normalized")));
        h.push("average".into());
        h
    }

    fn cells(&self, fmt: impl Fn(f64) -> String) -> Vec<Vec<String>> {
        let opt = |v: Option<&f64>| v.map(|&x| fmt(x)).unwrap_or_default();
        self.rows
            .iter()
            .map(|r| {
                let mut line = vec![r.run.clone(), r.method.to_string()];
                line.extend(self.tasks.iter().map(|t| opt(r.metrics.get(t))));
                line.extend(self.tasks.iter().map(|t| opt(r.normalized.get(t))));
                line.push(opt(r.average.as_ref()));
                line
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header())?;
        for line in self.cells(|x| format!("{x:?}")) {
            w.write_record(&line)?;
        }
        w.into_inner().map_err(|e| Error::Format(e.to_string()))
    }

    /// Right-aligned columns, numbers to four decimals, `-` for gaps.
    pub fn to_text(&self) -> String {
        let header = self.header();
        let body: Vec<Vec<String>> = self
            .cells(|x| format!("{x:.4}"))
            .into_iter()
            .map(|l| l.into_iter().map(|c| if c.is_empty() { "-".into() } else { c }).collect())
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| body.iter().map(|l| l[i].len()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let render = |line: &[String]| {
            let cols: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            cols.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = render(&header);
        for l in &body {
            out.push_str(&render(l));
        }
        out
    }
}
