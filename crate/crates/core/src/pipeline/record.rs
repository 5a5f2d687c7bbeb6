use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::higher_is_better;
use crate::error::{Error, Result};
use crate::models::TaskSpec;

/// Epochs covered by the trailing-median summary.
pub const TRAILING_EPOCHS: usize = 20;

/// One `(epoch, task)` line of a training run. Losses are epoch means of
/// the unweighted per-batch values; `weight` is the mean multiplier the
/// task loss received.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordRow {
    pub epoch: usize,
    pub task: String,
    pub task_loss: f64,
    /// Per tap, in tap order; `None` when the task is not distilled.
    pub distill_loss: Option<Vec<f64>>,
    pub val_metric: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunRecord {
    /// Tap points with a distillation column; empty when nothing is distilled.
    pub taps: Vec<usize>,
    pub rows: Vec<RecordRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub final_task_loss: f64,
    /// Sum over taps at the last epoch.
    pub final_distill_loss: Option<f64>,
    pub final_metric: f64,
    pub trailing_median_metric: f64,
    pub best_metric: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs: usize,
    pub tasks: BTreeMap<String, TaskSummary>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl RunRecord {
    pub fn epochs(&self) -> usize {
        self.rows.iter().map(|r| r.epoch + 1).max().unwrap_or(0)
    }

    pub fn task_rows<'a>(&'a self, task: &'a str) -> impl Iterator<Item = &'a RecordRow> + 'a {
        self.rows.iter().filter(move |r| r.task == task)
    }

    pub fn summary(&self, specs: &[TaskSpec]) -> Result<RunSummary> {
        let mut tasks = BTreeMap::new();
        for spec in specs {
            let rows: Vec<&RecordRow> = self.task_rows(&spec.id).collect();
            let Some(last) = rows.last() else {
                return Err(Error::InvalidArgument(format!("record has no rows for `{}`", spec.id)));
            };
            let up = higher_is_better(spec.loss);
            let mut best = rows[0];
            for r in &rows[1..] {
                let better = if up {
                    r.val_metric > best.val_metric
                } else {
                    r.val_metric < best.val_metric
                };
                if better {
                    best = r;
                }
            }
            let tail = rows.len().saturating_sub(TRAILING_EPOCHS);
            tasks.insert(
                spec.id.clone(),
                TaskSummary {
                    final_task_loss: last.task_loss,
                    final_distill_loss: last.distill_loss.as_ref().map(|d| d.iter().sum()),
                    final_metric: last.val_metric,
                    trailing_median_metric: median(rows[tail..].iter().map(|r| r.val_metric).collect()),
                    best_metric: best.val_metric,
                    best_epoch: best.epoch,
                },
            );
        }
        Ok(RunSummary {
            epochs: self.epochs(),
            tasks,
        })
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["epoch".to_string(), "task".into(), "task_loss".into()];
        h.extend(self.taps.iter().map(|t| format!("distill_loss_tap{t}")));
        h.push("val_metric".into());
        h.push("weight".into());
        h
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut line = vec![r.epoch.to_string(), r.task.clone(), format!("{:?}", r.task_loss)];
            match &r.distill_loss {
                Some(d) if d.len() == self.taps.len() => line.extend(d.iter().map(|v| format!("{v:?}"))),
                Some(_) => return Err(Error::InvalidArgument("distill values do not match tap columns".into())),
                None => line.extend(self.taps.iter().map(|_| String::new())),
            }
            line.push(format!("{:?}", r.val_metric));
            line.push(format!("{:?}", r.weight));
            w.write_record(&line)?;
        }
        w.into_inner().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("metrics csv: {m}"));
        let mut rd = csv::Reader::from_reader(bytes);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        let n = header.len();
        if n < 5 || header[..3] != ["epoch", "task", "task_loss"] || header[n - 2..] != ["val_metric", "weight"] {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let taps = header[3..n - 2]
            .iter()
            .map(|h| {
                h.strip_prefix("distill_loss_tap")
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| bad(format!("unexpected column `{h}`")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number `{s}`")));
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let f: Vec<&str> = rec.iter().collect();
            let distill: Vec<&str> = f[3..n - 2].to_vec();
            let distill_loss = if taps.is_empty() || distill.iter().all(|s| s.is_empty()) {
                None
            } else {
                Some(distill.into_iter().map(num).collect::<Result<Vec<_>>>()?)
            };
            rows.push(RecordRow {
                epoch: f[0].parse().map_err(|_| bad(format!("bad epoch `{}`", f[0])))?,
                task: f[1].to_string(),
                task_loss: num(f[2])?,
                distill_loss,
                val_metric: num(f[n - 2])?,
                weight: num(f[n - 1])?,
            });
        }
        Ok(Self { taps, rows })
    }
}

pub fn write_metrics(record: &RunRecord, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, record.to_csv()?)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<RunRecord> {
    RunRecord::from_csv(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LossKind;

    fn record(taps: Vec<usize>) -> RunRecord {
        let mut rows = Vec::new();
        for e in 0..30 {
            for (t, kd) in [("cls", true), ("reg", false)] {
                rows.push(RecordRow {
                    epoch: e,
                    task: t.into(),
                    task_loss: 1.0 / (e as f64 + 1.0),
                    distill_loss: (kd && !taps.is_empty()).then(|| taps.iter().map(|&j| 0.1 * j as f64 + 1e-7).collect()),
                    val_metric: if t == "cls" { e as f64 / 30.0 } else { 30.0 - e as f64 },
                    weight: 1.0 / 3.0,
                });
            }
        }
        RunRecord { taps, rows }
    }

    #[test]
    fn csv_round_trip() {
        for taps in [vec![], vec![2], vec![1, 3]] {
            let r = record(taps);
            let back = RunRecord::from_csv(&r.to_csv().unwrap()).unwrap();
            assert_eq!(back, r);
        }
    }

    #[test]
    fn header_is_stable() {
        let r = record(vec![1, 3]);
        let text = String::from_utf8(r.to_csv().unwrap()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "epoch,task,task_loss,distill_loss_tap1,distill_loss_tap3,val_metric,weight"
        );
        let plain = String::from_utf8(record(vec![]).to_csv().unwrap()).unwrap();
        assert_eq!(plain.lines().next().unwrap(), "epoch,task,task_loss,val_metric,weight");
        assert_eq!(r.to_csv().unwrap(), record(vec![1, 3]).to_csv().unwrap());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/metrics.csv");
        let r = record(vec![1]);
        write_metrics(&r, &p).unwrap();
        assert_eq!(read_metrics(&p).unwrap(), r);
        assert!(RunRecord::from_csv(b"epoch,task\n1,a\n").is_err());
    }

    #[test]
    fn summary_values() {
        let specs = [TaskSpec::new("cls", LossKind::CrossEntropy, 4), TaskSpec::new("reg", LossKind::L1, 1)];
        let s = record(vec![1]).summary(&specs).unwrap();
        assert_eq!(s.epochs, 30);
        let cls = &s.tasks["cls"];
        assert_eq!(cls.final_metric, 29.0 / 30.0);
        assert_eq!(cls.best_epoch, 29);
        // Epochs 10..=29: median of 19.5 / 30.
        assert!((cls.trailing_median_metric - 19.5 / 30.0).abs() < 1e-15);
        assert_eq!(s.tasks["reg"].best_epoch, 29);
        assert_eq!(s.tasks["reg"].final_distill_loss, None);
        assert!((cls.final_distill_loss.unwrap() - 0.1000001).abs() < 1e-15);
    }
}
