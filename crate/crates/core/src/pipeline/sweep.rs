use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, normalized_metric, train_multitask, Method, RunRecord, TrainConfig};
use crate::data::{split_train_val, MultiTaskDataset};
use crate::error::{Error, Result};
use crate::losses::Teachers;
use crate::models::{EncoderConfig, ModelBundle, TaskSpec};

/// Fraction of the training set held out to score sweep trials.
pub const SWEEP_VAL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// One lambda shared by every task: `|grid|` trials.
    #[default]
    Shared,
    /// An independent lambda per task: `|grid|^T` trials.
    PerTask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTrial {
    pub lambdas: BTreeMap<String, f64>,
    pub metrics: BTreeMap<String, f64>,
    pub normalized: BTreeMap<String, f64>,
    /// Mean of the normalized metrics.
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub trials: Vec<SweepTrial>,
    pub best: usize,
    /// Teacher metrics on the held-out split, the normalization reference.
    pub stl_metrics: BTreeMap<String, f64>,
    /// Retrained on the full training set with the winning lambdas.
    pub model: ModelBundle,
    pub record: RunRecord,
}

impl SweepOutcome {
    pub fn best_lambdas(&self) -> &BTreeMap<String, f64> {
        &self.trials[self.best].lambdas
    }

    pub fn report_csv(&self, tasks: &[TaskSpec]) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["trial".to_string()];
        header.extend(tasks.iter().map(|t| format!("lambda_{}", t.id)));
        header.extend(tasks.iter().map(|t| format!("metric_{}", t.id)));
        header.extend(tasks.iter().map(|t| format!("normalized_{}", t.id)));
        header.push("score".into());
        header.push("chosen".into());
        w.write_record(&header)?;
        for (i, trial) in self.trials.iter().enumerate() {
            let mut line = vec![i.to_string()];
            line.extend(tasks.iter().map(|t| format!("{:?}", trial.lambdas[&t.id])));
            line.extend(tasks.iter().map(|t| format!("{:?}", trial.metrics[&t.id])));
            line.extend(tasks.iter().map(|t| format!("{:?}", trial.normalized[&t.id])));
            line.push(format!("{:?}", trial.score));
            line.push(u8::from(i == self.best).to_string());
            w.write_record(&line)?;
        }
        w.into_inner().map_err(|e| Error::Format(e.to_string()))
    }
}

fn assignments(tasks: &[TaskSpec], grid: &[f64], mode: SweepMode) -> Vec<BTreeMap<String, f64>> {
    match mode {
        SweepMode::Shared => grid
            .iter()
            .map(|&l| tasks.iter().map(|t| (t.id.clone(), l)).collect())
            .collect(),
        SweepMode::PerTask => {
            let mut out: Vec<Vec<f64>> = vec![Vec::new()];
            for _ in tasks {
                out = out
                    .into_iter()
                    .flat_map(|prefix| {
                        grid.iter().map(move |&l| {
                            let mut p = prefix.clone();
                            p.push(l);
                            p
                        })
                    })
                    .collect();
            }
            out.into_iter()
                .map(|ls| tasks.iter().map(|t| t.id.clone()).zip(ls).collect())
                .collect()
        }
    }
}

/// Trains one `kd` run per grid assignment on 90% of `train`, scores each on
/// the held-out 10% by the mean STL-normalized metric, picks the best
/// (ties go to the smaller lambda) and retrains on all of `train`. The
/// final run's record is evaluated on `eval`.
#[allow(clippy::too_many_arguments)]
pub fn lambda_sweep(
    tasks: &[TaskSpec],
    train: &MultiTaskDataset,
    eval: &MultiTaskDataset,
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
    teachers: &Teachers,
    grid: &[f64],
    mode: SweepMode,
) -> Result<SweepOutcome> {
    sweep(tasks, train, eval, encoder, cfg, teachers, grid, mode, true)
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    tasks: &[TaskSpec],
    train: &MultiTaskDataset,
    eval: &MultiTaskDataset,
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
    teachers: &Teachers,
    grid: &[f64],
    mode: SweepMode,
    parallel: bool,
) -> Result<SweepOutcome> {
    if cfg.method != Method::Kd {
        return Err(Error::Config(format!("the lambda sweep needs method kd, not {}", cfg.method)));
    }
    if grid.is_empty() || grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::Config("sweep grid must be a non-empty list of lambdas >= 0".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let (fit, held_out) = split_train_val(train, SWEEP_VAL_FRACTION, cfg.seed)?;
    let mut stl_metrics = BTreeMap::new();
    for t in tasks {
        let teacher = teachers.get(&t.id).ok_or_else(|| Error::MissingTeacher(t.id.clone()))?;
        let m = evaluate(teacher, &held_out)?;
        stl_metrics.insert(t.id.clone(), m.get(&t.id).copied().unwrap_or(f64::NAN));
    }

    let plan = assignments(tasks, &grid, mode);
    let trial = |lambdas: &BTreeMap<String, f64>| -> Result<SweepTrial> {
        let specs: Vec<TaskSpec> = tasks
            .iter()
            .map(|t| t.clone().with_weights(t.w, lambdas[&t.id]))
            .collect();
        let (model, _) = train_multitask(&specs, &fit, &held_out, encoder, cfg, Some(teachers), None)?;
        let metrics = evaluate(&model, &held_out)?;
        let normalized: BTreeMap<String, f64> = tasks
            .iter()
            .map(|t| (t.id.clone(), normalized_metric(t.loss, metrics[&t.id], stl_metrics[&t.id])))
            .collect();
        let score = normalized.values().sum::<f64>() / normalized.len() as f64;
        Ok(SweepTrial {
            lambdas: lambdas.clone(),
            metrics,
            normalized,
            score,
        })
    };
    let trials: Vec<SweepTrial> = if parallel {
        plan.par_iter().map(trial).collect::<Result<_>>()?
    } else {
        plan.iter().map(trial).collect::<Result<_>>()?
    };

    let mut best = 0;
    for (i, t) in trials.iter().enumerate() {
        if t.score > trials[best].score {
            best = i;
        }
    }
    let specs: Vec<TaskSpec> = tasks
        .iter()
        .map(|t| t.clone().with_weights(t.w, trials[best].lambdas[&t.id]))
        .collect();
    let (model, record) = train_multitask(&specs, train, eval, encoder, cfg, Some(teachers), None)?;
    Ok(SweepOutcome {
        trials,
        best,
        stl_metrics,
        model,
        record,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_scale_clash, ScaleClashParams};
    use crate::pipeline::train_single_task;

    fn setup() -> (MultiTaskDataset, MultiTaskDataset, EncoderConfig, TrainConfig, Teachers) {
        let ds = gen_scale_clash(&ScaleClashParams::new(240, 4, 1)).unwrap();
        let (tr, va) = split_train_val(&ds, 0.2, 1).unwrap();
        let enc = EncoderConfig::new(4, vec![8, 4]).with_taps(vec![1]);
        let mut cfg = TrainConfig::new(Method::Stl, 2, 0.01, 24, 3);
        let mut teachers = Teachers::new();
        for spec in tr.task_specs() {
            let (t, _) = train_single_task(&spec, &tr, &va, &enc, &cfg).unwrap();
            teachers.insert(spec.id.clone(), t);
        }
        cfg.method = Method::Kd;
        (tr, va, enc, cfg, teachers)
    }

    #[test]
    fn assignment_counts() {
        let tasks = [
            TaskSpec::new("a", crate::models::LossKind::L1, 1),
            TaskSpec::new("b", crate::models::LossKind::L1, 1),
        ];
        let grid = [1.0, 5.0, 10.0, 20.0];
        assert_eq!(assignments(&tasks, &grid, SweepMode::Shared).len(), 4);
        let per = assignments(&tasks, &grid, SweepMode::PerTask);
        assert_eq!(per.len(), 16);
        assert_eq!(per[1]["a"], 1.0);
        assert_eq!(per[1]["b"], 5.0);
    }

    #[test]
    fn single_point_grid() {
        let (tr, va, enc, cfg, teachers) = setup();
        let out = lambda_sweep(&tr.task_specs(), &tr, &va, &enc, &cfg, &teachers, &[5.0], SweepMode::Shared).unwrap();
        assert_eq!(out.trials.len(), 1);
        assert_eq!(out.best, 0);
        assert!(out.best_lambdas().values().all(|&l| l == 5.0));
        assert_eq!(out.record.epochs(), cfg.epochs);
    }

    #[test]
    fn parallel_matches_serial() {
        let (tr, va, enc, cfg, teachers) = setup();
        let tasks = tr.task_specs();
        let grid = [20.0, 1.0, 5.0];
        let a = sweep(&tasks, &tr, &va, &enc, &cfg, &teachers, &grid, SweepMode::Shared, true).unwrap();
        let b = sweep(&tasks, &tr, &va, &enc, &cfg, &teachers, &grid, SweepMode::Shared, false).unwrap();
        assert_eq!(a.trials, b.trials);
        assert_eq!(a.best, b.best);
        assert_eq!(a.report_csv(&tasks).unwrap(), b.report_csv(&tasks).unwrap());
        assert_eq!(a.trials.len(), 3);
        let lambdas: Vec<f64> = a.trials.iter().map(|t| t.lambdas["cls"]).collect();
        assert_eq!(lambdas, vec![1.0, 5.0, 20.0]);
        let top = a.trials.iter().map(|t| t.score).fold(f64::MIN, f64::max);
        assert_eq!(a.trials[a.best].score, top);
        assert!(a.trials[..a.best].iter().all(|t| t.score < top));
    }

    #[test]
    fn rejects_bad_inputs() {
        let (tr, va, enc, cfg, teachers) = setup();
        let tasks = tr.task_specs();
        assert!(lambda_sweep(&tasks, &tr, &va, &enc, &cfg, &teachers, &[], SweepMode::Shared).is_err());
        let uni = TrainConfig {
            method: Method::Uniform,
            ..cfg.clone()
        };
        assert!(lambda_sweep(&tasks, &tr, &va, &enc, &uni, &teachers, &[1.0], SweepMode::Shared).is_err());
    }
}
