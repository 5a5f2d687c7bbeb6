use std::collections::BTreeMap;

use super::{evaluate, lr_at, Method, RecordRow, RunRecord, TrainConfig};
use crate::balancers::{
    frank_wolfe_min_norm, gradnorm_step, uncert_combine, weights_dwa, BalancerState, Strategy,
};
use crate::data::{make_batches, Batch, MultiTaskDataset};
use crate::error::{Error, Result};
use crate::losses::{
    combine, distilled_tasks, forward_losses, InputGroup, LossBreakdown, ObjectiveBatch, Target, Teachers,
};
use crate::models::{Adam, AdaptorKind, EncoderConfig, LossKind, ModelBundle, TaskSpec};
use crate::tensor::{Tape, Tensor, Var};

/// What an observer sees after every optimization step, before the update.
#[derive(Debug)]
pub struct StepEvent<'a> {
    pub epoch: usize,
    pub step: usize,
    /// Gradient of the optimized objective for every parameter it reaches.
    pub gradients: &'a BTreeMap<String, Vec<f64>>,
    pub breakdown: &'a LossBreakdown,
    /// Multiplier applied to each task loss this step, in task order.
    pub weights: &'a [f64],
}

pub type Observer<'o> = &'o mut dyn FnMut(&StepEvent<'_>);

/// Phase A: trains one task alone and returns the frozen teacher.
pub fn train_single_task(
    task: &TaskSpec,
    train: &MultiTaskDataset,
    val: &MultiTaskDataset,
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, RunRecord)> {
    let train = train.single_task(&task.id)?;
    let val = val.single_task(&task.id)?;
    let mut spec = task.clone();
    spec.lambda = 0.0;
    let cfg = TrainConfig {
        method: Method::Stl,
        ..cfg.clone()
    };
    let (bundle, record) = run(&[spec], &train, &val, encoder, &cfg, None, None)?;
    Ok((bundle.freeze(), record))
}

/// Phase B: trains the shared student with `cfg.method`.
pub fn train_multitask(
    tasks: &[TaskSpec],
    train: &MultiTaskDataset,
    val: &MultiTaskDataset,
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
    teachers: Option<&Teachers>,
    observer: Option<Observer<'_>>,
) -> Result<(ModelBundle, RunRecord)> {
    if cfg.method == Method::Kd {
        let teachers = teachers.ok_or_else(|| {
            Error::MissingTeacher(format!(
                "{} (method kd needs a trained teacher per task; run train-single first)",
                tasks.iter().map(|t| t.id.as_str()).collect::<Vec<_>>().join(", ")
            ))
        })?;
        for t in tasks {
            let teacher = teachers.get(&t.id).ok_or_else(|| Error::MissingTeacher(t.id.clone()))?;
            if !teacher.is_frozen() {
                return Err(Error::InvalidArgument(format!("teacher for `{}` is not frozen", t.id)));
            }
        }
    } else if teachers.is_some() {
        return Err(Error::Config(format!("method {} does not use teachers", cfg.method)));
    }
    if cfg.method == Method::Stl && tasks.len() != 1 {
        return Err(Error::Config("method stl trains exactly one task".into()));
    }
    run(tasks, train, val, encoder, cfg, teachers, observer)
}

fn strategy(method: Method) -> Strategy {
    match method {
        Method::Dwa => Strategy::Dwa,
        Method::Uncert => Strategy::Uncert,
        Method::Gradnorm => Strategy::GradNorm,
        Method::Mgda => Strategy::Mgda,
        Method::Stl | Method::Uniform | Method::Kd => Strategy::Uniform,
    }
}

fn target(ds: &MultiTaskDataset, spec: &TaskSpec, idx: &[usize]) -> Result<Target> {
    Ok(match spec.loss {
        LossKind::CrossEntropy => Target::Classes(ds.class_targets(&spec.id, idx)?),
        LossKind::L1 | LossKind::Cosine => Target::Dense(ds.dense_targets(&spec.id, idx)?),
    })
}

fn objective_batch(ds: &MultiTaskDataset, batch: &Batch, tasks: &[TaskSpec]) -> Result<ObjectiveBatch> {
    let mut groups = Vec::new();
    match batch {
        Batch::Shared(idx) => groups.push(InputGroup {
            x: ds.inputs(idx)?,
            targets: tasks
                .iter()
                .map(|s| Ok((s.id.clone(), target(ds, s, idx)?)))
                .collect::<Result<_>>()?,
        }),
        Batch::PerTask(per) => {
            for (id, idx) in per.iter().filter(|(_, idx)| !idx.is_empty()) {
                let spec = tasks
                    .iter()
                    .find(|s| &s.id == id)
                    .ok_or_else(|| Error::UnknownTask(id.clone()))?;
                groups.push(InputGroup {
                    x: ds.inputs(idx)?,
                    targets: vec![(id.clone(), target(ds, spec, idx)?)],
                });
            }
        }
    }
    Ok(ObjectiveBatch { groups })
}

fn check_tasks(tasks: &[TaskSpec], ds: &MultiTaskDataset, encoder: &EncoderConfig) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Config("no tasks to train".into()));
    }
    for spec in tasks {
        spec.validate()?;
        let info = ds.manifest().task(&spec.id)?;
        if info.loss != spec.loss || info.output_dim != spec.output_dim {
            return Err(Error::Config(format!(
                "task `{}` is {} with {} outputs in the dataset but {} with {} in the config",
                spec.id, info.loss, info.output_dim, spec.loss, spec.output_dim
            )));
        }
    }
    if ds.manifest().input_shape != encoder.input_shape() {
        return Err(Error::Config(format!(
            "dataset inputs are {:?}, encoder expects {:?}",
            ds.manifest().input_shape,
            encoder.input_shape()
        )));
    }
    Ok(())
}

fn flat_encoder_grad(bound_names: &[(String, Var)], grads: &crate::tensor::Gradients) -> Vec<f64> {
    let mut out = Vec::new();
    for (_, v) in bound_names {
        if let Some(g) = grads.get(*v) {
            out.extend_from_slice(g);
        }
    }
    out
}

fn divergence(epoch: usize, step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(what) => Error::Divergence(format!("epoch {epoch}, step {step}: non-finite {what}")),
        other => other,
    }
}

#[derive(Default)]
struct EpochSums {
    task: Vec<f64>,
    distill: Vec<Vec<f64>>,
    weight: Vec<f64>,
    count: Vec<usize>,
}

fn run(
    tasks: &[TaskSpec],
    train: &MultiTaskDataset,
    val: &MultiTaskDataset,
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
    teachers: Option<&Teachers>,
    mut observer: Option<Observer<'_>>,
) -> Result<(ModelBundle, RunRecord)> {
    cfg.validate()?;
    check_tasks(tasks, train, encoder)?;
    let t_count = tasks.len();
    let kd = cfg.method == Method::Kd;
    let adaptor = if kd { cfg.adaptor } else { AdaptorKind::None };
    let mut student = ModelBundle::init(encoder, tasks, adaptor, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam);
    let mut state = BalancerState::new(strategy(cfg.method), t_count);
    let mut log_vars = Tensor::new(vec![t_count], vec![0.0; t_count], true)?;
    let mut log_var_adam = Adam::new(cfg.adam);
    let distill = if kd { distilled_tasks(tasks) } else { Vec::new() };
    let taps: Vec<usize> = if distill.is_empty() {
        Vec::new()
    } else {
        encoder.tap_points.clone()
    };
    let gradnorm_layer = format!("encoder.stage{}.weight", encoder.last_stage());
    let mut record = RunRecord {
        taps: taps.clone(),
        rows: Vec::new(),
    };

    for epoch in 0..cfg.epochs {
        let (lr, adaptor_lr) = lr_at(cfg, epoch);
        if state.strategy == Strategy::Dwa {
            state.weights = weights_dwa(&state, epoch, cfg.balancer.dwa_temperature)?;
        }
        let plan = make_batches(train, cfg.batch_size, epoch, cfg.seed)?;
        let mut sums = EpochSums {
            task: vec![0.0; t_count],
            distill: vec![vec![0.0; taps.len()]; t_count],
            weight: vec![0.0; t_count],
            count: vec![0; t_count],
        };

        for (step, batch) in plan.batches.iter().enumerate() {
            let wrap = divergence(epoch, step);
            let ob = objective_batch(train, batch, tasks)?;
            let mut tape = Tape::new();
            let bound = student.bind(&mut tape);
            let losses = forward_losses(&mut tape, &bound, teachers, &ob, &taps, &distill).map_err(&wrap)?;
            let present: Vec<usize> = (0..t_count).filter(|&i| losses.task.contains_key(&tasks[i].id)).collect();
            let mut applied = vec![0.0; t_count];

            let (total, breakdown, log_var_var) = match state.strategy {
                Strategy::Uncert => {
                    let sv = tape.leaf(&log_vars);
                    let mut ls = Vec::new();
                    let mut ss = Vec::new();
                    let mut bd = LossBreakdown::default();
                    for &i in &present {
                        let l = losses.task[&tasks[i].id];
                        bd.task_loss.insert(tasks[i].id.clone(), tape.scalar(l).map_err(&wrap)?);
                        ls.push(tape.scale(l, tasks[i].w));
                        ss.push(tape.index(sv, i)?);
                        applied[i] = (-log_vars.values()[i]).exp() * tasks[i].w;
                    }
                    let total = uncert_combine(&mut tape, &ls, &ss)?;
                    bd.total = tape.scalar(total).map_err(&wrap)?;
                    (total, bd, Some(sv))
                }
                Strategy::Mgda => {
                    let shared: Vec<(String, Var)> = student
                        .params()
                        .keys()
                        .filter(|n| n.starts_with("encoder."))
                        .map(|n| Ok((n.clone(), bound.var(n)?)))
                        .collect::<Result<_>>()?;
                    let mut per_task = Vec::new();
                    for &i in &present {
                        let g = tape.backward(losses.task[&tasks[i].id]).map_err(&wrap)?;
                        per_task.push(flat_encoder_grad(&shared, &g));
                    }
                    let sol = frank_wolfe_min_norm(&per_task, cfg.balancer.mgda_max_iter, cfg.balancer.mgda_tol)?;
                    let mut scale = BTreeMap::new();
                    for (k, &i) in present.iter().enumerate() {
                        state.weights[i] = sol.weights[k];
                        scale.insert(tasks[i].id.clone(), sol.weights[k]);
                    }
                    let (total, bd) = combine(&mut tape, &losses, tasks, &scale).map_err(&wrap)?;
                    (total, bd, None)
                }
                _ => {
                    let scale: BTreeMap<String, f64> = if state.strategy == Strategy::Uniform {
                        BTreeMap::new()
                    } else {
                        tasks.iter().map(|t| t.id.clone()).zip(state.weights.iter().copied()).collect()
                    };
                    let (total, bd) = combine(&mut tape, &losses, tasks, &scale).map_err(&wrap)?;
                    (total, bd, None)
                }
            };
            if state.strategy != Strategy::Uncert {
                for &i in &present {
                    applied[i] = state.weights[i] * tasks[i].w;
                }
            }

            let grads = tape.backward(total).map_err(&wrap)?;
            let named = bound.gradients(&grads);
            if let Some(obs) = observer.as_mut() {
                obs(&StepEvent {
                    epoch,
                    step,
                    gradients: &named,
                    breakdown: &breakdown,
                    weights: &applied,
                });
            }

            if state.strategy == Strategy::GradNorm && present.len() == t_count {
                let layer = bound.var(&gradnorm_layer)?;
                let mut norms = Vec::with_capacity(t_count);
                for spec in tasks {
                    let g = tape.backward(losses.task[&spec.id]).map_err(&wrap)?;
                    norms.push(g.get(layer).map_or(0.0, |g| g.iter().map(|v| v * v).sum::<f64>().sqrt()));
                }
                let now: Vec<f64> = tasks.iter().map(|t| breakdown.task_loss[&t.id]).collect();
                let init = state.initial_losses.get_or_insert_with(|| now.clone()).clone();
                state.weights = gradnorm_step(
                    &state.weights,
                    &norms,
                    &now,
                    &init,
                    cfg.balancer.gradnorm_alpha,
                    cfg.balancer.gradnorm_lr,
                )?;
            }
            if let Some(sv) = log_var_var {
                grads.accumulate_into(sv, &mut log_vars)?;
                log_var_adam.tick();
                log_var_adam.step_tensor("log_vars", &mut log_vars, cfg.balancer.uncert_lr.unwrap_or(lr));
                state.log_vars = log_vars.values().to_vec();
            }
            drop(bound);

            for &i in &present {
                let id = &tasks[i].id;
                sums.task[i] += breakdown.task_loss[id];
                if let Some(d) = breakdown.distill_loss.get(id) {
                    for (slot, tap) in taps.iter().enumerate() {
                        sums.distill[i][slot] += d[tap];
                    }
                }
                sums.weight[i] += applied[i];
                sums.count[i] += 1;
            }
            student.accumulate_grads(&named)?;
            adam.step(&mut student, |name| {
                if name.starts_with("adaptor.") {
                    adaptor_lr
                } else {
                    lr
                }
            })?;
        }

        let metrics = evaluate(&student, val).map_err(divergence(epoch, plan.batches.len()))?;
        let mut means = Vec::with_capacity(t_count);
        for (i, spec) in tasks.iter().enumerate() {
            let n = sums.count[i].max(1) as f64;
            let task_loss = sums.task[i] / n;
            if !task_loss.is_finite() {
                return Err(Error::Divergence(format!("epoch {epoch}: task `{}` loss is {task_loss}", spec.id)));
            }
            means.push(task_loss);
            record.rows.push(RecordRow {
                epoch,
                task: spec.id.clone(),
                task_loss,
                distill_loss: distill
                    .contains(&spec.id)
                    .then(|| sums.distill[i].iter().map(|d| d / n).collect()),
                val_metric: metrics.get(&spec.id).copied().unwrap_or(f64::NAN),
                weight: sums.weight[i] / n,
            });
        }
        state.end_epoch(means);
    }
    Ok((student, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_disjoint_pair, gen_scale_clash, split_train_val, DisjointPairParams, ScaleClashParams};

    fn small() -> (MultiTaskDataset, MultiTaskDataset) {
        let ds = gen_scale_clash(&ScaleClashParams::new(200, 4, 3)).unwrap();
        split_train_val(&ds, 0.2, 0).unwrap()
    }

    fn enc() -> EncoderConfig {
        EncoderConfig::new(4, vec![8, 6])
    }

    #[test]
    fn single_task_record_and_freeze() {
        let (tr, va) = small();
        let cfg = TrainConfig::new(Method::Stl, 4, 0.01, 16, 1);
        let spec = TaskSpec::new("cls", LossKind::CrossEntropy, 4);
        let (teacher, rec) = train_single_task(&spec, &tr, &va, &enc(), &cfg).unwrap();
        assert!(teacher.is_frozen());
        assert_eq!(rec.rows.len(), 4);
        assert!(rec.taps.is_empty());
        assert_eq!(teacher.tasks().len(), 1);
    }

    #[test]
    fn every_method_runs() {
        let (tr, va) = small();
        let tasks = tr.task_specs();
        for m in [Method::Uniform, Method::Dwa, Method::Uncert, Method::Gradnorm, Method::Mgda] {
            let cfg = TrainConfig::new(m, 3, 0.01, 32, 2);
            let (_, rec) = train_multitask(&tasks, &tr, &va, &enc(), &cfg, None, None).unwrap();
            assert_eq!(rec.rows.len(), 6, "{m}");
            assert!(rec.rows.iter().all(|r| r.weight.is_finite() && r.weight >= 0.0), "{m}");
        }
    }

    #[test]
    fn dwa_and_gradnorm_weights_sum_to_t() {
        let (tr, va) = small();
        let tasks = tr.task_specs();
        for m in [Method::Dwa, Method::Gradnorm] {
            let cfg = TrainConfig::new(m, 4, 0.01, 32, 2);
            let mut sums = Vec::new();
            let mut obs = |e: &StepEvent<'_>| sums.push(e.weights.iter().sum::<f64>());
            train_multitask(&tasks, &tr, &va, &enc(), &cfg, None, Some(&mut obs)).unwrap();
            assert!(sums.iter().all(|s| (s - 2.0).abs() < 1e-12), "{m}: {sums:?}");
        }
    }

    #[test]
    fn teacher_consistency_enforced() {
        let (tr, va) = small();
        let tasks = tr.task_specs();
        let kd = TrainConfig::new(Method::Kd, 1, 0.01, 32, 2);
        assert!(matches!(
            train_multitask(&tasks, &tr, &va, &enc(), &kd, None, None),
            Err(Error::MissingTeacher(_))
        ));
        let uni = TrainConfig::new(Method::Uniform, 1, 0.01, 32, 2);
        let teachers = Teachers::new();
        assert!(matches!(
            train_multitask(&tasks, &tr, &va, &enc(), &uni, Some(&teachers), None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn kd_teachers_untouched_and_distill_recorded() {
        let (tr, va) = small();
        let base = TrainConfig::new(Method::Stl, 2, 0.01, 32, 4);
        let mut teachers = Teachers::new();
        for spec in tr.task_specs() {
            let (t, _) = train_single_task(&spec, &tr, &va, &enc(), &base).unwrap();
            teachers.insert(spec.id.clone(), t);
        }
        let snapshot = teachers.clone();
        let tasks: Vec<TaskSpec> = tr.task_specs().into_iter().map(|t| t.with_weights(1.0, 1.0)).collect();
        let kd = TrainConfig::new(Method::Kd, 2, 0.01, 32, 4);
        let (_, rec) = train_multitask(&tasks, &tr, &va, &enc(), &kd, Some(&teachers), None).unwrap();
        assert_eq!(teachers, snapshot);
        assert_eq!(rec.taps, enc().tap_points);
        assert!(rec.rows.iter().all(|r| r.distill_loss.as_ref().is_some_and(|d| d.len() == rec.taps.len())));
    }

    #[test]
    fn self_distillation_starts_near_zero() {
        let (tr, va) = small();
        let tasks: Vec<TaskSpec> = tr.task_specs().into_iter().map(|t| t.with_weights(1.0, 1.0)).collect();
        let cfg = TrainConfig::new(Method::Kd, 1, 0.01, 32, 6);
        // Parameters draw from per-name streams, so a teacher initialized
        // with the student's seed has the student's encoder.
        let teachers: Teachers = tasks
            .iter()
            .map(|t| {
                let b = ModelBundle::init(&enc(), std::slice::from_ref(t), AdaptorKind::None, 6).unwrap();
                (t.id.clone(), b.freeze())
            })
            .collect();
        let mut first = None;
        let mut obs = |e: &StepEvent<'_>| {
            if first.is_none() {
                first = Some(e.breakdown.clone());
            }
        };
        train_multitask(&tasks, &tr, &va, &enc(), &cfg, Some(&teachers), Some(&mut obs)).unwrap();
        let first = first.unwrap();
        for per_tap in first.distill_loss.values() {
            // Only the adaptor initialization noise separates the two.
            assert!(per_tap.values().all(|&d| d < 1e-2), "{per_tap:?}");
        }
    }

    #[test]
    fn deterministic_records() {
        let (tr, va) = small();
        let tasks = tr.task_specs();
        for m in [Method::Uniform, Method::Mgda, Method::Uncert] {
            let cfg = TrainConfig::new(m, 3, 0.01, 32, 9);
            let a = train_multitask(&tasks, &tr, &va, &enc(), &cfg, None, None).unwrap();
            let b = train_multitask(&tasks, &tr, &va, &enc(), &cfg, None, None).unwrap();
            assert_eq!(a.1.to_csv().unwrap(), b.1.to_csv().unwrap());
            assert_eq!(a.0, b.0);
        }
    }

    #[test]
    fn disjoint_regime_trains() {
        let ds = gen_disjoint_pair(&DisjointPairParams::new(120, 60, 5, 4, 6, 0)).unwrap();
        let (tr, va) = split_train_val(&ds, 0.2, 0).unwrap();
        let tasks = tr.task_specs();
        let cfg = TrainConfig::new(Method::Mgda, 2, 0.01, 16, 1);
        let (_, rec) = train_multitask(&tasks, &tr, &va, &EncoderConfig::new(5, vec![8, 8]), &cfg, None, None).unwrap();
        assert_eq!(rec.rows.len(), 4);
    }

    #[test]
    fn divergence_is_reported() {
        let (tr, va) = small();
        let tasks = tr.task_specs();
        let cfg = TrainConfig::new(Method::Uniform, 50, 1e300, 32, 1);
        let err = train_multitask(&tasks, &tr, &va, &enc(), &cfg, None, None).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)), "{err:?}");
    }
}
